#include "ugnn/model_ir.hpp"

#include <cmath>
#include <cstring>

#include "ugnn/errors.hpp"
#include "ugnn/rng.hpp"

namespace ugnn {

double activate(Activation act, double z) {
  switch (act) {
    case Activation::identity: return z;
    case Activation::relu: return z > 0.0 ? z : 0.0;
    case Activation::tanh: return std::tanh(z);
    case Activation::sigmoid: return 1.0 / (1.0 + std::exp(-z));
  }
  return z;
}

double activation_slope(Activation act, double y) {
  switch (act) {
    case Activation::identity: return 1.0;
    case Activation::relu: return y > 0.0 ? 1.0 : 0.0;  // subgradient 0 at 0
    case Activation::tanh: return 1.0 - y * y;
    case Activation::sigmoid: return y * (1.0 - y);
  }
  return 1.0;
}

std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::sigmoid: return "sigmoid";
  }
  return "?";
}

Activation activation_from_string(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "sigmoid") return Activation::sigmoid;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::gnn_mp: return "gnn_mp";
    case LayerKind::readout_mean: return "readout_mean";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

LayerKind layer_kind_from_string(std::string_view name) {
  if (name == "dense") return LayerKind::dense;
  if (name == "conv2d") return LayerKind::conv2d;
  if (name == "gnn_mp") return LayerKind::gnn_mp;
  if (name == "readout_mean") return LayerKind::readout_mean;
  if (name == "flatten") return LayerKind::flatten;
  throw ConfigError("unknown layer kind '" + std::string(name) + "'");
}

std::string to_string(const Shape& s) {
  return "(" + std::to_string(s.channels) + "," + std::to_string(s.height) + "," + std::to_string(s.width) + ")";
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out, Activation act) {
  LayerSpec l;
  l.kind = LayerKind::dense;
  l.in = in;
  l.out = out;
  l.activation = act;
  return l;
}

LayerSpec LayerSpec::conv2d(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride,
                            std::size_t padding, Activation act) {
  LayerSpec l;
  l.kind = LayerKind::conv2d;
  l.in = c_in;
  l.out = c_out;
  l.kernel_h = kernel;
  l.kernel_w = kernel;
  l.stride = stride;
  l.padding = padding;
  l.activation = act;
  return l;
}

LayerSpec LayerSpec::gnn(std::size_t in, std::size_t out, Activation act) {
  LayerSpec l;
  l.kind = LayerKind::gnn_mp;
  l.in = in;
  l.out = out;
  l.activation = act;
  return l;
}

LayerSpec LayerSpec::readout(std::size_t channels) {
  LayerSpec l;
  l.kind = LayerKind::readout_mean;
  l.in = channels;
  l.out = channels;
  return l;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec l;
  l.kind = LayerKind::flatten;
  return l;
}

std::size_t LayerSpec::weight_count() const {
  switch (kind) {
    case LayerKind::dense:
    case LayerKind::gnn_mp: return in * out;
    case LayerKind::conv2d: return out * in * kernel_h * kernel_w;
    default: return 0;
  }
}

std::size_t LayerSpec::bias_count() const { return has_params() ? out : 0; }

std::size_t ModelSpec::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight_count() + l.bias_count();
  return n;
}

FixedGraph grid_graph(std::size_t height, std::size_t width, AdjacencyNorm norm) {
  FixedGraph g;
  g.num_nodes = height * width;
  std::vector<std::size_t> degree(g.num_nodes, 0);
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      const std::size_t v = i * width + j;
      // Incoming neighbours of v in a fixed order: up, left, self, right, down.
      if (i > 0) pairs.emplace_back(v - width, v);
      if (j > 0) pairs.emplace_back(v - 1, v);
      pairs.emplace_back(v, v);
      if (j + 1 < width) pairs.emplace_back(v + 1, v);
      if (i + 1 < height) pairs.emplace_back(v + width, v);
    }
  }
  for (const auto& [u, v] : pairs) ++degree[v];
  g.entries.reserve(pairs.size());
  for (const auto& [u, v] : pairs) {
    const double c = norm == AdjacencyNorm::mean
                         ? 1.0 / static_cast<double>(degree[v])
                         : 1.0 / std::sqrt(static_cast<double>(degree[u]) * static_cast<double>(degree[v]));
    g.entries.push_back({u, v, c});
  }
  return g;
}

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (in + 2 * padding < kernel) return 0;
  return (in + 2 * padding - kernel) / stride + 1;
}

namespace {

std::string layer_name(const ModelSpec& spec, std::size_t l) {
  return "model '" + spec.model_id + "' layer " + std::to_string(l) + " (" + std::string(to_string(spec.layers[l].kind)) + ")";
}

}  // namespace

std::vector<Shape> layer_output_shapes(const ModelSpec& spec) {
  if (spec.input_shape.size() == 0) throw ConfigError("model '" + spec.model_id + "': empty input shape");
  std::vector<Shape> shapes;
  shapes.reserve(spec.layers.size());
  Shape cur = spec.input_shape;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerSpec& layer = spec.layers[l];
    const auto fail = [&](const std::string& why) {
      throw ConfigError(layer_name(spec, l) + ": " + why + "; input shape " + to_string(cur));
    };
    switch (layer.kind) {
      case LayerKind::dense:
        if (layer.in == 0 || layer.out == 0) fail("dimensions must be >= 1");
        if (cur.height != 1 || cur.width != 1) fail("dense layer needs a vector input (insert flatten)");
        if (cur.channels != layer.in) fail("expects " + std::to_string(layer.in) + " inputs");
        cur = Shape{layer.out, 1, 1};
        break;
      case LayerKind::conv2d: {
        if (layer.in == 0 || layer.out == 0 || layer.kernel_h == 0 || layer.kernel_w == 0) fail("dimensions must be >= 1");
        if (layer.stride == 0) fail("stride must be >= 1");
        if (cur.channels != layer.in) fail("expects " + std::to_string(layer.in) + " input channels");
        const std::size_t h = conv_output_extent(cur.height, layer.kernel_h, layer.stride, layer.padding);
        const std::size_t w = conv_output_extent(cur.width, layer.kernel_w, layer.stride, layer.padding);
        if (h == 0 || w == 0) fail("kernel larger than padded input");
        cur = Shape{layer.out, h, w};
        break;
      }
      case LayerKind::gnn_mp:
        if (layer.in == 0 || layer.out == 0) fail("dimensions must be >= 1");
        if (!spec.graph) fail("gnn_mp layer requires a fixed graph");
        if (cur.channels != layer.in) fail("expects " + std::to_string(layer.in) + " feature channels");
        if (cur.spatial() != spec.graph->num_nodes) fail("graph has " + std::to_string(spec.graph->num_nodes) + " nodes");
        cur = Shape{layer.out, cur.height, cur.width};
        break;
      case LayerKind::readout_mean:
        if (layer.in == 0) fail("dimensions must be >= 1");
        if (cur.channels != layer.in) fail("expects " + std::to_string(layer.in) + " feature channels");
        cur = Shape{layer.in, 1, 1};
        break;
      case LayerKind::flatten:
        cur = Shape{cur.size(), 1, 1};
        break;
    }
    shapes.push_back(cur);
  }
  return shapes;
}

void validate(const ModelSpec& spec, bool require_params) {
  layer_output_shapes(spec);
  if (spec.graph) {
    for (const auto& e : spec.graph->entries) {
      if (e.src >= spec.graph->num_nodes || e.dst >= spec.graph->num_nodes) {
        throw ConfigError("model '" + spec.model_id + "': adjacency entry out of range");
      }
      if (!std::isfinite(e.coeff)) throw ConfigError("model '" + spec.model_id + "': non-finite adjacency coefficient");
    }
  }
  if (!require_params) return;
  if (spec.params.size() != spec.layers.size()) {
    throw ConfigError("model '" + spec.model_id + "': expected " + std::to_string(spec.layers.size()) +
                      " parameter entries, got " + std::to_string(spec.params.size()));
  }
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& layer = spec.layers[l];
    const auto& p = spec.params[l];
    if (p.weight.size() != layer.weight_count() || p.bias.size() != layer.bias_count()) {
      throw ConfigError(layer_name(spec, l) + ": parameter sizes (" + std::to_string(p.weight.size()) + ", " +
                        std::to_string(p.bias.size()) + ") do not match (" + std::to_string(layer.weight_count()) +
                        ", " + std::to_string(layer.bias_count()) + ")");
    }
  }
}

ModelSpec init_params(ModelSpec spec, std::uint64_t seed) {
  validate(spec, false);
  Rng rng(seed);
  spec.params.assign(spec.layers.size(), {});
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& layer = spec.layers[l];
    if (!layer.has_params()) continue;
    const std::size_t fan_in = layer.kind == LayerKind::conv2d ? layer.in * layer.kernel_h * layer.kernel_w : layer.in;
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    auto& p = spec.params[l];
    p.weight.resize(layer.weight_count());
    for (auto& w : p.weight) w = rng.uniform(-bound, bound);
    p.bias.assign(layer.bias_count(), 0.0);
  }
  return spec;
}

UnitCounts count_units(const ModelSpec& spec) {
  const auto shapes = layer_output_shapes(spec);
  UnitCounts c;
  c.nodes = spec.input_shape.size();
  Shape cur = spec.input_shape;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& layer = spec.layers[l];
    const Shape& out = shapes[l];
    switch (layer.kind) {
      case LayerKind::dense:
        c.edges += layer.in * layer.out;
        break;
      case LayerKind::conv2d: {
        // In-bounds kernel taps factor into a row count times a column count.
        const auto taps = [&](std::size_t in_extent, std::size_t out_extent, std::size_t kernel) {
          std::size_t total = 0;
          for (std::size_t o = 0; o < out_extent; ++o) {
            for (std::size_t k = 0; k < kernel; ++k) {
              const long long pos = static_cast<long long>(o * layer.stride + k) - static_cast<long long>(layer.padding);
              if (pos >= 0 && pos < static_cast<long long>(in_extent)) ++total;
            }
          }
          return total;
        };
        c.edges += layer.in * layer.out * taps(cur.height, out.height, layer.kernel_h) * taps(cur.width, out.width, layer.kernel_w);
        break;
      }
      case LayerKind::gnn_mp:
        c.edges += spec.graph->entries.size() * layer.in * layer.out;
        break;
      case LayerKind::readout_mean:
        c.edges += cur.size();
        break;
      case LayerKind::flatten:
        break;
    }
    if (layer.kind != LayerKind::flatten) c.nodes += out.size();
    cur = out;
  }
  return c;
}

namespace {

void forward_layer(const ModelSpec& spec, std::size_t l, const Shape& in_shape, const Shape& out_shape,
                   const Matrix& x, Matrix& y) {
  const LayerSpec& layer = spec.layers[l];
  const std::size_t batch = x.rows;
  y = Matrix(batch, out_shape.size());
  if (layer.kind == LayerKind::flatten) {
    y.data = x.data;
    return;
  }
  const LayerParams* p = layer.has_params() ? &spec.params[l] : nullptr;
  switch (layer.kind) {
    case LayerKind::dense:
      for (std::size_t b = 0; b < batch; ++b) {
        const auto xi = x.row(b);
        for (std::size_t o = 0; o < layer.out; ++o) {
          double z = p->bias[o];
          const double* w = p->weight.data() + o * layer.in;
          for (std::size_t i = 0; i < layer.in; ++i) z += w[i] * xi[i];
          y(b, o) = z;
        }
      }
      break;
    case LayerKind::conv2d: {
      const std::size_t kh = layer.kernel_h, kw = layer.kernel_w;
      for (std::size_t b = 0; b < batch; ++b) {
        const auto xi = x.row(b);
        for (std::size_t co = 0; co < layer.out; ++co) {
          for (std::size_t oi = 0; oi < out_shape.height; ++oi) {
            for (std::size_t oj = 0; oj < out_shape.width; ++oj) {
              double z = p->bias[co];
              for (std::size_t ci = 0; ci < layer.in; ++ci) {
                for (std::size_t ki = 0; ki < kh; ++ki) {
                  const long long ii = static_cast<long long>(oi * layer.stride + ki) - static_cast<long long>(layer.padding);
                  if (ii < 0 || ii >= static_cast<long long>(in_shape.height)) continue;
                  for (std::size_t kj = 0; kj < kw; ++kj) {
                    const long long jj = static_cast<long long>(oj * layer.stride + kj) - static_cast<long long>(layer.padding);
                    if (jj < 0 || jj >= static_cast<long long>(in_shape.width)) continue;
                    z += p->weight[((co * layer.in + ci) * kh + ki) * kw + kj] *
                         xi[(ci * in_shape.height + static_cast<std::size_t>(ii)) * in_shape.width + static_cast<std::size_t>(jj)];
                  }
                }
              }
              y(b, (co * out_shape.height + oi) * out_shape.width + oj) = z;
            }
          }
        }
      }
      break;
    }
    case LayerKind::gnn_mp: {
      // sigma(Â H W): aggregate first, then mix channels.
      const std::size_t n = spec.graph->num_nodes;
      std::vector<double> agg(layer.in * n);
      for (std::size_t b = 0; b < batch; ++b) {
        const auto xi = x.row(b);
        std::fill(agg.begin(), agg.end(), 0.0);
        for (std::size_t ci = 0; ci < layer.in; ++ci) {
          for (const auto& e : spec.graph->entries) agg[ci * n + e.dst] += e.coeff * xi[ci * n + e.src];
        }
        for (std::size_t co = 0; co < layer.out; ++co) {
          for (std::size_t v = 0; v < n; ++v) {
            double z = p->bias[co];
            for (std::size_t ci = 0; ci < layer.in; ++ci) z += p->weight[co * layer.in + ci] * agg[ci * n + v];
            y(b, co * n + v) = z;
          }
        }
      }
      break;
    }
    case LayerKind::readout_mean: {
      const std::size_t n = in_shape.spatial();
      for (std::size_t b = 0; b < batch; ++b) {
        const auto xi = x.row(b);
        for (std::size_t d = 0; d < layer.in; ++d) {
          double s = 0.0;
          for (std::size_t v = 0; v < n; ++v) s += xi[d * n + v];
          y(b, d) = s / static_cast<double>(n);
        }
      }
      break;
    }
    case LayerKind::flatten:
      break;
  }
  for (auto& v : y.data) v = activate(layer.activation, v);
}

}  // namespace

ForwardCache dense_forward_cached(const ModelSpec& spec, const Matrix& batch) {
  validate(spec);
  const auto shapes = layer_output_shapes(spec);
  if (batch.cols != spec.input_size()) {
    throw ConfigError("model '" + spec.model_id + "': batch has " + std::to_string(batch.cols) + " columns, expected " +
                      std::to_string(spec.input_size()));
  }
  ForwardCache cache;
  cache.acts.reserve(spec.layers.size() + 1);
  cache.acts.push_back(batch);
  Shape in_shape = spec.input_shape;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    Matrix y;
    forward_layer(spec, l, in_shape, shapes[l], cache.acts.back(), y);
    cache.acts.push_back(std::move(y));
    in_shape = shapes[l];
  }
  return cache;
}

Matrix dense_forward(const ModelSpec& spec, const Matrix& batch) {
  auto cache = dense_forward_cached(spec, batch);
  return std::move(cache.acts.back());
}

std::vector<LayerParams> dense_backward(const ModelSpec& spec, const ForwardCache& cache, const Matrix& logit_grad) {
  const auto shapes = layer_output_shapes(spec);
  std::vector<LayerParams> grads(spec.layers.size());
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    grads[l].weight.assign(spec.layers[l].weight_count(), 0.0);
    grads[l].bias.assign(spec.layers[l].bias_count(), 0.0);
  }
  Matrix dy = logit_grad;
  for (std::size_t l = spec.layers.size(); l-- > 0;) {
    const LayerSpec& layer = spec.layers[l];
    const Matrix& x = cache.acts[l];
    const Matrix& y = cache.acts[l + 1];
    const Shape in_shape = l == 0 ? spec.input_shape : shapes[l - 1];
    const Shape& out_shape = shapes[l];
    const std::size_t batch = x.rows;
    Matrix dz = dy;
    for (std::size_t k = 0; k < dz.data.size(); ++k) dz.data[k] *= activation_slope(layer.activation, y.data[k]);
    Matrix dx(batch, x.cols);
    switch (layer.kind) {
      case LayerKind::flatten:
        dx.data = dz.data;
        break;
      case LayerKind::dense: {
        const auto& w = spec.params[l].weight;
        auto& g = grads[l];
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t o = 0; o < layer.out; ++o) {
            const double d = dz(b, o);
            if (d == 0.0) continue;
            g.bias[o] += d;
            for (std::size_t i = 0; i < layer.in; ++i) {
              g.weight[o * layer.in + i] += d * x(b, i);
              dx(b, i) += w[o * layer.in + i] * d;
            }
          }
        }
        break;
      }
      case LayerKind::conv2d: {
        const auto& w = spec.params[l].weight;
        auto& g = grads[l];
        const std::size_t kh = layer.kernel_h, kw = layer.kernel_w;
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t co = 0; co < layer.out; ++co) {
            for (std::size_t oi = 0; oi < out_shape.height; ++oi) {
              for (std::size_t oj = 0; oj < out_shape.width; ++oj) {
                const double d = dz(b, (co * out_shape.height + oi) * out_shape.width + oj);
                if (d == 0.0) continue;
                g.bias[co] += d;
                for (std::size_t ci = 0; ci < layer.in; ++ci) {
                  for (std::size_t ki = 0; ki < kh; ++ki) {
                    const long long ii = static_cast<long long>(oi * layer.stride + ki) - static_cast<long long>(layer.padding);
                    if (ii < 0 || ii >= static_cast<long long>(in_shape.height)) continue;
                    for (std::size_t kj = 0; kj < kw; ++kj) {
                      const long long jj = static_cast<long long>(oj * layer.stride + kj) - static_cast<long long>(layer.padding);
                      if (jj < 0 || jj >= static_cast<long long>(in_shape.width)) continue;
                      const std::size_t wi = ((co * layer.in + ci) * kh + ki) * kw + kj;
                      const std::size_t xi = (ci * in_shape.height + static_cast<std::size_t>(ii)) * in_shape.width +
                                             static_cast<std::size_t>(jj);
                      g.weight[wi] += d * x(b, xi);
                      dx(b, xi) += w[wi] * d;
                    }
                  }
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::gnn_mp: {
        const auto& w = spec.params[l].weight;
        auto& g = grads[l];
        const std::size_t n = spec.graph->num_nodes;
        std::vector<double> agg(layer.in * n), dagg(layer.in * n);
        for (std::size_t b = 0; b < batch; ++b) {
          std::fill(agg.begin(), agg.end(), 0.0);
          std::fill(dagg.begin(), dagg.end(), 0.0);
          for (std::size_t ci = 0; ci < layer.in; ++ci) {
            for (const auto& e : spec.graph->entries) agg[ci * n + e.dst] += e.coeff * x(b, ci * n + e.src);
          }
          for (std::size_t co = 0; co < layer.out; ++co) {
            for (std::size_t v = 0; v < n; ++v) {
              const double d = dz(b, co * n + v);
              if (d == 0.0) continue;
              g.bias[co] += d;
              for (std::size_t ci = 0; ci < layer.in; ++ci) {
                g.weight[co * layer.in + ci] += d * agg[ci * n + v];
                dagg[ci * n + v] += w[co * layer.in + ci] * d;
              }
            }
          }
          for (std::size_t ci = 0; ci < layer.in; ++ci) {
            for (const auto& e : spec.graph->entries) dx(b, ci * n + e.src) += e.coeff * dagg[ci * n + e.dst];
          }
        }
        break;
      }
      case LayerKind::readout_mean: {
        const std::size_t n = in_shape.spatial();
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t d = 0; d < layer.in; ++d) {
            for (std::size_t v = 0; v < n; ++v) dx(b, d * n + v) = dz(b, d) * inv;
          }
        }
        break;
      }
    }
    dy = std::move(dx);
  }
  return grads;
}

std::vector<double> flatten_params(const ModelSpec& spec) {
  std::vector<double> flat;
  flat.reserve(spec.parameter_count());
  for (const auto& p : spec.params) {
    flat.insert(flat.end(), p.weight.begin(), p.weight.end());
    flat.insert(flat.end(), p.bias.begin(), p.bias.end());
  }
  return flat;
}

void unflatten_params(ModelSpec& spec, std::span<const double> flat) {
  if (flat.size() != spec.parameter_count()) {
    throw ConfigError("model '" + spec.model_id + "': expected " + std::to_string(spec.parameter_count()) +
                      " parameters, got " + std::to_string(flat.size()));
  }
  spec.params.resize(spec.layers.size());
  std::size_t k = 0;
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    auto& p = spec.params[l];
    p.weight.assign(flat.begin() + static_cast<std::ptrdiff_t>(k), flat.begin() + static_cast<std::ptrdiff_t>(k + spec.layers[l].weight_count()));
    k += spec.layers[l].weight_count();
    p.bias.assign(flat.begin() + static_cast<std::ptrdiff_t>(k), flat.begin() + static_cast<std::ptrdiff_t>(k + spec.layers[l].bias_count()));
    k += spec.layers[l].bias_count();
  }
}

std::vector<double> flatten_grads(const std::vector<LayerParams>& grads) {
  std::vector<double> flat;
  for (const auto& g : grads) {
    flat.insert(flat.end(), g.weight.begin(), g.weight.end());
    flat.insert(flat.end(), g.bias.begin(), g.bias.end());
  }
  return flat;
}

std::uint64_t params_checksum(const ModelSpec& spec) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (double v : flatten_params(spec)) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char c : bytes) {
      h ^= c;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

}  // namespace ugnn
