#pragma once

// Helpers shared by the unit and acceptance tests: random model specs,
// independent reference implementations, and a finite-difference driver.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ugnn/engine.hpp"
#include "ugnn/graphize.hpp"
#include "ugnn/model_ir.hpp"
#include "ugnn/rng.hpp"
#include "ugnn/theta.hpp"
#include "ugnn/unified.hpp"

namespace ugnn::testing {

inline Activation random_activation(Rng& rng) { return static_cast<Activation>(rng.below(4)); }

inline std::size_t range(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

// Weights and biases uniform in [-1, 1] so that bias paths are exercised.
inline ModelSpec randomize(ModelSpec spec, Rng& rng) {
  spec.params.assign(spec.layers.size(), {});
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const auto& layer = spec.layers[l];
    spec.params[l].weight.resize(layer.weight_count());
    spec.params[l].bias.resize(layer.bias_count());
    for (auto& w : spec.params[l].weight) w = rng.uniform(-1.0, 1.0);
    for (auto& b : spec.params[l].bias) b = rng.uniform(-1.0, 1.0);
  }
  return spec;
}

inline ModelSpec random_mlp(Rng& rng, const std::string& id = "mlp") {
  ModelSpec spec;
  spec.model_id = id;
  std::size_t width = range(rng, 1, 32);
  spec.input_shape = {width, 1, 1};
  const std::size_t depth = range(rng, 1, 4);
  for (std::size_t l = 0; l < depth; ++l) {
    const std::size_t out = l + 1 == depth ? range(rng, 2, 10) : range(rng, 1, 32);
    spec.layers.push_back(LayerSpec::dense(width, out, random_activation(rng)));
    width = out;
  }
  return randomize(std::move(spec), rng);
}

inline ModelSpec random_cnn(Rng& rng, const std::string& id = "cnn") {
  ModelSpec spec;
  spec.model_id = id;
  std::size_t c = range(rng, 1, 2), h = range(rng, 4, 14), w = range(rng, 4, 14);
  spec.input_shape = {c, h, w};
  const std::size_t convs = range(rng, 1, 2);
  for (std::size_t l = 0; l < convs; ++l) {
    const std::size_t k = range(rng, 1, std::min<std::size_t>(3, std::min(h, w)));
    const std::size_t stride = range(rng, 1, 2);
    const std::size_t pad = k > 1 ? range(rng, 0, 1) : 0;
    const std::size_t out = range(rng, 1, 3);
    spec.layers.push_back(LayerSpec::conv2d(c, out, k, stride, pad, random_activation(rng)));
    h = conv_output_extent(h, k, stride, pad);
    w = conv_output_extent(w, k, stride, pad);
    c = out;
  }
  spec.layers.push_back(LayerSpec::flatten());
  spec.layers.push_back(LayerSpec::dense(c * h * w, range(rng, 2, 5), random_activation(rng)));
  return randomize(std::move(spec), rng);
}

inline ModelSpec random_gnn(Rng& rng, const std::string& id = "gnn") {
  ModelSpec spec;
  spec.model_id = id;
  std::size_t h = range(rng, 1, 5), w = range(rng, 1, 5);
  spec.graph = grid_graph(h, w, rng.below(2) ? AdjacencyNorm::mean : AdjacencyNorm::symmetric);
  std::size_t c = range(rng, 1, 2);
  spec.input_shape = {c, h, w};
  const std::size_t layers = range(rng, 1, 2);
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t out = range(rng, 1, 4);
    spec.layers.push_back(LayerSpec::gnn(c, out, random_activation(rng)));
    c = out;
  }
  if (rng.below(2)) {
    spec.layers.push_back(LayerSpec::readout(c));
    spec.layers.push_back(LayerSpec::dense(c, range(rng, 2, 4), random_activation(rng)));
  } else {
    spec.layers.push_back(LayerSpec::flatten());
    spec.layers.push_back(LayerSpec::dense(c * h * w, range(rng, 2, 4), random_activation(rng)));
  }
  return randomize(std::move(spec), rng);
}

inline Matrix random_batch(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (auto& v : m.data) v = rng.uniform(-1.0, 1.0);
  return m;
}

// Straightforward reference evaluation written independently of the library:
// loops over receptive fields for convolution and a dense normalized
// adjacency matrix for message passing, sigma(A_hat H W + b).
inline Matrix oracle_forward(const ModelSpec& spec, const Matrix& batch) {
  std::vector<std::vector<double>> dense_adj;
  if (spec.graph) {
    const std::size_t n = spec.graph->num_nodes;
    dense_adj.assign(n, std::vector<double>(n, 0.0));
    for (const auto& e : spec.graph->entries) dense_adj[e.dst][e.src] += e.coeff;
  }
  Matrix out(batch.rows, 0);
  for (std::size_t b = 0; b < batch.rows; ++b) {
    std::vector<double> x(batch.row(b).begin(), batch.row(b).end());
    Shape s = spec.input_shape;
    for (std::size_t l = 0; l < spec.layers.size(); ++l) {
      const auto& L = spec.layers[l];
      const auto& P = spec.params[l];
      std::vector<double> y;
      switch (L.kind) {
        case LayerKind::dense: {
          y.assign(L.out, 0.0);
          for (std::size_t o = 0; o < L.out; ++o) {
            double z = P.bias[o];
            for (std::size_t i = 0; i < L.in; ++i) z += P.weight[o * L.in + i] * x[i];
            y[o] = activate(L.activation, z);
          }
          s = {L.out, 1, 1};
          break;
        }
        case LayerKind::conv2d: {
          const std::size_t oh = (s.height + 2 * L.padding - L.kernel_h) / L.stride + 1;
          const std::size_t ow = (s.width + 2 * L.padding - L.kernel_w) / L.stride + 1;
          y.assign(L.out * oh * ow, 0.0);
          for (std::size_t co = 0; co < L.out; ++co) {
            for (std::size_t i = 0; i < oh; ++i) {
              for (std::size_t j = 0; j < ow; ++j) {
                double z = P.bias[co];
                for (std::size_t ci = 0; ci < L.in; ++ci) {
                  for (std::size_t p = 0; p < L.kernel_h; ++p) {
                    for (std::size_t q = 0; q < L.kernel_w; ++q) {
                      const long r = static_cast<long>(i * L.stride + p) - static_cast<long>(L.padding);
                      const long c = static_cast<long>(j * L.stride + q) - static_cast<long>(L.padding);
                      if (r < 0 || c < 0 || r >= static_cast<long>(s.height) || c >= static_cast<long>(s.width)) continue;
                      const double w = P.weight[((co * L.in + ci) * L.kernel_h + p) * L.kernel_w + q];
                      z += w * x[(ci * s.height + r) * s.width + c];
                    }
                  }
                }
                y[(co * oh + i) * ow + j] = activate(L.activation, z);
              }
            }
          }
          s = {L.out, oh, ow};
          break;
        }
        case LayerKind::gnn_mp: {
          const std::size_t n = s.spatial();
          // Aggregate first (A_hat H), then mix channels.
          std::vector<double> agg(L.in * n, 0.0);
          for (std::size_t d = 0; d < L.in; ++d) {
            for (std::size_t v = 0; v < n; ++v) {
              double a = 0.0;
              for (std::size_t u = 0; u < n; ++u) a += dense_adj[v][u] * x[d * n + u];
              agg[d * n + v] = a;
            }
          }
          y.assign(L.out * n, 0.0);
          for (std::size_t o = 0; o < L.out; ++o) {
            for (std::size_t v = 0; v < n; ++v) {
              double z = P.bias[o];
              for (std::size_t d = 0; d < L.in; ++d) z += agg[d * n + v] * P.weight[o * L.in + d];
              y[o * n + v] = activate(L.activation, z);
            }
          }
          s = {L.out, s.height, s.width};
          break;
        }
        case LayerKind::readout_mean: {
          const std::size_t n = s.spatial();
          y.assign(s.channels, 0.0);
          for (std::size_t d = 0; d < s.channels; ++d) {
            double sum = 0.0;
            for (std::size_t v = 0; v < n; ++v) sum += x[d * n + v];
            y[d] = sum / static_cast<double>(n);
          }
          s = {s.channels, 1, 1};
          break;
        }
        case LayerKind::flatten:
          y = x;
          s = {s.size(), 1, 1};
          break;
      }
      x = std::move(y);
    }
    if (b == 0) out = Matrix(batch.rows, x.size());
    std::copy(x.begin(), x.end(), out.row(b).begin());
  }
  return out;
}

// Number of in-bounds taps along one axis, summed over output positions.
inline std::size_t valid_taps(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
  const std::size_t out = conv_output_extent(in, kernel, stride, pad);
  std::size_t taps = 0;
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t k = 0; k < kernel; ++k) {
      const long p = static_cast<long>(o * stride + k) - static_cast<long>(pad);
      if (p >= 0 && p < static_cast<long>(in)) ++taps;
    }
  }
  return taps;
}

// Edge count predicted by per-family formulas: d_in*d_out for dense,
// C_in*C_out*taps_h*taps_w for convolution, |A_hat|*d_in*d_out for message
// passing and N*d for the mean readout.
inline std::size_t predicted_edges(const ModelSpec& spec) {
  std::size_t edges = 0;
  Shape s = spec.input_shape;
  for (const auto& L : spec.layers) {
    switch (L.kind) {
      case LayerKind::dense:
        edges += L.in * L.out;
        s = {L.out, 1, 1};
        break;
      case LayerKind::conv2d:
        edges += L.in * L.out * valid_taps(s.height, L.kernel_h, L.stride, L.padding) *
                 valid_taps(s.width, L.kernel_w, L.stride, L.padding);
        s = {L.out, conv_output_extent(s.height, L.kernel_h, L.stride, L.padding),
             conv_output_extent(s.width, L.kernel_w, L.stride, L.padding)};
        break;
      case LayerKind::gnn_mp:
        edges += spec.graph->entries.size() * L.in * L.out;
        s = {L.out, s.height, s.width};
        break;
      case LayerKind::readout_mean:
        edges += s.size();
        s = {s.channels, 1, 1};
        break;
      case LayerKind::flatten:
        s = {s.size(), 1, 1};
        break;
    }
  }
  return edges;
}

inline std::size_t predicted_nodes(const ModelSpec& spec) {
  std::size_t nodes = spec.input_shape.size();
  for (const auto& s : layer_output_shapes(spec)) nodes += s.size();
  // flatten re-labels its input without new neurons
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    if (spec.layers[l].kind == LayerKind::flatten) nodes -= layer_output_shapes(spec)[l].size();
  }
  return nodes;
}

inline ThetaParams random_theta(Rng& rng, std::size_t k_edge, std::size_t k_bias) {
  ThetaParams t = init_identityish(k_edge, k_bias);
  for (auto& v : t.edge_scale) v = rng.uniform(0.5, 1.5);
  for (auto& v : t.edge_shift) v = rng.uniform(-0.3, 0.3);
  for (auto& v : t.bias_scale) v = rng.uniform(0.5, 1.5);
  for (auto& v : t.bias_shift) v = rng.uniform(-0.3, 0.3);
  t.edge_act_scale = rng.uniform(0.8, 2.0);
  t.bias_act_scale = rng.uniform(0.8, 2.0);
  return t;
}

// Total alpha-weighted loss of a unified forward pass.
struct LossProblem {
  const Engine* engine = nullptr;
  std::vector<Matrix> batches;
  std::vector<std::vector<int>> labels;
  std::vector<double> alpha;

  std::vector<ModelInput> inputs() const {
    std::vector<ModelInput> in;
    for (const auto& b : batches) in.push_back({b.rows, b.data});
    return in;
  }

  double loss(const ThetaParams& theta, std::vector<Matrix>* grads = nullptr, ActivationState* keep = nullptr) const {
    const auto in = inputs();
    ActivationState st = engine->forward(theta, in);
    std::vector<Matrix> logits;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < batches.size(); ++i) {
      logits.push_back(st.logits(i));
      ids.push_back(engine->graph().blocks[i].model_id);
    }
    const double total = cross_entropy(ids, logits, labels, alpha, grads).total;
    if (keep) *keep = std::move(st);
    return total;
  }

  std::vector<double> analytic(const ThetaParams& theta) const {
    std::vector<Matrix> grads;
    ActivationState st;
    loss(theta, &grads, &st);
    return engine->backward(theta, st, grads).pack();
  }

  double central_difference(const ThetaParams& theta, std::size_t component, double h) const {
    auto flat = theta.pack();
    ThetaParams plus = theta, minus = theta;
    flat[component] += h;
    plus.unpack(flat);
    flat[component] -= 2 * h;
    minus.unpack(flat);
    return (loss(plus) - loss(minus)) / (2 * h);
  }
};

inline double relative_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace ugnn::testing
