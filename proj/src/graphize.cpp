#include "ugnn/graphize.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "ugnn/binary_io.hpp"
#include "ugnn/errors.hpp"

namespace ugnn {

IndexMap::IndexMap(std::vector<Shape> layer_shapes) : shapes_(std::move(layer_shapes)) {
  offsets_.reserve(shapes_.size() + 1);
  for (const auto& s : shapes_) offsets_.push_back(offsets_.back() + s.size());
}

std::size_t IndexMap::index(std::size_t layer, std::size_t c, std::size_t i, std::size_t j) const {
  const Shape& s = shapes_.at(layer);
  if (c >= s.channels || i >= s.height || j >= s.width) throw ConfigError("IndexMap: coordinate out of range");
  return offsets_[layer] + (c * s.height + i) * s.width + j;
}

IndexMap::Coord IndexMap::coord(std::size_t node) const {
  if (node >= node_count()) throw ConfigError("IndexMap: node index out of range");
  const auto it = std::upper_bound(offsets_.begin(), offsets_.end(), node);
  const std::size_t layer = static_cast<std::size_t>(it - offsets_.begin()) - 1;
  const Shape& s = shapes_[layer];
  std::size_t local = node - offsets_[layer];
  Coord c;
  c.layer = layer;
  c.j = local % s.width;
  local /= s.width;
  c.i = local % s.height;
  c.c = local / s.height;
  return c;
}

namespace {

enum class Family { mlp, cnn, gnn };

void check_family(const ModelSpec& spec, Family family) {
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerKind k = spec.layers[l].kind;
    bool allowed = false;
    switch (family) {
      case Family::mlp: allowed = k == LayerKind::dense; break;
      case Family::cnn: allowed = k == LayerKind::dense || k == LayerKind::conv2d || k == LayerKind::flatten; break;
      case Family::gnn: allowed = k == LayerKind::dense || k == LayerKind::gnn_mp || k == LayerKind::readout_mean || k == LayerKind::flatten; break;
    }
    if (!allowed) {
      static constexpr const char* names[] = {"MLP", "CNN", "GNN"};
      throw UnsupportedArchitecture("model '" + spec.model_id + "' layer " + std::to_string(l) + ": " +
                                    std::string(to_string(k)) + " is not supported by the " +
                                    names[static_cast<int>(family)] + " encoder");
    }
  }
}

ModelGraph encode(const ModelSpec& spec) {
  validate(spec);
  const auto out_shapes = layer_output_shapes(spec);

  ModelGraph g;
  g.model_id = spec.model_id;
  g.layer_shapes.push_back(spec.input_shape);
  std::vector<std::size_t> node_layer_of;  // model layer index -> graph layer holding its output
  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    if (spec.layers[l].kind != LayerKind::flatten) g.layer_shapes.push_back(out_shapes[l]);
    node_layer_of.push_back(g.layer_shapes.size() - 1);
  }
  const IndexMap map(g.layer_shapes);
  for (std::size_t L = 0; L < map.layer_count(); ++L) g.layers.push_back(map.range(L));

  g.nodes.resize(map.node_count());
  for (std::size_t L = 0; L < map.layer_count(); ++L) {
    const NodeRange r = g.layers[L];
    for (std::size_t v = r.begin; v < r.end; ++v) {
      g.nodes[v].layer = static_cast<std::uint32_t>(L);
      g.nodes[v].role = L == 0 ? NodeRole::input : (L + 1 == map.layer_count() ? NodeRole::output : NodeRole::hidden);
    }
  }

  // Incoming adjacency per graph vertex, for gnn layers.
  std::vector<std::vector<std::pair<std::size_t, double>>> incoming;
  if (spec.graph) {
    incoming.resize(spec.graph->num_nodes);
    for (const auto& e : spec.graph->entries) incoming[e.dst].emplace_back(e.src, e.coeff);
    for (auto& list : incoming) {
      std::stable_sort(list.begin(), list.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    }
  }

  for (std::size_t l = 0; l < spec.layers.size(); ++l) {
    const LayerSpec& layer = spec.layers[l];
    if (layer.kind == LayerKind::flatten) continue;
    const std::size_t dst_layer = node_layer_of[l];
    const std::size_t src_layer = dst_layer - 1;
    const NodeRange src = g.layers[src_layer];
    const NodeRange dst = g.layers[dst_layer];
    const Shape& in_shape = g.layer_shapes[src_layer];
    const Shape& out_shape = g.layer_shapes[dst_layer];
    const LayerParams* p = layer.has_params() ? &spec.params[l] : nullptr;

    for (std::size_t v = dst.begin; v < dst.end; ++v) {
      g.nodes[v].activation = layer.activation;
      const std::size_t local = v - dst.begin;
      const std::size_t channel = local / out_shape.spatial();
      g.nodes[v].bias = p ? p->bias[channel] : 0.0;
    }

    switch (layer.kind) {
      case LayerKind::dense:
        for (std::size_t o = 0; o < layer.out; ++o) {
          for (std::size_t i = 0; i < layer.in; ++i) {
            g.edges.push_back({src.begin + i, dst.begin + o, p->weight[o * layer.in + i], 1.0});
          }
        }
        break;
      case LayerKind::conv2d:
        for (std::size_t co = 0; co < layer.out; ++co) {
          for (std::size_t oi = 0; oi < out_shape.height; ++oi) {
            for (std::size_t oj = 0; oj < out_shape.width; ++oj) {
              const std::size_t v = map.index(dst_layer, co, oi, oj);
              for (std::size_t ci = 0; ci < layer.in; ++ci) {
                for (std::size_t ki = 0; ki < layer.kernel_h; ++ki) {
                  const long long ii = static_cast<long long>(oi * layer.stride + ki) - static_cast<long long>(layer.padding);
                  if (ii < 0 || ii >= static_cast<long long>(in_shape.height)) continue;
                  for (std::size_t kj = 0; kj < layer.kernel_w; ++kj) {
                    const long long jj = static_cast<long long>(oj * layer.stride + kj) - static_cast<long long>(layer.padding);
                    if (jj < 0 || jj >= static_cast<long long>(in_shape.width)) continue;
                    const std::size_t u = map.index(src_layer, ci, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj));
                    const double w = p->weight[((co * layer.in + ci) * layer.kernel_h + ki) * layer.kernel_w + kj];
                    g.edges.push_back({u, v, w, 1.0});
                  }
                }
              }
            }
          }
        }
        break;
      case LayerKind::gnn_mp: {
        const std::size_t n = spec.graph->num_nodes;
        for (std::size_t co = 0; co < layer.out; ++co) {
          for (std::size_t vtx = 0; vtx < n; ++vtx) {
            const std::size_t v = dst.begin + co * n + vtx;
            for (std::size_t ci = 0; ci < layer.in; ++ci) {
              for (const auto& [utx, a] : incoming[vtx]) {
                g.edges.push_back({src.begin + ci * n + utx, v, p->weight[co * layer.in + ci], a});
              }
            }
          }
        }
        break;
      }
      case LayerKind::readout_mean: {
        const std::size_t n = in_shape.spatial();
        const double inv = 1.0 / static_cast<double>(n);
        for (std::size_t d = 0; d < layer.in; ++d) {
          for (std::size_t vtx = 0; vtx < n; ++vtx) g.edges.push_back({src.begin + d * n + vtx, dst.begin + d, 1.0, inv});
        }
        break;
      }
      case LayerKind::flatten:
        break;
    }
  }
  return g;
}

}  // namespace

ModelGraph graphize_mlp(const ModelSpec& spec) {
  check_family(spec, Family::mlp);
  return encode(spec);
}

ModelGraph graphize_cnn(const ModelSpec& spec) {
  check_family(spec, Family::cnn);
  return encode(spec);
}

ModelGraph graphize_gnn(const ModelSpec& spec) {
  if (!spec.graph) throw ConfigError("model '" + spec.model_id + "': GNN encoding requires a fixed graph");
  check_family(spec, Family::gnn);
  return encode(spec);
}

ModelGraph graphize(const ModelSpec& spec) {
  const auto has = [&](LayerKind k) {
    return std::any_of(spec.layers.begin(), spec.layers.end(), [k](const LayerSpec& l) { return l.kind == k; });
  };
  if (has(LayerKind::gnn_mp) || has(LayerKind::readout_mean)) return graphize_gnn(spec);
  if (has(LayerKind::conv2d) || has(LayerKind::flatten)) return graphize_cnn(spec);
  return graphize_mlp(spec);
}

DagReport validate_dag(const ModelGraph& g) {
  const std::size_t n = g.nodes.size();
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto& edge = g.edges[e];
    const auto fail = [&](const std::string& why) {
      return DagReport{false, e, "edge " + std::to_string(e) + " (" + std::to_string(edge.src) + " -> " +
                                     std::to_string(edge.dst) + "): " + why};
    };
    if (edge.src >= n || edge.dst >= n) return fail("endpoint out of range");
    const auto ls = g.nodes[edge.src].layer;
    const auto ld = g.nodes[edge.dst].layer;
    if (ld == ls) return fail("connects two nodes of layer " + std::to_string(ls));
    if (ld < ls) return fail("points backward from layer " + std::to_string(ls) + " to layer " + std::to_string(ld));
    if (ld != ls + 1) return fail("skips from layer " + std::to_string(ls) + " to layer " + std::to_string(ld));
  }
  return {};
}

namespace {

constexpr const char* kGraphFormat = "ugnn-model-graph";

nlohmann::json shapes_json(const std::vector<Shape>& shapes) {
  auto arr = nlohmann::json::array();
  for (const auto& s : shapes) arr.push_back({s.channels, s.height, s.width});
  return arr;
}

std::vector<Shape> shapes_from_json(const nlohmann::json& arr) {
  std::vector<Shape> shapes;
  for (const auto& s : arr) shapes.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>()});
  return shapes;
}

}  // namespace

void write_model_graph(std::ostream& out, const ModelGraph& g) {
  nlohmann::json header;
  header["format"] = kGraphFormat;
  header["version"] = 1;
  header["model_id"] = g.model_id;
  header["nodes"] = g.nodes.size();
  header["edges"] = g.edges.size();
  auto layers = nlohmann::json::array();
  for (const auto& r : g.layers) layers.push_back({r.begin, r.end});
  header["layers"] = layers;
  header["shapes"] = shapes_json(g.layer_shapes);
  out << header.dump() << '\n';
  for (const auto& node : g.nodes) {
    io::write_le<std::uint32_t>(out, node.layer);
    io::write_le<double>(out, node.bias);
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(node.activation));
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(node.role));
  }
  for (const auto& e : g.edges) {
    io::write_le<std::uint64_t>(out, e.src);
    io::write_le<std::uint64_t>(out, e.dst);
    io::write_le<double>(out, e.weight);
    io::write_le<double>(out, e.coeff);
  }
}

ModelGraph read_model_graph(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("model graph: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
    if (header.at("format") != kGraphFormat) throw DataError("model graph: unexpected format tag");
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("model graph: bad header: ") + e.what());
  }
  ModelGraph g;
  g.model_id = header.at("model_id").get<std::string>();
  for (const auto& r : header.at("layers")) g.layers.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>()});
  g.layer_shapes = shapes_from_json(header.at("shapes"));
  const auto n = header.at("nodes").get<std::size_t>();
  const auto m = header.at("edges").get<std::size_t>();
  g.nodes.resize(n);
  for (auto& node : g.nodes) {
    node.layer = io::read_le<std::uint32_t>(in, "model graph node table");
    node.bias = io::read_le<double>(in, "model graph node table");
    const auto act = io::read_le<std::uint8_t>(in, "model graph node table");
    const auto role = io::read_le<std::uint8_t>(in, "model graph node table");
    if (act > 3 || role > 2) throw DataError("model graph: invalid activation or role code");
    node.activation = static_cast<Activation>(act);
    node.role = static_cast<NodeRole>(role);
  }
  g.edges.resize(m);
  for (auto& e : g.edges) {
    e.src = io::read_le<std::uint64_t>(in, "model graph edge table");
    e.dst = io::read_le<std::uint64_t>(in, "model graph edge table");
    e.weight = io::read_le<double>(in, "model graph edge table");
    e.coeff = io::read_le<double>(in, "model graph edge table");
  }
  return g;
}

}  // namespace ugnn
