#include "ugnn/unified.hpp"

#include <algorithm>
#include <istream>
#include <ostream>

#include <nlohmann/json.hpp>

#include "ugnn/binary_io.hpp"
#include "ugnn/errors.hpp"
#include "ugnn/rng.hpp"

namespace ugnn {

std::size_t UnifiedGraph::model_of_node(std::size_t node) const {
  const auto it = std::upper_bound(blocks.begin(), blocks.end(), node,
                                   [](std::size_t n, const ModelBlock& b) { return n < b.node_offset; });
  if (it == blocks.begin() || node >= total_nodes()) throw ConfigError("node index out of range");
  return static_cast<std::size_t>(it - blocks.begin()) - 1;
}

UnifiedGraph disjoint_union(std::span<const ModelGraph> graphs) {
  if (graphs.empty()) throw ConfigError("unified graph: need at least one model-graph");
  UnifiedGraph u;
  for (const auto& g : graphs) {
    const DagReport dag = validate_dag(g);
    if (!dag.ok) throw ConfigError("unified graph: model '" + g.model_id + "' is not a layered DAG: " + dag.message);
    ModelBlock b;
    b.model_id = g.model_id;
    b.node_offset = u.nodes.size();
    b.node_count = g.nodes.size();
    b.edge_offset = u.edges.size();
    b.edge_count = g.edges.size();
    b.layers = g.layers;
    b.layer_shapes = g.layer_shapes;
    u.nodes.insert(u.nodes.end(), g.nodes.begin(), g.nodes.end());
    for (GraphEdge e : g.edges) {
      e.src += b.node_offset;
      e.dst += b.node_offset;
      u.edges.push_back(e);
    }
    u.blocks.push_back(std::move(b));
  }
  return u;
}

ModelGraph extract_model(const UnifiedGraph& u, std::size_t i) {
  const ModelBlock& b = u.blocks.at(i);
  ModelGraph g;
  g.model_id = b.model_id;
  g.layers = b.layers;
  g.layer_shapes = b.layer_shapes;
  g.nodes.assign(u.nodes.begin() + static_cast<std::ptrdiff_t>(b.node_offset),
                 u.nodes.begin() + static_cast<std::ptrdiff_t>(b.node_offset + b.node_count));
  g.edges.reserve(b.edge_count);
  for (std::size_t e = b.edge_offset; e < b.edge_offset + b.edge_count; ++e) {
    GraphEdge edge = u.edges[e];
    edge.src -= b.node_offset;
    edge.dst -= b.node_offset;
    g.edges.push_back(edge);
  }
  return g;
}

namespace {

std::vector<std::uint32_t> partition(std::size_t count, std::size_t k, Rng& rng) {
  std::vector<std::uint32_t> group(count);
  if (k == count) {
    for (std::size_t i = 0; i < count; ++i) group[i] = static_cast<std::uint32_t>(i);
    return group;
  }
  // One element per group first, the remainder uniformly.
  const auto order = rng.permutation(count);
  for (std::size_t r = 0; r < count; ++r) {
    group[order[r]] = static_cast<std::uint32_t>(r < k ? r : rng.below(k));
  }
  return group;
}

}  // namespace

UnifiedGraph assign_groups(UnifiedGraph u, std::size_t k_edge, std::size_t k_bias, std::uint64_t seed) {
  if (k_edge < 1 || k_edge > u.total_edges()) {
    throw ConfigError("k_edge = " + std::to_string(k_edge) + " outside [1, " + std::to_string(u.total_edges()) + "]");
  }
  if (k_bias < 1 || k_bias > u.total_nodes()) {
    throw ConfigError("k_bias = " + std::to_string(k_bias) + " outside [1, " + std::to_string(u.total_nodes()) + "]");
  }
  Rng edge_rng(derive_seed(seed, 0));
  Rng bias_rng(derive_seed(seed, 1));
  u.edge_group = partition(u.total_edges(), k_edge, edge_rng);
  u.bias_group = partition(u.total_nodes(), k_bias, bias_rng);
  u.k_edge = k_edge;
  u.k_bias = k_bias;
  return u;
}

BlockDiagonalReport check_block_diagonal(const UnifiedGraph& u) {
  for (std::size_t m = 0; m < u.blocks.size(); ++m) {
    const ModelBlock& b = u.blocks[m];
    const std::size_t lo = b.node_offset, hi = b.node_offset + b.node_count;
    if (m > 0) {
      const ModelBlock& prev = u.blocks[m - 1];
      if (b.node_offset != prev.node_offset + prev.node_count || b.edge_offset != prev.edge_offset + prev.edge_count) {
        return {false, "model '" + b.model_id + "' offsets overlap or leave a gap"};
      }
    }
    for (std::size_t e = b.edge_offset; e < b.edge_offset + b.edge_count; ++e) {
      const auto& edge = u.edges[e];
      if (edge.src < lo || edge.src >= hi || edge.dst < lo || edge.dst >= hi) {
        return {false, "edge " + std::to_string(e) + " leaves model '" + b.model_id + "'"};
      }
    }
  }
  const auto& last = u.blocks.back();
  if (last.node_offset + last.node_count != u.total_nodes() || last.edge_offset + last.edge_count != u.total_edges()) {
    return {false, "block table does not cover all nodes and edges"};
  }
  return {};
}

namespace {

constexpr const char* kUnifiedFormat = "ugnn-unified-graph";

}  // namespace

void write_unified_graph(std::ostream& out, const UnifiedGraph& u) {
  nlohmann::json header;
  header["format"] = kUnifiedFormat;
  header["version"] = 1;
  header["nodes"] = u.total_nodes();
  header["edges"] = u.total_edges();
  header["k_edge"] = u.k_edge;
  header["k_bias"] = u.k_bias;
  auto blocks = nlohmann::json::array();
  for (const auto& b : u.blocks) {
    nlohmann::json jb;
    jb["model_id"] = b.model_id;
    auto layers = nlohmann::json::array();
    for (const auto& r : b.layers) layers.push_back({r.begin, r.end});
    jb["layers"] = layers;
    auto shapes = nlohmann::json::array();
    for (const auto& s : b.layer_shapes) shapes.push_back({s.channels, s.height, s.width});
    jb["shapes"] = shapes;
    blocks.push_back(jb);
  }
  header["blocks"] = blocks;
  out << header.dump() << '\n';
  for (const auto& b : u.blocks) {
    io::write_le<std::uint64_t>(out, b.node_offset);
    io::write_le<std::uint64_t>(out, b.node_count);
    io::write_le<std::uint64_t>(out, b.edge_offset);
    io::write_le<std::uint64_t>(out, b.edge_count);
  }
  for (const auto& node : u.nodes) {
    io::write_le<std::uint32_t>(out, node.layer);
    io::write_le<double>(out, node.bias);
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(node.activation));
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(node.role));
  }
  for (const auto& e : u.edges) {
    io::write_le<std::uint64_t>(out, e.src);
    io::write_le<std::uint64_t>(out, e.dst);
    io::write_le<double>(out, e.weight);
    io::write_le<double>(out, e.coeff);
  }
  if (u.grouped()) {
    for (auto g : u.edge_group) io::write_le<std::uint32_t>(out, g);
    for (auto g : u.bias_group) io::write_le<std::uint32_t>(out, g);
  }
}

UnifiedGraph read_unified_graph(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("unified graph: missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("unified graph: bad header: ") + e.what());
  }
  if (header.value("format", "") != kUnifiedFormat) throw DataError("unified graph: unexpected format tag");
  UnifiedGraph u;
  const auto n = header.at("nodes").get<std::size_t>();
  const auto m = header.at("edges").get<std::size_t>();
  u.k_edge = header.at("k_edge").get<std::size_t>();
  u.k_bias = header.at("k_bias").get<std::size_t>();
  for (const auto& jb : header.at("blocks")) {
    ModelBlock b;
    b.model_id = jb.at("model_id").get<std::string>();
    for (const auto& r : jb.at("layers")) b.layers.push_back({r.at(0).get<std::size_t>(), r.at(1).get<std::size_t>()});
    for (const auto& s : jb.at("shapes")) {
      b.layer_shapes.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>()});
    }
    u.blocks.push_back(std::move(b));
  }
  for (auto& b : u.blocks) {
    b.node_offset = io::read_le<std::uint64_t>(in, "unified graph offsets");
    b.node_count = io::read_le<std::uint64_t>(in, "unified graph offsets");
    b.edge_offset = io::read_le<std::uint64_t>(in, "unified graph offsets");
    b.edge_count = io::read_le<std::uint64_t>(in, "unified graph offsets");
  }
  u.nodes.resize(n);
  for (auto& node : u.nodes) {
    node.layer = io::read_le<std::uint32_t>(in, "unified graph node table");
    node.bias = io::read_le<double>(in, "unified graph node table");
    const auto act = io::read_le<std::uint8_t>(in, "unified graph node table");
    const auto role = io::read_le<std::uint8_t>(in, "unified graph node table");
    if (act > 3 || role > 2) throw DataError("unified graph: invalid activation or role code");
    node.activation = static_cast<Activation>(act);
    node.role = static_cast<NodeRole>(role);
  }
  u.edges.resize(m);
  for (auto& e : u.edges) {
    e.src = io::read_le<std::uint64_t>(in, "unified graph edge table");
    e.dst = io::read_le<std::uint64_t>(in, "unified graph edge table");
    e.weight = io::read_le<double>(in, "unified graph edge table");
    e.coeff = io::read_le<double>(in, "unified graph edge table");
  }
  if (u.grouped()) {
    u.edge_group.resize(m);
    u.bias_group.resize(n);
    for (auto& g : u.edge_group) {
      g = io::read_le<std::uint32_t>(in, "unified graph edge groups");
      if (g >= u.k_edge) throw DataError("unified graph: edge group out of range");
    }
    for (auto& g : u.bias_group) {
      g = io::read_le<std::uint32_t>(in, "unified graph bias groups");
      if (g >= u.k_bias) throw DataError("unified graph: bias group out of range");
    }
  }
  const auto bd = check_block_diagonal(u);
  if (!bd.ok) throw DataError("unified graph: " + bd.message);
  return u;
}

}  // namespace ugnn
