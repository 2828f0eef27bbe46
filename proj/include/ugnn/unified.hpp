#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ugnn/graphize.hpp"

namespace ugnn {

// One model-graph's slice of the unified graph.
struct ModelBlock {
  std::string model_id;
  std::size_t node_offset = 0;
  std::size_t node_count = 0;
  std::size_t edge_offset = 0;
  std::size_t edge_count = 0;
  std::vector<NodeRange> layers;  // local node ranges
  std::vector<Shape> layer_shapes;

  NodeRange input_nodes() const { return {node_offset + layers.front().begin, node_offset + layers.front().end}; }
  NodeRange output_nodes() const { return {node_offset + layers.back().begin, node_offset + layers.back().end}; }
  std::size_t input_size() const { return layers.front().size(); }
  std::size_t output_size() const { return layers.back().size(); }
};

// Disjoint union of model-graphs. Node and edge tables use global indices;
// each model occupies a contiguous node range and a contiguous edge range.
struct UnifiedGraph {
  std::vector<ModelBlock> blocks;
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  std::vector<std::uint32_t> edge_group;  // empty until assign_groups
  std::vector<std::uint32_t> bias_group;
  std::size_t k_edge = 0;
  std::size_t k_bias = 0;

  std::size_t total_nodes() const { return nodes.size(); }
  std::size_t total_edges() const { return edges.size(); }
  std::size_t model_count() const { return blocks.size(); }
  bool grouped() const { return k_edge > 0 && k_bias > 0; }
  std::size_t model_of_node(std::size_t node) const;
};

UnifiedGraph disjoint_union(std::span<const ModelGraph> graphs);

// Recovers model `i` with local indices.
ModelGraph extract_model(const UnifiedGraph& u, std::size_t i);

// k == element count gives the identity assignment; otherwise a seeded
// random partition in which every group is non-empty.
UnifiedGraph assign_groups(UnifiedGraph u, std::size_t k_edge, std::size_t k_bias, std::uint64_t seed);

struct BlockDiagonalReport {
  bool ok = true;
  std::string message;
};
BlockDiagonalReport check_block_diagonal(const UnifiedGraph& u);

// Model-graph format plus offset table and u32 group arrays.
void write_unified_graph(std::ostream& out, const UnifiedGraph& u);
UnifiedGraph read_unified_graph(std::istream& in);

}  // namespace ugnn
