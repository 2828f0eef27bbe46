#pragma once

// Encodes a ModelSpec as a model-graph: one node per neuron (carrying its bias
// and activation id), one edge per connection (carrying its weight).

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ugnn/model_ir.hpp"

namespace ugnn {

enum class NodeRole : std::uint8_t { input = 0, hidden = 1, output = 2 };

struct GraphNode {
  std::uint32_t layer = 0;
  double bias = 0.0;
  Activation activation = Activation::identity;
  NodeRole role = NodeRole::hidden;
};

struct GraphEdge {
  std::uint64_t src = 0;
  std::uint64_t dst = 0;
  double weight = 0.0;
  double coeff = 1.0;  // fixed structural multiplier (Â entry, 1/N for readout)
};

struct NodeRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  friend bool operator==(const NodeRange&, const NodeRange&) = default;
};

// Bijection between (layer, c, i, j) and contiguous global node indices.
// Layer ranges are laid out in increasing layer order; within a layer the
// channel-major activation layout is kept, so for a GNN layer the node of
// input-graph vertex v and channel d is (d, v / W, v % W).
class IndexMap {
 public:
  struct Coord {
    std::size_t layer = 0;
    std::size_t c = 0;
    std::size_t i = 0;
    std::size_t j = 0;
    friend bool operator==(const Coord&, const Coord&) = default;
  };

  IndexMap() = default;
  explicit IndexMap(std::vector<Shape> layer_shapes);

  std::size_t index(std::size_t layer, std::size_t c, std::size_t i = 0, std::size_t j = 0) const;
  Coord coord(std::size_t node) const;
  NodeRange range(std::size_t layer) const { return {offsets_[layer], offsets_[layer + 1]}; }
  std::size_t layer_count() const { return shapes_.size(); }
  std::size_t node_count() const { return offsets_.back(); }
  const std::vector<Shape>& shapes() const { return shapes_; }

 private:
  std::vector<Shape> shapes_;
  std::vector<std::size_t> offsets_{0};
};

struct ModelGraph {
  std::string model_id;
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;  // grouped by destination, ascending
  std::vector<NodeRange> layers;
  std::vector<Shape> layer_shapes;

  std::size_t input_size() const { return layers.front().size(); }
  std::size_t output_size() const { return layers.back().size(); }
  IndexMap index_map() const { return IndexMap(layer_shapes); }
};

ModelGraph graphize_mlp(const ModelSpec& spec);
ModelGraph graphize_cnn(const ModelSpec& spec);
ModelGraph graphize_gnn(const ModelSpec& spec);
// Dispatches on the layer kinds present.
ModelGraph graphize(const ModelSpec& spec);

struct DagReport {
  bool ok = true;
  std::optional<std::size_t> edge;
  std::string message;
};

// Every edge must go from layer l-1 to layer l; that also makes the graph acyclic.
DagReport validate_dag(const ModelGraph& g);

// Text header line (JSON) followed by little-endian node and edge tables.
void write_model_graph(std::ostream& out, const ModelGraph& g);
ModelGraph read_model_graph(std::istream& in);

}  // namespace ugnn
