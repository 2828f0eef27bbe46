#pragma once

// Layer-based model descriptions with raw parameters, plus the exact dense
// forward/backward pass that graph emulation is checked against.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ugnn {

// Row-major dense matrix. Batches are stored one sample per row.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
};

enum class Activation : std::uint8_t { identity = 0, relu = 1, tanh = 2, sigmoid = 3 };

double activate(Activation act, double z);
// Derivative expressed through the activation output y = act(z).
double activation_slope(Activation act, double y);
std::string_view to_string(Activation act);
Activation activation_from_string(std::string_view name);

enum class LayerKind : std::uint8_t { dense, conv2d, gnn_mp, readout_mean, flatten };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view name);

// Activation tensors use a channel-major layout (c, i, j). A vector is
// (d, 1, 1). Graph features over N nodes are (d, H, W) with H*W = N and
// node v = i*W + j.
struct Shape {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;

  std::size_t size() const { return channels * height * width; }
  std::size_t spatial() const { return height * width; }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  // dense, gnn_mp: feature widths. conv2d: channel counts. readout_mean: in = out.
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Activation activation = Activation::identity;

  static LayerSpec dense(std::size_t in, std::size_t out, Activation act);
  static LayerSpec conv2d(std::size_t c_in, std::size_t c_out, std::size_t kernel, std::size_t stride,
                          std::size_t padding, Activation act);
  static LayerSpec gnn(std::size_t in, std::size_t out, Activation act);
  static LayerSpec readout(std::size_t channels);
  static LayerSpec flatten();

  bool has_params() const { return kind == LayerKind::dense || kind == LayerKind::conv2d || kind == LayerKind::gnn_mp; }
  std::size_t weight_count() const;
  std::size_t bias_count() const;
};

struct AdjacencyEntry {
  std::size_t src = 0;  // message sender u
  std::size_t dst = 0;  // receiver v
  double coeff = 0.0;   // Â[v][u]
};

enum class AdjacencyNorm : std::uint8_t { mean, symmetric };

struct FixedGraph {
  std::size_t num_nodes = 0;
  std::vector<AdjacencyEntry> entries;
};

// 4-neighbourhood grid with self loops, normalized per `norm`.
FixedGraph grid_graph(std::size_t height, std::size_t width, AdjacencyNorm norm = AdjacencyNorm::mean);

struct LayerParams {
  std::vector<double> weight;  // dense/gnn: out x in; conv: out x in x kh x kw
  std::vector<double> bias;
};

struct ModelSpec {
  std::string model_id;
  Shape input_shape;
  std::vector<LayerSpec> layers;
  std::vector<LayerParams> params;  // one entry per layer; empty for parameter-free layers
  std::optional<FixedGraph> graph;  // required iff a gnn_mp layer is present

  std::size_t input_size() const { return input_shape.size(); }
  std::size_t parameter_count() const;
};

// Output shape of each layer; throws ConfigError naming the first offending
// layer when shapes or parameter sizes are inconsistent.
std::vector<Shape> layer_output_shapes(const ModelSpec& spec);
void validate(const ModelSpec& spec, bool require_params = true);

std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding);

// Weights ~ U(-1/sqrt(fan_in), +1/sqrt(fan_in)), biases zero.
ModelSpec init_params(ModelSpec spec, std::uint64_t seed);

struct UnitCounts {
  std::size_t nodes = 0;
  std::size_t edges = 0;
  friend bool operator==(const UnitCounts&, const UnitCounts&) = default;
};

UnitCounts count_units(const ModelSpec& spec);

// Exact layer-by-layer evaluation; batch is B x input_size.
Matrix dense_forward(const ModelSpec& spec, const Matrix& batch);

// Per-layer activations kept for backpropagation. acts[0] is the input,
// acts[l + 1] the output of layers[l].
struct ForwardCache {
  std::vector<Matrix> acts;
  const Matrix& logits() const { return acts.back(); }
};

ForwardCache dense_forward_cached(const ModelSpec& spec, const Matrix& batch);

// Gradients of a scalar loss w.r.t. every W, b, given dL/dlogits.
std::vector<LayerParams> dense_backward(const ModelSpec& spec, const ForwardCache& cache, const Matrix& logit_grad);

// Flat views used by the optimizer and by checksums (layer-major, weights then bias).
std::vector<double> flatten_params(const ModelSpec& spec);
void unflatten_params(ModelSpec& spec, std::span<const double> flat);
std::vector<double> flatten_grads(const std::vector<LayerParams>& grads);

// FNV-1a over the parameter bytes.
std::uint64_t params_checksum(const ModelSpec& spec);

}  // namespace ugnn
