#pragma once

// Layer-by-layer message passing over a unified graph, per-model
// cross-entropy, and the reverse pass that produces gradients for theta.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ugnn/model_ir.hpp"
#include "ugnn/theta.hpp"
#include "ugnn/unified.hpp"

namespace ugnn {

enum class EmulationMode : std::uint8_t {
  transformed,  // features pass through the theta transforms
  raw,          // stored features used as-is; exists for oracle checks only
};

// Batch for one model: `batch` rows of input_size values, row-major.
// batch == 0 marks the model inactive for this pass.
struct ModelInput {
  std::size_t batch = 0;
  std::span<const double> values;
};

class Engine;

// Node activations of one forward pass. Each model owns a node-major slab
// (local node, sample), so a node's batch row is contiguous.
class ActivationState {
 public:
  EmulationMode mode() const { return mode_; }
  std::size_t batch(std::size_t model) const { return batch_[model]; }
  // B x C logits of `model`.
  Matrix logits(std::size_t model) const;
  std::span<const double> node_row(std::size_t node) const;
  std::span<const double> updated_edges() const { return edge_upd_; }
  std::span<const double> updated_biases() const { return bias_upd_; }

 private:
  friend class Engine;
  const Engine* engine_ = nullptr;
  EmulationMode mode_ = EmulationMode::transformed;
  std::uint64_t theta_fingerprint_ = 0;
  std::vector<std::size_t> batch_;
  std::vector<std::size_t> slab_;  // start of each model's slab in act_
  std::vector<double> act_;
  std::vector<double> edge_pre_, edge_upd_;
  std::vector<double> bias_pre_, bias_upd_;
};

struct ModelLoss {
  std::string model_id;
  double loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

struct LossReport {
  std::vector<ModelLoss> per_model;
  std::vector<double> alpha;
  double total = 0.0;
};

// Checks alpha_i >= 0 and sum alpha_i = 1 (within 1e-9).
void validate_alpha(std::span<const double> alpha, std::size_t models);

// Mean softmax cross-entropy per model and the alpha-weighted total. Models
// with an empty logit matrix are skipped. When `logit_grads` is given it
// receives dTotal/dlogits per model.
LossReport cross_entropy(std::span<const std::string> model_ids, std::span<const Matrix> logits,
                         std::span<const std::vector<int>> labels, std::span<const double> alpha,
                         std::vector<Matrix>* logit_grads = nullptr);

// Argmax with ties broken toward the smaller class index.
std::size_t argmax(std::span<const double> row);

class Engine {
 public:
  // `u` must outlive the engine. `threads` > 1 runs model blocks concurrently.
  explicit Engine(const UnifiedGraph& u, unsigned threads = 1);

  const UnifiedGraph& graph() const { return u_; }
  std::size_t max_depth() const { return max_depth_; }

  ActivationState forward(const ThetaParams& theta, std::span<const ModelInput> inputs) const;
  ActivationState forward_raw(std::span<const ModelInput> inputs) const;

  // Reverse pass for `state`, seeded with dLoss/dlogits per model (empty
  // matrices for inactive models). Rejects raw-mode states and states whose
  // theta differs from `theta`.
  ThetaGrads backward(const ThetaParams& theta, const ActivationState& state, std::span<const Matrix> logit_grads) const;

 private:
  ActivationState run(EmulationMode mode, const ThetaParams* theta, std::span<const ModelInput> inputs) const;
  template <typename Fn>
  void for_each_model(const std::vector<std::size_t>& batch, Fn&& fn) const;

  const UnifiedGraph& u_;
  unsigned threads_;
  std::size_t max_depth_ = 0;
  std::vector<std::size_t> in_ptr_;  // CSR over destination nodes
  std::vector<std::size_t> in_edge_;
};

std::uint64_t fingerprint(const ThetaParams& theta);

}  // namespace ugnn
