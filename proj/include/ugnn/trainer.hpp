#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "ugnn/engine.hpp"
#include "ugnn/model_ir.hpp"
#include "ugnn/rng.hpp"
#include "ugnn/theta.hpp"

namespace ugnn {

enum class Schedule : std::uint8_t { constant, cosine };
enum class TrainMode : std::uint8_t { unified, individual };

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Schedule schedule = Schedule::cosine;
  double min_lr_ratio = 0.1;  // cosine floor as a fraction of learning_rate
  std::vector<double> alpha;  // empty means uniform 1/m
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::unified;
  unsigned threads = 1;

  void validate() const;
  std::vector<double> resolved_alpha(std::size_t models) const;
};

// Learning rate used during `epoch` (0-based); cosine decays from
// learning_rate to min_lr_ratio * learning_rate over the run.
double scheduled_lr(const TrainConfig& cfg, std::size_t epoch);

// Adam with decoupled weight decay on one flat parameter vector.
class AdamW {
 public:
  AdamW(std::size_t size, double beta1, double beta2, double eps, double weight_decay);
  explicit AdamW(std::size_t size, const TrainConfig& cfg)
      : AdamW(size, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay) {}

  void step(std::span<double> params, std::span<const double> grads, double lr);
  std::size_t steps() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

struct LabeledSet {
  Matrix inputs;  // one flattened sample per row
  std::vector<int> labels;
  std::size_t num_classes = 0;

  std::size_t size() const { return labels.size(); }
  LabeledSet subset(std::span<const std::size_t> rows) const;
};

// Cycles through a cluster in per-epoch reshuffled order.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::uint64_t seed);
  std::vector<std::size_t> next(std::size_t batch);

 private:
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double total_loss = 0.0;
  std::vector<double> model_loss;
  std::vector<double> model_train_acc;
  double wall_ms = 0.0;
};

struct TrainTrace {
  std::vector<std::string> model_ids;
  std::vector<EpochRecord> epochs;

  // epoch,total_loss,model_id,model_loss,model_train_acc,wall_ms
  void write_csv(std::ostream& out) const;
};

struct UnifiedResult {
  ThetaParams theta;
  TrainTrace trace;
};

// Joint training of theta; model i draws batches only from clusters[i].
UnifiedResult train_unified(const UnifiedGraph& u, ThetaParams theta, std::span<const LabeledSet> clusters,
                            const TrainConfig& cfg);

struct IndividualResult {
  ModelSpec model;
  TrainTrace trace;
};

// Backprop on the model's own W and b. `stream` selects the batch-order
// stream so model i sees the same batch sequence as in the unified run.
IndividualResult train_individual(ModelSpec spec, const LabeledSet& data, const TrainConfig& cfg, std::size_t stream = 0);

using ForwardFn = std::function<Matrix(const Matrix& batch)>;

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  std::size_t correct = 0;
  std::size_t count = 0;
};

EvalResult evaluate(const ForwardFn& forward, const LabeledSet& data, std::size_t batch = 256);

ForwardFn dense_model_fn(const ModelSpec& spec);
// `engine` and `theta` must outlive the returned function.
ForwardFn unified_model_fn(const Engine& engine, const ThetaParams& theta, std::size_t model);

}  // namespace ugnn
