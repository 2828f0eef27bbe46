#include "ugnn/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numbers>
#include <ostream>

#include <fmt/format.h>

#include "ugnn/errors.hpp"
#include "ugnn/rng.hpp"

namespace ugnn {

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be finite and >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(min_lr_ratio >= 0.0 && min_lr_ratio <= 1.0)) throw ConfigError("min_lr_ratio must lie in [0, 1]");
}

std::vector<double> TrainConfig::resolved_alpha(std::size_t models) const {
  if (alpha.empty()) return std::vector<double>(models, 1.0 / static_cast<double>(models));
  validate_alpha(alpha, models);
  return alpha;
}

double scheduled_lr(const TrainConfig& cfg, std::size_t epoch) {
  if (cfg.schedule == Schedule::constant || cfg.epochs <= 1) return cfg.learning_rate;
  const double lo = cfg.min_lr_ratio * cfg.learning_rate;
  const double progress = static_cast<double>(epoch) / static_cast<double>(cfg.epochs - 1);
  return lo + 0.5 * (cfg.learning_rate - lo) * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(std::size_t size, double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay), m_(size, 0.0), v_(size, 0.0) {}

void AdamW::step(std::span<double> params, std::span<const double> grads, double lr) {
  if (params.size() != m_.size() || grads.size() != m_.size()) throw UsageError("AdamW: size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    params[k] -= lr * weight_decay_ * params[k];
    m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * grads[k];
    v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * grads[k] * grads[k];
    const double m_hat = m_[k] / c1;
    const double v_hat = v_[k] / c2;
    params[k] -= lr * m_hat / (std::sqrt(v_hat) + eps_);
  }
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> rows) const {
  LabeledSet out;
  out.num_classes = num_classes;
  out.inputs = Matrix(rows.size(), inputs.cols);
  out.labels.reserve(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto src = inputs.row(rows[r]);
    std::copy(src.begin(), src.end(), out.inputs.row(r).begin());
    out.labels.push_back(labels[rows[r]]);
  }
  return out;
}

BatchSampler::BatchSampler(std::size_t count, std::uint64_t seed) : rng_(seed) {
  if (count == 0) throw DataError("cannot sample batches from an empty cluster");
  order_ = rng_.permutation(count);
}

std::vector<std::size_t> BatchSampler::next(std::size_t batch) {
  batch = std::min(batch, order_.size());
  std::vector<std::size_t> out;
  out.reserve(batch);
  while (out.size() < batch) {
    if (cursor_ == order_.size()) {
      rng_.shuffle(std::span<std::size_t>(order_));
      cursor_ = 0;
    }
    out.push_back(order_[cursor_++]);
  }
  return out;
}

void TrainTrace::write_csv(std::ostream& out) const {
  out << "epoch,total_loss,model_id,model_loss,model_train_acc,wall_ms\n";
  for (const auto& r : epochs) {
    for (std::size_t i = 0; i < model_ids.size(); ++i) {
      out << fmt::format("{},{:.17g},{},{:.17g},{:.17g},{:.3f}\n", r.epoch, r.total_loss, model_ids[i], r.model_loss[i],
                         r.model_train_acc[i], r.wall_ms);
    }
  }
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

std::uint64_t stream_seed(std::uint64_t seed, std::size_t stream) { return derive_seed(seed, 1000 + stream); }

void require_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericError(where + ": loss became non-finite");
}

}  // namespace

UnifiedResult train_unified(const UnifiedGraph& u, ThetaParams theta, std::span<const LabeledSet> clusters,
                            const TrainConfig& cfg) {
  cfg.validate();
  const std::size_t m = u.model_count();
  if (clusters.size() != m) {
    throw ConfigError("train_unified: " + std::to_string(clusters.size()) + " clusters for " + std::to_string(m) +
                      " model-graphs");
  }
  check_compatible(u, theta);
  const auto alpha = cfg.resolved_alpha(m);
  std::vector<std::string> ids;
  std::size_t largest = 0;
  for (std::size_t i = 0; i < m; ++i) {
    ids.push_back(u.blocks[i].model_id);
    if (clusters[i].inputs.cols != u.blocks[i].input_size()) {
      throw ConfigError("train_unified: cluster " + std::to_string(i) + " has " + std::to_string(clusters[i].inputs.cols) +
                        " features but model '" + ids.back() + "' expects " + std::to_string(u.blocks[i].input_size()));
    }
    largest = std::max(largest, clusters[i].size());
  }

  const Engine engine(u, cfg.threads);
  std::vector<BatchSampler> samplers;
  for (std::size_t i = 0; i < m; ++i) samplers.emplace_back(clusters[i].size(), stream_seed(cfg.seed, i));
  AdamW opt(theta.size(), cfg);
  const std::size_t steps = (largest + cfg.batch_size - 1) / cfg.batch_size;

  UnifiedResult result;
  result.trace.model_ids = ids;
  std::vector<LabeledSet> batches(m);
  std::vector<Matrix> logits(m);
  std::vector<std::vector<int>> labels(m);
  std::vector<ModelInput> inputs(m);
  std::vector<Matrix> seeds;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const double lr = scheduled_lr(cfg, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.model_loss.assign(m, 0.0);
    rec.model_train_acc.assign(m, 0.0);
    std::vector<std::size_t> correct(m, 0), seen(m, 0);
    for (std::size_t step = 0; step < steps; ++step) {
      for (std::size_t i = 0; i < m; ++i) {
        const auto rows = samplers[i].next(cfg.batch_size);
        batches[i] = clusters[i].subset(rows);
        inputs[i] = {rows.size(), batches[i].inputs.data};
        labels[i] = batches[i].labels;
      }
      const ActivationState st = engine.forward(theta, inputs);
      for (std::size_t i = 0; i < m; ++i) logits[i] = st.logits(i);
      const LossReport rep = cross_entropy(ids, logits, labels, alpha, &seeds);
      require_finite(rep.total, "train_unified epoch " + std::to_string(epoch));
      rec.total_loss += rep.total;
      for (std::size_t i = 0; i < m; ++i) {
        rec.model_loss[i] += rep.per_model[i].loss;
        correct[i] += rep.per_model[i].correct;
        seen[i] += rep.per_model[i].count;
      }
      const ThetaGrads grads = engine.backward(theta, st, seeds);
      auto flat = theta.pack();
      opt.step(flat, grads.pack(), lr);
      theta.unpack(flat);
      project_act_scales(theta);
    }
    rec.total_loss /= static_cast<double>(steps);
    for (std::size_t i = 0; i < m; ++i) {
      rec.model_loss[i] /= static_cast<double>(steps);
      rec.model_train_acc[i] = static_cast<double>(correct[i]) / static_cast<double>(seen[i]);
    }
    rec.wall_ms = elapsed_ms(start);
    result.trace.epochs.push_back(std::move(rec));
  }
  if (!theta.all_finite()) throw NumericError("train_unified: theta became non-finite");
  result.theta = std::move(theta);
  return result;
}

IndividualResult train_individual(ModelSpec spec, const LabeledSet& data, const TrainConfig& cfg, std::size_t stream) {
  cfg.validate();
  validate(spec);
  if (data.inputs.cols != spec.input_size()) {
    throw ConfigError("train_individual: data has " + std::to_string(data.inputs.cols) + " features but model '" +
                      spec.model_id + "' expects " + std::to_string(spec.input_size()));
  }
  BatchSampler sampler(data.size(), stream_seed(cfg.seed, stream));
  AdamW opt(spec.parameter_count(), cfg);
  const std::size_t steps = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::vector<std::string> ids{spec.model_id};
  const std::vector<double> alpha{1.0};

  IndividualResult result;
  result.trace.model_ids = ids;
  std::vector<Matrix> seeds;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto start = Clock::now();
    const double lr = scheduled_lr(cfg, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t correct = 0, seen = 0;
    double loss_sum = 0.0;
    for (std::size_t step = 0; step < steps; ++step) {
      const auto rows = sampler.next(cfg.batch_size);
      const LabeledSet batch = data.subset(rows);
      const ForwardCache cache = dense_forward_cached(spec, batch.inputs);
      const std::vector<Matrix> logits{cache.logits()};
      const std::vector<std::vector<int>> labels{batch.labels};
      const LossReport rep = cross_entropy(ids, logits, labels, alpha, &seeds);
      require_finite(rep.total, "train_individual '" + spec.model_id + "' epoch " + std::to_string(epoch));
      loss_sum += rep.total;
      correct += rep.per_model[0].correct;
      seen += rep.per_model[0].count;
      const auto grads = flatten_grads(dense_backward(spec, cache, seeds[0]));
      auto flat = flatten_params(spec);
      opt.step(flat, grads, lr);
      unflatten_params(spec, flat);
    }
    rec.total_loss = loss_sum / static_cast<double>(steps);
    rec.model_loss = {rec.total_loss};
    rec.model_train_acc = {static_cast<double>(correct) / static_cast<double>(seen)};
    rec.wall_ms = elapsed_ms(start);
    result.trace.epochs.push_back(std::move(rec));
  }
  result.model = std::move(spec);
  return result;
}

EvalResult evaluate(const ForwardFn& forward, const LabeledSet& data, std::size_t batch) {
  if (data.size() == 0) throw DataError("evaluate: empty dataset");
  EvalResult r;
  double loss_sum = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    rows.clear();
    for (std::size_t k = start; k < std::min(data.size(), start + batch); ++k) rows.push_back(k);
    const LabeledSet chunk = data.subset(rows);
    const Matrix logits = forward(chunk.inputs);
    const std::vector<std::string> ids{"eval"};
    const std::vector<Matrix> z{logits};
    const std::vector<std::vector<int>> y{chunk.labels};
    const std::vector<double> alpha{1.0};
    const LossReport rep = cross_entropy(ids, z, y, alpha);
    loss_sum += rep.per_model[0].loss * static_cast<double>(rows.size());
    r.correct += rep.per_model[0].correct;
  }
  r.count = data.size();
  r.accuracy = static_cast<double>(r.correct) / static_cast<double>(r.count);
  r.mean_loss = loss_sum / static_cast<double>(r.count);
  return r;
}

ForwardFn dense_model_fn(const ModelSpec& spec) {
  return [&spec](const Matrix& batch) { return dense_forward(spec, batch); };
}

ForwardFn unified_model_fn(const Engine& engine, const ThetaParams& theta, std::size_t model) {
  return [&engine, &theta, model](const Matrix& batch) {
    std::vector<ModelInput> inputs(engine.graph().model_count());
    inputs[model] = {batch.rows, batch.data};
    return engine.forward(theta, inputs).logits(model);
  };
}

}  // namespace ugnn
