#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "support/support.hpp"
#include "ugnn/errors.hpp"
#include "ugnn/trainer.hpp"

using namespace ugnn;

namespace {

// Two Gaussian blobs in 4 dimensions, linearly separable.
LabeledSet blobs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  LabeledSet s;
  s.inputs = Matrix(n, 4);
  s.num_classes = 2;
  for (std::size_t r = 0; r < n; ++r) {
    const int y = static_cast<int>(r % 2);
    for (std::size_t c = 0; c < 4; ++c) s.inputs(r, c) = (y ? 1.0 : -1.0) + rng.uniform(-0.5, 0.5);
    s.labels.push_back(y);
  }
  return s;
}

ModelSpec small_mlp(const std::string& id, std::uint64_t seed) {
  ModelSpec spec;
  spec.model_id = id;
  spec.input_shape = {4, 1, 1};
  spec.layers = {LayerSpec::dense(4, 6, Activation::tanh), LayerSpec::dense(6, 2, Activation::identity)};
  return init_params(spec, seed);
}

}  // namespace

TEST_CASE("one AdamW step on a scalar") {
  AdamW opt(1, 0.9, 0.999, 1e-8, 0.01);
  std::vector<double> p{1.0};
  opt.step(p, std::vector<double>{0.5}, 0.1);
  // decay first: 1 - 0.1 * 0.01 * 1 = 0.999; then m_hat = 0.5, v_hat = 0.25
  const double want = 0.999 - 0.1 * 0.5 / (std::sqrt(0.25) + 1e-8);
  CHECK(std::abs(p[0] - want) <= 1e-12);
  CHECK(opt.steps() == 1);
  CHECK_THROWS_AS(opt.step(p, std::vector<double>{1.0, 2.0}, 0.1), UsageError);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.learning_rate = 0.1;
  cfg.min_lr_ratio = 0.1;
  CHECK(scheduled_lr(cfg, 0) == doctest::Approx(0.1));
  CHECK(scheduled_lr(cfg, 2) == doctest::Approx(0.055));
  CHECK(scheduled_lr(cfg, 4) == doctest::Approx(0.01));
  for (std::size_t e = 1; e < 5; ++e) CHECK(scheduled_lr(cfg, e) <= scheduled_lr(cfg, e - 1));
  cfg.schedule = Schedule::constant;
  CHECK(scheduled_lr(cfg, 4) == 0.1);
  cfg.epochs = 1;
  cfg.schedule = Schedule::cosine;
  CHECK(scheduled_lr(cfg, 0) == doctest::Approx(0.1));
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.beta1 = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  CHECK(cfg.resolved_alpha(4) == std::vector<double>(4, 0.25));
  cfg.alpha = {0.2, 0.8};
  CHECK_THROWS_AS(cfg.resolved_alpha(3), ConfigError);
}

TEST_CASE("batch sampler visits every sample once per pass") {
  BatchSampler s(10, 3);
  std::vector<std::size_t> seen;
  for (int k = 0; k < 5; ++k) {
    const auto b = s.next(4);
    seen.insert(seen.end(), b.begin(), b.end());
  }
  // 20 draws: two full passes of 10
  std::vector<std::size_t> first(seen.begin(), seen.begin() + 10), second(seen.begin() + 10, seen.end());
  std::sort(first.begin(), first.end());
  std::sort(second.begin(), second.end());
  for (std::size_t k = 0; k < 10; ++k) {
    CHECK(first[k] == k);
    CHECK(second[k] == k);
  }
  BatchSampler again(10, 3);
  CHECK(again.next(7) == std::vector<std::size_t>(seen.begin(), seen.begin() + 7));
  CHECK_THROWS_AS(BatchSampler(0, 1), DataError);
}

TEST_CASE("individual training fits separable data") {
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.05;
  cfg.seed = 4;
  const auto data = blobs(64, 1);
  const auto res = train_individual(small_mlp("m", 2), data, cfg);
  REQUIRE(res.trace.epochs.size() == 20);
  CHECK(res.trace.epochs.back().model_loss[0] < res.trace.epochs.front().model_loss[0]);
  CHECK(evaluate(dense_model_fn(res.model), blobs(40, 9)).accuracy > 0.95);

  const auto again = train_individual(small_mlp("m", 2), data, cfg);
  CHECK(flatten_params(again.model) == flatten_params(res.model));
}

TEST_CASE("unified training lowers the joint loss and is reproducible") {
  TrainConfig cfg;
  cfg.epochs = 15;
  cfg.batch_size = 16;
  cfg.learning_rate = 0.02;
  cfg.seed = 5;
  const std::vector<ModelGraph> graphs{graphize(small_mlp("a", 1)), graphize(small_mlp("b", 2))};
  auto u = disjoint_union(graphs);
  const std::size_t e = u.total_edges(), n = u.total_nodes();
  u = assign_groups(std::move(u), e, n, 1);
  const std::vector<LabeledSet> clusters{blobs(48, 2), blobs(32, 3)};
  const auto res = train_unified(u, init_identityish(e, n), clusters, cfg);
  CHECK(res.trace.epochs.back().total_loss < res.trace.epochs.front().total_loss);
  CHECK(res.theta.all_finite());
  const Engine engine(u);
  for (std::size_t i = 0; i < 2; ++i) CHECK(evaluate(unified_model_fn(engine, res.theta, i), blobs(40, 9)).accuracy > 0.9);

  const auto again = train_unified(u, init_identityish(e, n), clusters, cfg);
  CHECK(again.theta.pack() == res.theta.pack());

  std::ostringstream csv;
  res.trace.write_csv(csv);
  CHECK(csv.str().rfind("epoch,total_loss,model_id,model_loss,model_train_acc,wall_ms\n", 0) == 0);

  const std::vector<LabeledSet> wrong{blobs(8, 1)};
  CHECK_THROWS_AS(train_unified(u, init_identityish(e, n), wrong, cfg), ConfigError);
}

TEST_CASE("a diverging run raises a numeric error") {
  TrainConfig cfg;
  cfg.epochs = 2;
  auto data = blobs(16, 1);
  data.inputs(0, 0) = std::nan("");
  CHECK_THROWS_AS(train_individual(small_mlp("m", 1), data, cfg), NumericError);
}

TEST_CASE("evaluate") {
  const auto spec = small_mlp("m", 3);
  const auto data = blobs(10, 1);
  const auto r = evaluate(dense_model_fn(spec), data, 3);
  CHECK(r.count == 10);
  CHECK(r.accuracy == doctest::Approx(static_cast<double>(r.correct) / 10));
  CHECK(std::isfinite(r.mean_loss));
  CHECK_THROWS_AS(evaluate(dense_model_fn(spec), LabeledSet{Matrix(0, 4), {}, 2}), DataError);
}
