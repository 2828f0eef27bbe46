#include <doctest.h>

#include <cmath>

#include "support/support.hpp"
#include "ugnn/engine.hpp"
#include "ugnn/errors.hpp"

using namespace ugnn;

namespace {

struct Fixture {
  std::vector<ModelSpec> specs;
  UnifiedGraph u;
  std::vector<Matrix> batches;

  explicit Fixture(std::uint64_t seed) {
    Rng rng(seed);
    specs = {testing::random_mlp(rng, "a"), testing::random_cnn(rng, "b"), testing::random_gnn(rng, "c")};
    std::vector<ModelGraph> graphs;
    for (const auto& s : specs) graphs.push_back(graphize(s));
    u = disjoint_union(graphs);
    const std::size_t e = u.total_edges(), n = u.total_nodes();
    u = assign_groups(std::move(u), e, n, seed);
    for (const auto& s : specs) batches.push_back(testing::random_batch(rng, 5, s.input_size()));
  }

  std::vector<ModelInput> inputs() const {
    std::vector<ModelInput> in;
    for (const auto& b : batches) in.push_back({b.rows, b.data});
    return in;
  }
};

}  // namespace

TEST_CASE("raw emulation reproduces every model") {
  const Fixture f(1);
  const Engine engine(f.u);
  const auto st = engine.forward_raw(f.inputs());
  CHECK(st.mode() == EmulationMode::raw);
  for (std::size_t i = 0; i < f.specs.size(); ++i) {
    const Matrix want = dense_forward(f.specs[i], f.batches[i]);
    const Matrix got = st.logits(i);
    REQUIRE(got.rows == want.rows);
    REQUIRE(got.cols == want.cols);
    for (std::size_t k = 0; k < want.data.size(); ++k) CHECK(std::abs(got.data[k] - want.data[k]) <= 1e-12);
  }
}

TEST_CASE("transformed forward applies the updated features") {
  const Fixture f(2);
  const Engine engine(f.u);
  const auto theta = init_identityish(f.u.k_edge, f.u.k_bias);
  const auto st = engine.forward(theta, f.inputs());
  // Rebuild each model from the updated features and evaluate it directly.
  const auto e = transform_edges(f.u, theta);
  const auto b = transform_biases(f.u, theta);
  CHECK(std::vector<double>(st.updated_edges().begin(), st.updated_edges().end()) == e);
  UnifiedGraph v = f.u;
  for (std::size_t k = 0; k < e.size(); ++k) v.edges[k].weight = e[k];
  for (std::size_t k = 0; k < b.size(); ++k) v.nodes[k].bias = b[k];
  const Engine raw(v);
  const auto want = raw.forward_raw(f.inputs());
  for (std::size_t i = 0; i < f.specs.size(); ++i) {
    const auto a = st.logits(i), c = want.logits(i);
    for (std::size_t k = 0; k < a.data.size(); ++k) CHECK(a.data[k] == doctest::Approx(c.data[k]).epsilon(1e-12));
  }
}

TEST_CASE("threaded execution is bitwise identical") {
  const Fixture f(3);
  const Engine one(f.u, 1), four(f.u, 4);
  Rng rng(3);
  const auto theta = testing::random_theta(rng, f.u.k_edge, f.u.k_bias);
  const auto a = one.forward(theta, f.inputs());
  const auto b = four.forward(theta, f.inputs());
  std::vector<Matrix> grads;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.logits(i).data == b.logits(i).data);
    grads.push_back(testing::random_batch(rng, a.logits(i).rows, a.logits(i).cols));
  }
  CHECK(one.backward(theta, a, grads).pack() == four.backward(theta, b, grads).pack());
}

TEST_CASE("backward guards") {
  const Fixture f(4);
  const Engine engine(f.u);
  auto theta = init_identityish(f.u.k_edge, f.u.k_bias);
  const auto raw = engine.forward_raw(f.inputs());
  std::vector<Matrix> grads;
  for (std::size_t i = 0; i < 3; ++i) grads.push_back(Matrix(raw.logits(i).rows, raw.logits(i).cols, 0.1));
  CHECK_THROWS_AS(engine.backward(theta, raw, grads), UsageError);

  const auto st = engine.forward(theta, f.inputs());
  theta.edge_shift[0] += 1.0;
  CHECK_THROWS_AS(engine.backward(theta, st, grads), UsageError);
  theta.edge_shift[0] -= 1.0;
  CHECK_NOTHROW(engine.backward(theta, st, grads));
  grads.pop_back();
  CHECK_THROWS_AS(engine.backward(theta, st, grads), UsageError);
}

TEST_CASE("inactive models are skipped") {
  const Fixture f(5);
  const Engine engine(f.u);
  auto in = f.inputs();
  in[1] = {};
  const auto st = engine.forward_raw(in);
  CHECK(st.batch(1) == 0);
  CHECK(st.logits(1).rows == 0);
  CHECK(st.logits(0).data == engine.forward_raw(f.inputs()).logits(0).data);
  in[0].values = in[0].values.first(3);
  CHECK_THROWS_AS(engine.forward_raw(in), ConfigError);
}

TEST_CASE("cross entropy") {
  const std::vector<std::string> ids{"a", "b"};
  std::vector<Matrix> logits{Matrix(2, 2, 0.0), Matrix(1, 3)};
  logits[1](0, 0) = 2.0;
  logits[1](0, 1) = 1.0;
  const std::vector<std::vector<int>> labels{{0, 1}, {0}};
  const std::vector<double> alpha{0.25, 0.75};
  std::vector<Matrix> grads;
  const auto r = cross_entropy(ids, logits, labels, alpha, &grads);
  CHECK(r.per_model[0].loss == doctest::Approx(std::log(2.0)));
  const double lse = std::log(std::exp(2.0) + std::exp(1.0) + 1.0);
  CHECK(r.per_model[1].loss == doctest::Approx(lse - 2.0));
  CHECK(r.per_model[1].correct == 1);
  CHECK(r.total == doctest::Approx(0.25 * std::log(2.0) + 0.75 * (lse - 2.0)));
  // alpha * (p - onehot) / B
  CHECK(grads[0](0, 0) == doctest::Approx(0.25 * (0.5 - 1.0) / 2));
  CHECK(grads[1](0, 2) == doctest::Approx(0.75 * std::exp(0.0 - lse)));

  // huge logits stay finite
  std::vector<Matrix> big{Matrix(1, 2), Matrix(1, 3)};
  big[0](0, 0) = 1e4;
  CHECK(std::isfinite(cross_entropy(ids, big, std::vector<std::vector<int>>{{1}, {2}}, alpha).total));

  CHECK_THROWS_AS(cross_entropy(ids, logits, std::vector<std::vector<int>>{{0, 5}, {0}}, alpha), DataError);
  CHECK_THROWS_AS(validate_alpha(std::vector<double>{0.5, 0.6}, 2), ConfigError);
  CHECK_THROWS_AS(validate_alpha(std::vector<double>{1.5, -0.5}, 2), ConfigError);
  CHECK_NOTHROW(validate_alpha(std::vector<double>{1.0, 0.0}, 2));
}

TEST_CASE("argmax ties go to the smaller index") {
  CHECK(argmax(std::vector<double>{1.0, 3.0, 3.0}) == 1);
  CHECK(argmax(std::vector<double>{0.0}) == 0);
}

TEST_CASE("theta gradients match finite differences") {
  Rng rng(6);
  ModelSpec a = testing::random_mlp(rng, "a");
  ModelSpec b = testing::random_gnn(rng, "b");
  for (auto* s : {&a, &b}) {
    for (auto& l : s->layers) l.activation = Activation::tanh;
  }
  const std::vector<ModelGraph> graphs{graphize(a), graphize(b)};
  const auto base = disjoint_union(graphs);
  for (const bool identity : {true, false}) {
    const auto u = identity ? assign_groups(base, base.total_edges(), base.total_nodes(), 1)
                            : assign_groups(base, std::max<std::size_t>(1, base.total_edges() / 3), std::max<std::size_t>(1, base.total_nodes() / 2), 1);
    const Engine engine(u);
    testing::LossProblem p;
    p.engine = &engine;
    p.batches = {testing::random_batch(rng, 4, a.input_size()), testing::random_batch(rng, 3, b.input_size())};
    p.alpha = {0.4, 0.6};
    for (std::size_t i = 0; i < 2; ++i) {
      std::vector<int> y;
      const std::size_t classes = u.blocks[i].output_size();
      for (std::size_t r = 0; r < p.batches[i].rows; ++r) y.push_back(static_cast<int>(rng.below(classes)));
      p.labels.push_back(y);
    }
    const auto theta = testing::random_theta(rng, u.k_edge, u.k_bias);
    const auto g = p.analytic(theta);
    for (std::size_t k = 0; k < g.size(); k += std::max<std::size_t>(1, g.size() / 40)) {
      CHECK(testing::relative_error(g[k], p.central_difference(theta, k, 1e-6), 1e-6) < 1e-5);
    }
    CHECK(testing::relative_error(g[g.size() - 1], p.central_difference(theta, g.size() - 1, 1e-6), 1e-6) < 1e-5);
    CHECK(testing::relative_error(g[g.size() - 2], p.central_difference(theta, g.size() - 2, 1e-6), 1e-6) < 1e-5);
  }
}
