#include <doctest.h>

#include <set>
#include <sstream>

#include "support/support.hpp"
#include "ugnn/errors.hpp"
#include "ugnn/unified.hpp"

using namespace ugnn;

namespace {

std::vector<ModelGraph> sample_graphs(std::uint64_t seed) {
  Rng rng(seed);
  return {graphize(testing::random_mlp(rng, "a")), graphize(testing::random_cnn(rng, "b")), graphize(testing::random_gnn(rng, "c"))};
}

}  // namespace

TEST_CASE("disjoint union offsets and totals") {
  const auto graphs = sample_graphs(1);
  const auto u = disjoint_union(graphs);
  REQUIRE(u.model_count() == 3);
  std::size_t nodes = 0, edges = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(u.blocks[i].node_offset == nodes);
    CHECK(u.blocks[i].edge_offset == edges);
    nodes += graphs[i].nodes.size();
    edges += graphs[i].edges.size();
  }
  CHECK(u.total_nodes() == nodes);
  CHECK(u.total_edges() == edges);
  CHECK(check_block_diagonal(u).ok);
  CHECK(u.model_of_node(u.blocks[2].node_offset) == 2);
  CHECK(u.model_of_node(u.blocks[1].node_offset - 1) == 0);
  CHECK_FALSE(u.grouped());
  CHECK_THROWS_AS(disjoint_union(std::span<const ModelGraph>{}), ConfigError);
}

TEST_CASE("extract_model recovers each model-graph") {
  const auto graphs = sample_graphs(2);
  const auto u = disjoint_union(graphs);
  for (std::size_t i = 0; i < graphs.size(); ++i) {
    const auto g = extract_model(u, i);
    CHECK(g.model_id == graphs[i].model_id);
    REQUIRE(g.edges.size() == graphs[i].edges.size());
    for (std::size_t e = 0; e < g.edges.size(); ++e) {
      CHECK(g.edges[e].src == graphs[i].edges[e].src);
      CHECK(g.edges[e].dst == graphs[i].edges[e].dst);
      CHECK(g.edges[e].weight == graphs[i].edges[e].weight);
    }
    CHECK(g.layers == graphs[i].layers);
  }
}

TEST_CASE("cross-model edges break block diagonality") {
  auto u = disjoint_union(sample_graphs(3));
  u.edges[0].src = u.blocks[1].node_offset;
  CHECK_FALSE(check_block_diagonal(u).ok);
}

TEST_CASE("group assignment") {
  const auto u = disjoint_union(sample_graphs(4));
  const auto id = assign_groups(u, u.total_edges(), u.total_nodes(), 9);
  for (std::size_t e = 0; e < id.total_edges(); ++e) CHECK(id.edge_group[e] == e);
  for (std::size_t v = 0; v < id.total_nodes(); ++v) CHECK(id.bias_group[v] == v);

  const auto a = assign_groups(u, 5, 4, 9);
  const auto b = assign_groups(u, 5, 4, 9);
  const auto c = assign_groups(u, 5, 4, 10);
  CHECK(a.edge_group == b.edge_group);
  CHECK(a.edge_group != c.edge_group);
  CHECK(std::set<std::uint32_t>(a.edge_group.begin(), a.edge_group.end()).size() == 5);
  CHECK(std::set<std::uint32_t>(a.bias_group.begin(), a.bias_group.end()).size() == 4);
  CHECK_THROWS_AS(assign_groups(u, 0, 4, 1), ConfigError);
  CHECK_THROWS_AS(assign_groups(u, u.total_edges() + 1, 4, 1), ConfigError);
}

TEST_CASE("unified graph file round trip") {
  const auto u = assign_groups(disjoint_union(sample_graphs(5)), 7, 3, 2);
  std::stringstream ss;
  write_unified_graph(ss, u);
  const auto back = read_unified_graph(ss);
  CHECK(back.k_edge == 7);
  CHECK(back.k_bias == 3);
  CHECK(back.edge_group == u.edge_group);
  CHECK(back.bias_group == u.bias_group);
  REQUIRE(back.blocks.size() == u.blocks.size());
  for (std::size_t i = 0; i < u.blocks.size(); ++i) {
    CHECK(back.blocks[i].model_id == u.blocks[i].model_id);
    CHECK(back.blocks[i].edge_offset == u.blocks[i].edge_offset);
    CHECK(back.blocks[i].layer_shapes == u.blocks[i].layer_shapes);
  }
  for (std::size_t e = 0; e < u.total_edges(); ++e) CHECK(back.edges[e].weight == u.edges[e].weight);
}
