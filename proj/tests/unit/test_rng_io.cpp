#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "ugnn/binary_io.hpp"
#include "ugnn/model_io.hpp"
#include "ugnn/rng.hpp"

using namespace ugnn;

TEST_CASE("rng draws are reproducible and in range") {
  Rng a(42), b(42);
  for (int k = 0; k < 1000; ++k) {
    const double u = a.uniform();
    CHECK(u == b.uniform());
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(a.below(7) == b.below(7));
  }
  auto p = Rng(1).permutation(50);
  CHECK(std::set<std::size_t>(p.begin(), p.end()).size() == 50);
  CHECK(derive_seed(1, 0) != derive_seed(1, 1));
  CHECK(derive_seed(1, 0) != derive_seed(2, 0));
  static_assert(derive_seed(7, 3) == derive_seed(7, 3));
}

TEST_CASE("endian helpers") {
  std::stringstream ss;
  io::write_be<std::uint32_t>(ss, 0x00000803u);
  CHECK(ss.str() == std::string("\x00\x00\x08\x03", 4));
  io::write_le<std::uint32_t>(ss, 0x01020304u);
  CHECK(io::read_be<std::uint32_t>(ss, "x") == 0x00000803u);
  CHECK(io::read_le<std::uint32_t>(ss, "x") == 0x01020304u);
  CHECK_THROWS_WITH_AS(io::read_le<std::uint64_t>(ss, "blob"), doctest::Contains("blob"), DataError);
}

TEST_CASE("model config and parameter blob round trip") {
  ModelSpec spec;
  spec.model_id = "g";
  spec.input_shape = {1, 3, 3};
  spec.graph = grid_graph(3, 3, AdjacencyNorm::symmetric);
  spec.layers = {LayerSpec::gnn(1, 2, Activation::relu), LayerSpec::readout(2), LayerSpec::dense(2, 3, Activation::identity)};
  spec = init_params(spec, 9);
  const auto dir = std::filesystem::temp_directory_path() / "ugnn_unit_model_io";
  std::filesystem::remove_all(dir);
  save_model(spec, (dir / "g.json").string(), (dir / "g.params").string());
  const auto back = load_model((dir / "g.json").string(), (dir / "g.params").string());
  CHECK(params_checksum(back) == params_checksum(spec));
  CHECK(back.graph->entries.size() == spec.graph->entries.size());
  CHECK(std::filesystem::file_size(dir / "g.params") == spec.parameter_count() * 8);

  {
    std::ofstream extra(dir / "g.params", std::ios::binary | std::ios::app);
    extra.put('x');
  }
  CHECK_THROWS_AS(load_model((dir / "g.json").string(), (dir / "g.params").string()), DataError);

  auto j = model_to_json(spec);
  j["layers"][0]["dropout"] = 0.5;
  CHECK_THROWS_AS(model_from_json(j), ConfigError);
}
