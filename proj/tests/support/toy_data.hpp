#pragma once

#include <filesystem>
#include <string>

#include "ugnn/data.hpp"
#include "ugnn/rng.hpp"

namespace ugnn::testing {

// Writes a separable 6x6 three-class IDX dataset: class c lights up
// row band c, with pixel noise.
inline void write_toy_idx(const std::filesystem::path& dir, std::size_t train, std::size_t test, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  Rng rng(seed);
  const auto make = [&](std::size_t n) {
    Dataset d;
    d.height = 6;
    d.width = 6;
    d.num_classes = 3;
    for (std::size_t s = 0; s < n; ++s) {
      const int y = static_cast<int>(rng.below(3));
      for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
          const bool on = i / 2 == static_cast<std::size_t>(y);
          d.pixels.push_back(on ? rng.uniform(0.6, 1.0) : rng.uniform(0.0, 0.3));
        }
      }
      d.labels.push_back(y);
    }
    return d;
  };
  write_idx(make(train), (dir / "train-images").string(), (dir / "train-labels").string());
  write_idx(make(test), (dir / "test-images").string(), (dir / "test-labels").string());
}

inline std::string toy_plan_json(const std::filesystem::path& data_dir, const std::filesystem::path& out, std::size_t folds = 2) {
  return R"({
  "data": {"train_images": ")" + (data_dir / "train-images").string() + R"(", "train_labels": ")" +
         (data_dir / "train-labels").string() + R"(",
           "test_images": ")" + (data_dir / "test-images").string() + R"(", "test_labels": ")" +
         (data_dir / "test-labels").string() + R"("},
  "clusters": {"mode": "random", "k": 3},
  "roster": [
    {"id": "a", "arch": "mlp", "hidden": [8]},
    {"id": "b", "arch": "mlp", "hidden": [4, 4]},
    {"id": "c", "arch": "mlp", "hidden": []}
  ],
  "train": {"epochs": 3, "batch_size": 16, "learning_rate": 0.01},
  "seed": 3,
  "folds": )" + std::to_string(folds) + R"(,
  "output": ")" + out.string() + R"("
})";
}

}  // namespace ugnn::testing
