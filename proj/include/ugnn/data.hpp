#pragma once

// Image datasets: IDX ingestion, morphological perturbations, and
// partitioning of training data into clusters.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ugnn/model_ir.hpp"
#include "ugnn/trainer.hpp"

namespace ugnn {

enum class Split : std::uint8_t { train, test };
enum class Perturbation : std::uint8_t { plain, thin, thicken };

std::string_view to_string(Perturbation p);
Perturbation perturbation_from_string(std::string_view name);

struct Dataset {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // size() x height x width, values in [0, 1]
  std::vector<int> labels;
  std::size_t num_classes = 0;
  Split split = Split::train;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width; }
  std::span<const double> image(std::size_t i) const { return {pixels.data() + i * image_size(), image_size()}; }
  std::span<double> image(std::size_t i) { return {pixels.data() + i * image_size(), image_size()}; }

  Dataset subset(std::span<const std::size_t> rows) const;
  // Flattened images as a LabeledSet for training/evaluation.
  LabeledSet labeled() const;
};

// Big-endian IDX: images magic 0x00000803 + (count, H, W) + u8 pixels,
// labels magic 0x00000801 + count + u8 labels. Pixels are divided by 255.
// `num_classes` 0 means max label + 1.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, Split split = Split::train,
                 std::size_t num_classes = 0);
Dataset read_idx(std::istream& images, std::istream& labels, Split split = Split::train, std::size_t num_classes = 0);
// Pixels are written as round(255 * p).
void write_idx(const Dataset& d, std::ostream& images, std::ostream& labels);
void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path);

// plain: identity. thicken: 3x3 grey dilation. thin: 3x3 grey erosion.
// Neighbourhoods are clipped at the image border.
Dataset perturb(const Dataset& d, Perturbation kind);

enum class ClusterMode : std::uint8_t { random, noniid };

struct PcaModel {
  std::vector<double> mean;        // d
  Matrix components;               // k x d, orthonormal rows
  std::vector<double> explained;   // k eigenvalues, descending

  std::size_t dims() const { return mean.size(); }
  std::size_t count() const { return components.rows; }
  Matrix project(const Matrix& x) const;
  Matrix reconstruct(const Matrix& z) const;
};

// Covariance eigendecomposition; each component's largest-magnitude
// coordinate is made positive. Components beyond the numerical rank are
// dropped with a warning on stderr.
PcaModel fit_pca(const Matrix& x, std::size_t components);

struct KMeansResult {
  Matrix centroids;                  // K x d
  std::vector<std::size_t> assignment;
  std::vector<double> objective;     // within-cluster SS after each iteration
  std::size_t iterations = 0;
  bool converged = false;
};

// k-means++ seeding then Lloyd iterations until max centroid movement < tol.
// An emptied cluster is re-seeded at the point farthest from its centroid.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iterations = 300,
                    double tol = 1e-6);

struct ClusterAssignment {
  std::size_t k = 0;
  std::vector<std::size_t> assignment;
  ClusterMode mode = ClusterMode::random;
  std::uint64_t seed = 0;
  std::size_t pca_components = 0;
  // Non-IID only: the fitted projection and centroids, used to route test samples.
  std::optional<PcaModel> pca;
  Matrix centroids;
  std::vector<double> objective;

  std::vector<std::vector<std::size_t>> members() const;
  std::vector<std::size_t> sizes() const;
  // Nearest-centroid cluster for each image of `d` (non-IID only).
  std::vector<std::size_t> route(const Dataset& d) const;
  // sample_index,cluster_id
  void write_csv(std::ostream& out) const;
};

ClusterAssignment cluster_random(const Dataset& d, std::size_t k, std::uint64_t seed);
ClusterAssignment cluster_noniid(const Dataset& d, std::size_t k, std::uint64_t seed, std::size_t pca_components = 50);

// Concatenation of the sources, shuffled with `seed`.
Dataset mixed_test(std::span<const Dataset> sources, std::uint64_t seed);

}  // namespace ugnn
