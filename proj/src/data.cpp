#include "ugnn/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>

#include <Eigen/Dense>
#include <fmt/format.h>

#include "ugnn/binary_io.hpp"
#include "ugnn/errors.hpp"
#include "ugnn/rng.hpp"

namespace ugnn {

std::string_view to_string(Perturbation p) {
  switch (p) {
    case Perturbation::plain: return "plain";
    case Perturbation::thin: return "thin";
    case Perturbation::thicken: return "thicken";
  }
  return "?";
}

Perturbation perturbation_from_string(std::string_view name) {
  if (name == "plain") return Perturbation::plain;
  if (name == "thin") return Perturbation::thin;
  if (name == "thicken") return Perturbation::thicken;
  throw ConfigError("unknown perturbation '" + std::string(name) + "'");
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.height = height;
  out.width = width;
  out.num_classes = num_classes;
  out.split = split;
  out.provenance = provenance + " | subset(" + std::to_string(rows.size()) + ")";
  out.pixels.reserve(rows.size() * image_size());
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) {
    const auto img = image(r);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(labels[r]);
  }
  return out;
}

LabeledSet Dataset::labeled() const {
  LabeledSet s;
  s.inputs = Matrix(size(), image_size());
  s.inputs.data = pixels;
  s.labels = labels;
  s.num_classes = num_classes;
  return s;
}

namespace {

constexpr std::uint32_t kImagesMagic = 0x00000803;
constexpr std::uint32_t kLabelsMagic = 0x00000801;

std::string hex_magic(std::uint32_t m) { return fmt::format("0x{:08X}", m); }

}  // namespace

Dataset read_idx(std::istream& images, std::istream& labels, Split split, std::size_t num_classes) {
  const auto img_magic = io::read_be<std::uint32_t>(images, "IDX images");
  if (img_magic != kImagesMagic) {
    throw DataError("IDX images: bad magic " + hex_magic(img_magic) + " at byte offset 0 (expected " + hex_magic(kImagesMagic) + ")");
  }
  const auto count = io::read_be<std::uint32_t>(images, "IDX images");
  const auto rows = io::read_be<std::uint32_t>(images, "IDX images");
  const auto cols = io::read_be<std::uint32_t>(images, "IDX images");
  const auto lbl_magic = io::read_be<std::uint32_t>(labels, "IDX labels");
  if (lbl_magic != kLabelsMagic) {
    throw DataError("IDX labels: bad magic " + hex_magic(lbl_magic) + " at byte offset 0 (expected " + hex_magic(kLabelsMagic) + ")");
  }
  const auto label_count = io::read_be<std::uint32_t>(labels, "IDX labels");
  if (label_count != count) {
    throw DataError("IDX: " + std::to_string(count) + " images but " + std::to_string(label_count) +
                    " labels (label count at byte offset 4)");
  }
  if (rows == 0 || cols == 0) throw DataError("IDX images: zero image dimension at byte offset 8");

  Dataset d;
  d.height = rows;
  d.width = cols;
  d.split = split;
  const std::size_t px = static_cast<std::size_t>(count) * rows * cols;
  std::vector<unsigned char> raw(px);
  if (!images.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(px))) {
    throw DataError("IDX images: truncated pixel data at byte offset " + std::to_string(16 + images.gcount()) +
                    " (expected " + std::to_string(16 + px) + " bytes)");
  }
  d.pixels.resize(px);
  for (std::size_t k = 0; k < px; ++k) d.pixels[k] = static_cast<double>(raw[k]) / 255.0;
  std::vector<unsigned char> lab(count);
  if (!labels.read(reinterpret_cast<char*>(lab.data()), static_cast<std::streamsize>(count))) {
    throw DataError("IDX labels: truncated label data at byte offset " + std::to_string(8 + labels.gcount()) +
                    " (expected " + std::to_string(8 + static_cast<std::size_t>(count)) + " bytes)");
  }
  std::size_t max_label = 0;
  d.labels.resize(count);
  for (std::size_t k = 0; k < count; ++k) {
    d.labels[k] = lab[k];
    max_label = std::max<std::size_t>(max_label, lab[k]);
  }
  d.num_classes = num_classes == 0 ? max_label + 1 : num_classes;
  if (count > 0 && max_label >= d.num_classes) {
    throw DataError("IDX labels: label " + std::to_string(max_label) + " exceeds class count " + std::to_string(d.num_classes));
  }
  return d;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path, Split split, std::size_t num_classes) {
  std::ifstream images(images_path, std::ios::binary);
  if (!images) throw DataError("cannot open " + images_path);
  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw DataError("cannot open " + labels_path);
  try {
    Dataset d = read_idx(images, labels, split, num_classes);
    d.provenance = images_path;
    return d;
  } catch (const DataError& e) {
    throw DataError(images_path + ": " + e.what());
  }
}

void write_idx(const Dataset& d, std::ostream& images, std::ostream& labels) {
  io::write_be<std::uint32_t>(images, kImagesMagic);
  io::write_be<std::uint32_t>(images, static_cast<std::uint32_t>(d.size()));
  io::write_be<std::uint32_t>(images, static_cast<std::uint32_t>(d.height));
  io::write_be<std::uint32_t>(images, static_cast<std::uint32_t>(d.width));
  for (double p : d.pixels) {
    const double q = std::clamp(std::round(p * 255.0), 0.0, 255.0);
    images.put(static_cast<char>(static_cast<unsigned char>(q)));
  }
  io::write_be<std::uint32_t>(labels, kLabelsMagic);
  io::write_be<std::uint32_t>(labels, static_cast<std::uint32_t>(d.size()));
  for (int y : d.labels) labels.put(static_cast<char>(static_cast<unsigned char>(y)));
}

void write_idx(const Dataset& d, const std::string& images_path, const std::string& labels_path) {
  std::ofstream images(images_path, std::ios::binary);
  std::ofstream labels(labels_path, std::ios::binary);
  if (!images || !labels) throw DataError("cannot write IDX files " + images_path + ", " + labels_path);
  write_idx(d, images, labels);
}

Dataset perturb(const Dataset& d, Perturbation kind) {
  Dataset out = d;
  out.provenance = d.provenance + " | " + std::string(to_string(kind));
  if (kind == Perturbation::plain) return out;
  const bool dilate = kind == Perturbation::thicken;
  const auto H = static_cast<long long>(d.height), W = static_cast<long long>(d.width);
  for (std::size_t n = 0; n < d.size(); ++n) {
    const auto src = d.image(n);
    auto dst = out.image(n);
    for (long long i = 0; i < H; ++i) {
      for (long long j = 0; j < W; ++j) {
        double v = src[static_cast<std::size_t>(i * W + j)];
        for (long long di = -1; di <= 1; ++di) {
          for (long long dj = -1; dj <= 1; ++dj) {
            const long long ii = i + di, jj = j + dj;
            if (ii < 0 || ii >= H || jj < 0 || jj >= W) continue;
            const double p = src[static_cast<std::size_t>(ii * W + jj)];
            v = dilate ? std::max(v, p) : std::min(v, p);
          }
        }
        dst[static_cast<std::size_t>(i * W + j)] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return out;
}

Matrix PcaModel::project(const Matrix& x) const {
  if (x.cols != dims()) throw ConfigError("PCA: input has " + std::to_string(x.cols) + " features, model expects " + std::to_string(dims()));
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> X(x.data.data(), static_cast<Eigen::Index>(x.rows), static_cast<Eigen::Index>(x.cols));
  Eigen::Map<const RowMat> P(components.data.data(), static_cast<Eigen::Index>(components.rows), static_cast<Eigen::Index>(components.cols));
  Eigen::Map<const Eigen::RowVectorXd> mu(mean.data(), static_cast<Eigen::Index>(mean.size()));
  Matrix z(x.rows, count());
  Eigen::Map<RowMat> Z(z.data.data(), static_cast<Eigen::Index>(z.rows), static_cast<Eigen::Index>(z.cols));
  Z.noalias() = (X.rowwise() - mu) * P.transpose();
  return z;
}

Matrix PcaModel::reconstruct(const Matrix& z) const {
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> Z(z.data.data(), static_cast<Eigen::Index>(z.rows), static_cast<Eigen::Index>(z.cols));
  Eigen::Map<const RowMat> P(components.data.data(), static_cast<Eigen::Index>(components.rows), static_cast<Eigen::Index>(components.cols));
  Eigen::Map<const Eigen::RowVectorXd> mu(mean.data(), static_cast<Eigen::Index>(mean.size()));
  Matrix x(z.rows, dims());
  Eigen::Map<RowMat> X(x.data.data(), static_cast<Eigen::Index>(x.rows), static_cast<Eigen::Index>(x.cols));
  X.noalias() = Z * P;
  X.rowwise() += mu;
  return x;
}

PcaModel fit_pca(const Matrix& x, std::size_t components) {
  if (x.rows < 2) throw ConfigError("PCA: need at least 2 samples");
  if (components == 0) throw ConfigError("PCA: component count must be >= 1");
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> X(x.data.data(), static_cast<Eigen::Index>(x.rows), static_cast<Eigen::Index>(x.cols));
  const Eigen::RowVectorXd mu = X.colwise().mean();
  const Eigen::MatrixXd centered = X.rowwise() - mu;
  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(x.rows - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw NumericError("PCA: eigendecomposition failed");

  const Eigen::Index d = cov.rows();
  const double top = std::max(eig.eigenvalues()(d - 1), 0.0);
  std::size_t rank = 0;
  for (Eigen::Index k = 0; k < d; ++k) {
    if (eig.eigenvalues()(k) > 1e-12 * top && eig.eigenvalues()(k) > 0.0) ++rank;
  }
  std::size_t keep = std::min<std::size_t>(components, static_cast<std::size_t>(d));
  if (keep > rank) {
    std::cerr << "warning: PCA requested " << components << " components but the data has rank " << rank
              << "; keeping " << std::max<std::size_t>(rank, 1) << "\n";
    keep = std::max<std::size_t>(rank, 1);
  }

  PcaModel model;
  model.mean.assign(mu.data(), mu.data() + d);
  model.components = Matrix(keep, static_cast<std::size_t>(d));
  for (std::size_t k = 0; k < keep; ++k) {
    const Eigen::Index col = d - 1 - static_cast<Eigen::Index>(k);
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    for (Eigen::Index c = 0; c < d; ++c) model.components(k, static_cast<std::size_t>(c)) = v(c);
    model.explained.push_back(eig.eigenvalues()(col));
  }
  return model;
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return s;
}

std::size_t nearest(const Matrix& centroids, std::span<const double> p, double* dist = nullptr) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    const double dd = sq_dist(p, centroids.row(c));
    if (dd < best_d) {
      best_d = dd;
      best = c;
    }
  }
  if (dist) *dist = best_d;
  return best;
}

void recompute_means(const Matrix& points, const std::vector<std::size_t>& assignment, Matrix& centroids,
                     std::vector<std::size_t>& counts) {
  std::fill(centroids.data.begin(), centroids.data.end(), 0.0);
  counts.assign(centroids.rows, 0);
  for (std::size_t p = 0; p < points.rows; ++p) {
    auto c = centroids.row(assignment[p]);
    const auto x = points.row(p);
    for (std::size_t k = 0; k < x.size(); ++k) c[k] += x[k];
    ++counts[assignment[p]];
  }
  for (std::size_t c = 0; c < centroids.rows; ++c) {
    if (counts[c] == 0) continue;
    for (auto& v : centroids.row(c)) v /= static_cast<double>(counts[c]);
  }
}

double objective(const Matrix& points, const std::vector<std::size_t>& assignment, const Matrix& centroids) {
  double s = 0.0;
  for (std::size_t p = 0; p < points.rows; ++p) s += sq_dist(points.row(p), centroids.row(assignment[p]));
  return s;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed, std::size_t max_iterations, double tol) {
  const std::size_t n = points.rows;
  if (k == 0 || k > n) throw ConfigError("k-means: K = " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  Rng rng(seed);
  KMeansResult r;
  r.centroids = Matrix(k, points.cols);

  // k-means++ seeding.
  std::size_t first = rng.below(n);
  std::copy(points.row(first).begin(), points.row(first).end(), r.centroids.row(0).begin());
  std::vector<double> d2(n);
  for (std::size_t p = 0; p < n; ++p) d2[p] = sq_dist(points.row(p), r.centroids.row(0));
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = rng.below(n);
    } else {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t p = 0; p < n; ++p) {
        acc += d2[p];
        if (acc > target) {
          pick = p;
          break;
        }
      }
    }
    std::copy(points.row(pick).begin(), points.row(pick).end(), r.centroids.row(c).begin());
    for (std::size_t p = 0; p < n; ++p) d2[p] = std::min(d2[p], sq_dist(points.row(p), r.centroids.row(c)));
  }

  r.assignment.assign(n, 0);
  Matrix next(k, points.cols);
  std::vector<std::size_t> counts;
  for (std::size_t it = 0; it < max_iterations; ++it) {
    for (std::size_t p = 0; p < n; ++p) r.assignment[p] = nearest(r.centroids, points.row(p));
    recompute_means(points, r.assignment, next, counts);
    // Re-seed emptied clusters at the point farthest from its own centroid.
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t p = 0; p < n; ++p) {
        if (counts[r.assignment[p]] < 2) continue;
        const double dd = sq_dist(points.row(p), next.row(r.assignment[p]));
        if (dd > far_d) {
          far_d = dd;
          far = p;
        }
      }
      if (far == n) throw NumericError("k-means: cannot re-seed an empty cluster");
      r.assignment[far] = c;
      recompute_means(points, r.assignment, next, counts);
    }
    double moved = 0.0;
    for (std::size_t c = 0; c < k; ++c) moved = std::max(moved, std::sqrt(sq_dist(next.row(c), r.centroids.row(c))));
    r.centroids = next;
    r.objective.push_back(objective(points, r.assignment, r.centroids));
    r.iterations = it + 1;
    if (moved < tol) {
      r.converged = true;
      break;
    }
  }
  return r;
}

std::vector<std::vector<std::size_t>> ClusterAssignment::members() const {
  std::vector<std::vector<std::size_t>> m(k);
  for (std::size_t i = 0; i < assignment.size(); ++i) m[assignment[i]].push_back(i);
  return m;
}

std::vector<std::size_t> ClusterAssignment::sizes() const {
  std::vector<std::size_t> s(k, 0);
  for (auto a : assignment) ++s[a];
  return s;
}

std::vector<std::size_t> ClusterAssignment::route(const Dataset& d) const {
  if (!pca) throw UsageError("route: only non-IID assignments carry centroids");
  const Matrix z = pca->project(d.labeled().inputs);
  std::vector<std::size_t> out(z.rows);
  for (std::size_t p = 0; p < z.rows; ++p) out[p] = nearest(centroids, z.row(p));
  return out;
}

void ClusterAssignment::write_csv(std::ostream& out) const {
  out << "sample_index,cluster_id\n";
  for (std::size_t i = 0; i < assignment.size(); ++i) out << i << ',' << assignment[i] << '\n';
}

ClusterAssignment cluster_random(const Dataset& d, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k > d.size()) throw ConfigError("cluster_random: K = " + std::to_string(k) + " outside [1, " + std::to_string(d.size()) + "]");
  ClusterAssignment a;
  a.k = k;
  a.mode = ClusterMode::random;
  a.seed = seed;
  a.assignment.resize(d.size());
  Rng rng(seed);
  const auto order = rng.permutation(d.size());
  for (std::size_t r = 0; r < order.size(); ++r) a.assignment[order[r]] = r % k;
  return a;
}

ClusterAssignment cluster_noniid(const Dataset& d, std::size_t k, std::uint64_t seed, std::size_t pca_components) {
  if (k == 0 || k > d.size()) throw ConfigError("cluster_noniid: K = " + std::to_string(k) + " outside [1, " + std::to_string(d.size()) + "]");
  const Matrix x = d.labeled().inputs;
  ClusterAssignment a;
  a.k = k;
  a.mode = ClusterMode::noniid;
  a.seed = seed;
  a.pca = fit_pca(x, pca_components);
  a.pca_components = a.pca->count();
  const Matrix z = a.pca->project(x);
  KMeansResult km = kmeans(z, k, seed);
  a.assignment = std::move(km.assignment);
  a.centroids = std::move(km.centroids);
  a.objective = std::move(km.objective);
  return a;
}

Dataset mixed_test(std::span<const Dataset> sources, std::uint64_t seed) {
  if (sources.empty()) throw ConfigError("mixed_test: need at least one source");
  Dataset all;
  all.height = sources[0].height;
  all.width = sources[0].width;
  all.num_classes = sources[0].num_classes;
  all.split = Split::test;
  all.provenance = "mixed(";
  for (const auto& s : sources) {
    if (s.num_classes != all.num_classes) {
      throw DataError("mixed_test: label spaces differ (" + std::to_string(s.num_classes) + " vs " + std::to_string(all.num_classes) + " classes)");
    }
    if (s.height != all.height || s.width != all.width) throw DataError("mixed_test: image sizes differ");
    all.pixels.insert(all.pixels.end(), s.pixels.begin(), s.pixels.end());
    all.labels.insert(all.labels.end(), s.labels.begin(), s.labels.end());
    all.provenance += s.provenance + ";";
  }
  all.provenance += ")";
  Rng rng(seed);
  const auto order = rng.permutation(all.size());
  Dataset shuffled = all.subset(order);
  shuffled.provenance = all.provenance;
  return shuffled;
}

}  // namespace ugnn
