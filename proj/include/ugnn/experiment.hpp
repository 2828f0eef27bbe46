#pragma once

// End-to-end experiments: individual (baseline) training vs. unified
// training of a model roster on clustered data, evaluated on the mixed test
// distribution.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ugnn/data.hpp"
#include "ugnn/model_ir.hpp"
#include "ugnn/trainer.hpp"

namespace ugnn {

struct ConvConfig {
  std::size_t channels = 4;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

// One roster entry. arch is "mlp", "cnn" or "gnn".
struct ModelConfig {
  std::string id;
  std::string arch;
  std::vector<std::size_t> hidden;       // dense widths before the output layer
  std::vector<ConvConfig> conv;          // cnn only
  std::vector<std::size_t> gnn_channels; // gnn only
  AdjacencyNorm norm = AdjacencyNorm::mean;
  Activation activation = Activation::relu;
  std::optional<std::size_t> cluster;    // defaults to the roster position
};

ModelSpec build_model(const ModelConfig& cfg, std::size_t height, std::size_t width, std::size_t num_classes);

// 3 MLPs, 3 CNNs, 4 grid GNNs.
std::vector<ModelConfig> default_roster();

enum class PartitionMode : std::uint8_t { random, noniid, perturbation };
enum class RunModes : std::uint8_t { individual, unified, both };

struct DataConfig {
  std::string train_images, train_labels, test_images, test_labels;
  std::size_t train_limit = 0;  // 0 = all
  std::size_t test_limit = 0;
  std::size_t num_classes = 0;  // 0 = infer from labels
};

struct ExperimentPlan {
  DataConfig data;
  PartitionMode partition = PartitionMode::perturbation;
  std::size_t k = 3;
  std::vector<Perturbation> perturbations;  // perturbation mode: one per cluster
  std::size_t pca_components = 50;
  std::vector<ModelConfig> roster;
  TrainConfig train;
  std::size_t k_edge = 0;  // 0 = one group per edge
  std::size_t k_bias = 0;  // 0 = one group per node
  std::uint64_t seed = 0;
  std::size_t folds = 1;
  RunModes modes = RunModes::both;
  std::string output;

  void validate() const;
};

// Unknown keys are errors. Relative data paths resolve against `base_dir`.
ExperimentPlan plan_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json plan_to_json(const ExperimentPlan& plan);
ExperimentPlan load_plan(const std::string& path);

struct ResultRow {
  std::size_t fold = 0;
  std::string model_id;
  std::string arch;
  std::string mode;  // individual | unified
  double mixed_acc = 0.0;
  double mixed_loss = 0.0;
  std::vector<double> cluster_accs;
};

// fold,model_id,arch,mode,mixed_acc,mixed_loss,cluster_accs
void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows);

struct TrainingSummary {
  std::size_t fold = 0;
  std::string model_id;
  std::string mode;
  double final_loss = 0.0;
  double final_train_acc = 0.0;
  bool all_finite = true;
};

struct ExperimentResult {
  std::vector<ResultRow> rows;
  std::vector<TrainingSummary> training;
  // Per fold and model: checksum of the initial parameters fed to both modes.
  std::vector<std::vector<std::uint64_t>> init_checksums;
};

// Clustering for one fold; returns the per-cluster training sets and
// test splits (whose concatenation is the mixed test set).
struct FoldData {
  ClusterAssignment clusters;
  std::vector<Dataset> train;
  std::vector<Dataset> test;
  Dataset mixed;
};
FoldData prepare_fold(const ExperimentPlan& plan, const Dataset& train, const Dataset& test, std::size_t fold);

std::uint64_t fold_seed(const ExperimentPlan& plan, std::size_t fold);

// Trains every fold and writes artifacts under plan.output.
ExperimentResult train_experiment(const ExperimentPlan& plan);
// Evaluates the artifacts of a trained run directory; writes results.csv.
ExperimentResult evaluate_experiment(const ExperimentPlan& plan);
// train_experiment followed by evaluate_experiment.
ExperimentResult run_experiment(const ExperimentPlan& plan);

struct ModeSummary {
  std::string model_id;
  std::string arch;
  std::string mode;
  std::size_t folds = 0;
  double mean = 0.0;
  double stddev = 0.0;  // population
};

struct PairedDelta {
  std::string model_id;
  std::string arch;
  bool complete = false;
  double individual_mean = 0.0;
  double unified_mean = 0.0;
  double delta = 0.0;  // unified - individual
};

struct Report {
  std::vector<ModeSummary> summaries;
  std::vector<PairedDelta> pairs;
};

std::vector<ResultRow> read_results_csv(std::istream& in);
Report make_report(const std::vector<ResultRow>& rows);
void write_report(std::ostream& out, const Report& r);
// model_id,arch,mode,mean_acc,std_acc,folds (one row per bar)
void write_plot_data(std::ostream& out, const Report& r);

}  // namespace ugnn
