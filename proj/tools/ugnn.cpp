// ugnn command-line driver.
//
//   ugnn convert --model model.json [--params model.params] --out model.umg
//   ugnn cluster --plan plan.json [--fold N] --out clusters.csv
//   ugnn train   --plan plan.json [--out DIR]
//   ugnn eval    --plan DIR/metadata.json
//   ugnn run     --plan plan.json [--out DIR]
//   ugnn report  --results results.csv [--out DIR]
//
// Every flag can also be given through the environment as UGNN_<FLAG>.

#include <cstdlib>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ranges.h>
#include <nlohmann/json.hpp>

#include "ugnn/binary_io.hpp"
#include "ugnn/errors.hpp"
#include "ugnn/experiment.hpp"
#include "ugnn/graphize.hpp"
#include "ugnn/model_io.hpp"

namespace {

enum ExitCode : int { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct PlanOptions {
  std::string plan;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::optional<unsigned> threads;
};

void add_plan_options(CLI::App* cmd, PlanOptions& o, bool plan_required = true) {
  auto* plan = cmd->add_option("--plan", o.plan, "experiment plan (JSON) or a run's metadata.json")->envname("UGNN_PLAN");
  if (plan_required) plan->required();
  cmd->add_option("--out", o.out, "output directory (overrides the plan)")->envname("UGNN_OUT");
  cmd->add_option("--seed", o.seed, "base seed (overrides the plan)")->envname("UGNN_SEED");
  cmd->add_option("--mode", o.mode, "individual, unified or both")
      ->envname("UGNN_MODE")
      ->check(CLI::IsMember({"individual", "unified", "both"}));
  cmd->add_option("--threads", o.threads, "worker threads for the unified engine")->envname("UGNN_THREADS");
}

ugnn::ExperimentPlan resolve_plan(const PlanOptions& o) {
  ugnn::ExperimentPlan plan = ugnn::load_plan(o.plan);
  if (!o.out.empty()) plan.output = o.out;
  if (o.seed) plan.seed = *o.seed;
  if (o.mode == "individual") plan.modes = ugnn::RunModes::individual;
  else if (o.mode == "unified") plan.modes = ugnn::RunModes::unified;
  else if (o.mode == "both") plan.modes = ugnn::RunModes::both;
  if (o.threads) plan.train.threads = *o.threads;
  if (plan.output.empty()) throw ugnn::ConfigError("no output directory: set \"output\" in the plan or pass --out");
  plan.validate();
  return plan;
}

void print_rows(const std::vector<ugnn::ResultRow>& rows) {
  for (const auto& r : rows) {
    std::cout << fmt::format("fold {} {:<16} {:<10} mixed_acc {:.4f} mixed_loss {:.4f}\n", r.fold, r.model_id, r.mode, r.mixed_acc,
                             r.mixed_loss);
  }
}

void print_training(const std::vector<ugnn::TrainingSummary>& training) {
  for (const auto& t : training) {
    std::cout << fmt::format("fold {} {:<16} {:<10} final_loss {:.4f} train_acc {:.4f}{}\n", t.fold, t.model_id, t.mode, t.final_loss,
                             t.final_train_acc, t.all_finite ? "" : " (non-finite)");
  }
}

int dispatch(int argc, char** argv) {
  CLI::App app{"uGNN: train heterogeneous models jointly through a unified parameter graph"};
  app.require_subcommand(1);

  std::string model_path, params_path, graph_out;
  std::uint64_t convert_seed = 0;
  auto* convert = app.add_subcommand("convert", "encode a model config as a model-graph file");
  convert->add_option("--model", model_path, "model config (JSON)")->required()->envname("UGNN_MODEL");
  convert->add_option("--params", params_path, "parameter blob; omitted means freshly initialized")->envname("UGNN_PARAMS");
  convert->add_option("--seed", convert_seed, "initialization seed when --params is omitted")->envname("UGNN_SEED");
  convert->add_option("--out", graph_out, "model-graph output file")->required()->envname("UGNN_OUT");

  PlanOptions cluster_opts;
  std::size_t cluster_fold = 0;
  auto* cluster = app.add_subcommand("cluster", "partition the training set and write sample_index,cluster_id");
  add_plan_options(cluster, cluster_opts);
  cluster->add_option("--fold", cluster_fold, "fold whose seed to use")->envname("UGNN_FOLD");

  PlanOptions train_opts, eval_opts, run_opts;
  auto* train = app.add_subcommand("train", "train every fold and write artifacts");
  add_plan_options(train, train_opts);
  auto* eval = app.add_subcommand("eval", "evaluate a trained run directory and write results.csv");
  add_plan_options(eval, eval_opts);
  auto* run = app.add_subcommand("run", "train then evaluate");
  add_plan_options(run, run_opts);

  std::string results_path, report_out;
  auto* report = app.add_subcommand("report", "summarize a results CSV");
  report->add_option("--results", results_path, "results CSV")->required()->check(CLI::ExistingFile)->envname("UGNN_RESULTS");
  report->add_option("--out", report_out, "directory for summary.txt and plot_data.csv")->envname("UGNN_OUT");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  if (*convert) {
    std::ifstream in(model_path);
    if (!in) throw ugnn::DataError("cannot open " + model_path);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ugnn::ConfigError(model_path + ": " + e.what());
    }
    ugnn::ModelSpec spec = ugnn::model_from_json(j);
    if (params_path.empty()) {
      spec = ugnn::init_params(std::move(spec), convert_seed);
    } else {
      std::ifstream blob(params_path, std::ios::binary);
      if (!blob) throw ugnn::DataError("cannot open " + params_path);
      ugnn::read_params(blob, spec);
    }
    const ugnn::ModelGraph g = ugnn::graphize(spec);
    std::ostringstream os;
    ugnn::write_model_graph(os, g);
    ugnn::io::atomic_write(graph_out, os.str());
    std::cout << fmt::format("{}: {} nodes, {} edges -> {}\n", g.model_id, g.nodes.size(), g.edges.size(), graph_out);
    return kOk;
  }

  if (*cluster) {
    PlanOptions opts = cluster_opts;
    if (opts.out.empty()) throw ugnn::ConfigError("cluster: --out <csv> is required");
    const std::string csv_path = opts.out;
    opts.out = ".";  // the CSV path is not a run directory
    const ugnn::ExperimentPlan plan = resolve_plan(opts);
    auto train_set = ugnn::load_idx(plan.data.train_images, plan.data.train_labels, ugnn::Split::train, plan.data.num_classes);
    auto test_set = ugnn::load_idx(plan.data.test_images, plan.data.test_labels, ugnn::Split::test, train_set.num_classes);
    if (plan.data.train_limit && plan.data.train_limit < train_set.size()) {
      std::vector<std::size_t> rows(plan.data.train_limit);
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
      train_set = train_set.subset(rows);
    }
    if (plan.data.test_limit && plan.data.test_limit < test_set.size()) {
      std::vector<std::size_t> rows(plan.data.test_limit);
      for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
      test_set = test_set.subset(rows);
    }
    const ugnn::FoldData fd = ugnn::prepare_fold(plan, train_set, test_set, cluster_fold);
    std::ostringstream os;
    fd.clusters.write_csv(os);
    ugnn::io::atomic_write(csv_path, os.str());
    const auto sizes = fd.clusters.sizes();
    std::cout << fmt::format("{} samples in {} clusters, sizes {} -> {}\n", fd.clusters.assignment.size(), sizes.size(),
                             fmt::join(sizes, "/"), csv_path);
    return kOk;
  }

  if (*train) {
    const auto result = ugnn::train_experiment(resolve_plan(train_opts));
    print_training(result.training);
    return kOk;
  }

  if (*eval) {
    const auto plan = resolve_plan(eval_opts);
    const auto result = ugnn::evaluate_experiment(plan);
    print_rows(result.rows);
    std::cout << "results: " << (std::filesystem::path(plan.output) / "results.csv").string() << "\n";
    return kOk;
  }

  if (*run) {
    const auto plan = resolve_plan(run_opts);
    const auto result = ugnn::run_experiment(plan);
    print_training(result.training);
    print_rows(result.rows);
    std::cout << "results: " << (std::filesystem::path(plan.output) / "results.csv").string() << "\n";
    return kOk;
  }

  if (*report) {
    std::ifstream in(results_path);
    if (!in) throw ugnn::DataError("cannot open " + results_path);
    const ugnn::Report rep = ugnn::make_report(ugnn::read_results_csv(in));
    std::ostringstream summary, plot;
    ugnn::write_report(summary, rep);
    ugnn::write_plot_data(plot, rep);
    std::cout << summary.str();
    if (!report_out.empty()) {
      const std::filesystem::path dir(report_out);
      ugnn::io::atomic_write((dir / "summary.txt").string(), summary.str());
      ugnn::io::atomic_write((dir / "plot_data.csv").string(), plot.str());
    }
    return kOk;
  }
  return kOther;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return dispatch(argc, argv);
  } catch (const ugnn::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfig;
  } catch (const ugnn::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const ugnn::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
