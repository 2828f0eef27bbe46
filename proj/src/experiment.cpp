#include "ugnn/experiment.hpp"

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "ugnn/binary_io.hpp"
#include "ugnn/engine.hpp"
#include "ugnn/errors.hpp"
#include "ugnn/graphize.hpp"
#include "ugnn/model_io.hpp"
#include "ugnn/rng.hpp"
#include "ugnn/unified.hpp"

namespace ugnn {

namespace fs = std::filesystem;
using nlohmann::json;

ModelSpec build_model(const ModelConfig& cfg, std::size_t height, std::size_t width, std::size_t num_classes) {
  ModelSpec spec;
  spec.model_id = cfg.id;
  std::size_t features = 0;
  if (cfg.arch == "mlp") {
    spec.input_shape = {height * width, 1, 1};
    features = height * width;
  } else if (cfg.arch == "cnn") {
    if (cfg.conv.empty()) throw ConfigError("model '" + cfg.id + "': cnn needs at least one conv layer");
    spec.input_shape = {1, height, width};
    std::size_t channels = 1, h = height, w = width;
    for (const auto& c : cfg.conv) {
      spec.layers.push_back(LayerSpec::conv2d(channels, c.channels, c.kernel, c.stride, c.padding, cfg.activation));
      h = conv_output_extent(h, c.kernel, c.stride, c.padding);
      w = conv_output_extent(w, c.kernel, c.stride, c.padding);
      channels = c.channels;
    }
    spec.layers.push_back(LayerSpec::flatten());
    features = channels * h * w;
  } else if (cfg.arch == "gnn") {
    if (cfg.gnn_channels.empty()) throw ConfigError("model '" + cfg.id + "': gnn needs at least one message-passing layer");
    spec.input_shape = {1, height, width};
    spec.graph = grid_graph(height, width, cfg.norm);
    std::size_t channels = 1;
    for (std::size_t c : cfg.gnn_channels) {
      spec.layers.push_back(LayerSpec::gnn(channels, c, cfg.activation));
      channels = c;
    }
    spec.layers.push_back(LayerSpec::readout(channels));
    features = channels;
  } else {
    throw ConfigError("model '" + cfg.id + "': unknown arch '" + cfg.arch + "' (expected mlp, cnn or gnn)");
  }
  for (std::size_t h : cfg.hidden) {
    spec.layers.push_back(LayerSpec::dense(features, h, cfg.activation));
    features = h;
  }
  spec.layers.push_back(LayerSpec::dense(features, num_classes, Activation::identity));
  validate(spec, false);
  return spec;
}

std::vector<ModelConfig> default_roster() {
  std::vector<ModelConfig> r;
  r.push_back({.id = "mlp_small", .arch = "mlp", .hidden = {32}});
  r.push_back({.id = "mlp_wide", .arch = "mlp", .hidden = {64}});
  r.push_back({.id = "mlp_deep", .arch = "mlp", .hidden = {32, 16}});
  r.push_back({.id = "cnn_small", .arch = "cnn", .conv = {{4, 5, 2, 0}}});
  r.push_back({.id = "cnn_wide", .arch = "cnn", .conv = {{8, 5, 2, 0}}});
  r.push_back({.id = "cnn_deep", .arch = "cnn", .hidden = {32}, .conv = {{4, 3, 2, 0}, {8, 3, 2, 0}}});
  r.push_back({.id = "gnn_small", .arch = "gnn", .gnn_channels = {4}});
  r.push_back({.id = "gnn_wide", .arch = "gnn", .hidden = {16}, .gnn_channels = {8}});
  r.push_back({.id = "gnn_deep", .arch = "gnn", .gnn_channels = {4, 4}});
  r.push_back({.id = "gnn_sym", .arch = "gnn", .hidden = {16}, .gnn_channels = {4, 8}, .norm = AdjacencyNorm::symmetric});
  return r;
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

std::string resolve(const std::string& p, const fs::path& base) {
  if (p.empty()) return p;
  const fs::path path(p);
  if (path.is_absolute() || base.empty()) return path.lexically_normal().string();
  return fs::absolute(base / path).lexically_normal().string();
}

std::string to_string(PartitionMode m) {
  switch (m) {
    case PartitionMode::random: return "random";
    case PartitionMode::noniid: return "noniid";
    case PartitionMode::perturbation: return "perturbation";
  }
  return "?";
}

std::string to_string(RunModes m) {
  switch (m) {
    case RunModes::individual: return "individual";
    case RunModes::unified: return "unified";
    case RunModes::both: return "both";
  }
  return "?";
}

bool runs_individual(RunModes m) { return m != RunModes::unified; }
bool runs_unified(RunModes m) { return m != RunModes::individual; }

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j, {"id", "arch", "hidden", "conv", "channels", "norm", "activation", "cluster"}, "roster entry");
  ModelConfig m;
  m.id = j.at("id").get<std::string>();
  m.arch = j.at("arch").get<std::string>();
  m.hidden = j.value("hidden", std::vector<std::size_t>{});
  if (j.contains("conv")) {
    for (const auto& c : j.at("conv")) {
      reject_unknown(c, {"channels", "kernel", "stride", "padding"}, "model '" + m.id + "' conv layer");
      m.conv.push_back({c.value("channels", std::size_t{4}), c.value("kernel", std::size_t{3}), c.value("stride", std::size_t{1}),
                        c.value("padding", std::size_t{0})});
    }
  }
  m.gnn_channels = j.value("channels", std::vector<std::size_t>{});
  const auto norm = j.value("norm", std::string("mean"));
  if (norm != "mean" && norm != "symmetric") throw ConfigError("model '" + m.id + "': norm must be mean or symmetric");
  m.norm = norm == "mean" ? AdjacencyNorm::mean : AdjacencyNorm::symmetric;
  m.activation = activation_from_string(j.value("activation", std::string("relu")));
  if (j.contains("cluster")) m.cluster = j.at("cluster").get<std::size_t>();
  return m;
}

json model_config_to_json(const ModelConfig& m) {
  json j;
  j["id"] = m.id;
  j["arch"] = m.arch;
  j["hidden"] = m.hidden;
  if (m.arch == "cnn") {
    auto conv = json::array();
    for (const auto& c : m.conv) conv.push_back({{"channels", c.channels}, {"kernel", c.kernel}, {"stride", c.stride}, {"padding", c.padding}});
    j["conv"] = conv;
  }
  if (m.arch == "gnn") {
    j["channels"] = m.gnn_channels;
    j["norm"] = m.norm == AdjacencyNorm::mean ? "mean" : "symmetric";
  }
  j["activation"] = std::string(ugnn::to_string(m.activation));
  if (m.cluster) j["cluster"] = *m.cluster;
  return j;
}

}  // namespace

void ExperimentPlan::validate() const {
  if (folds < 1) throw ConfigError("plan: folds must be >= 1");
  if (k < 1) throw ConfigError("plan: k must be >= 1");
  if (roster.size() != k) {
    throw ConfigError("plan: roster has " + std::to_string(roster.size()) + " models but k = " + std::to_string(k) +
                      " (one model per cluster)");
  }
  for (const auto& m : roster) {
    if (m.cluster && *m.cluster >= k) throw ConfigError("plan: model '" + m.id + "' assigned to cluster " + std::to_string(*m.cluster));
  }
  for (std::size_t a = 0; a < roster.size(); ++a) {
    for (std::size_t b = a + 1; b < roster.size(); ++b) {
      if (roster[a].id == roster[b].id) throw ConfigError("plan: duplicate model id '" + roster[a].id + "'");
    }
  }
  if (partition == PartitionMode::perturbation && perturbations.size() != k) {
    throw ConfigError("plan: perturbation mode needs one perturbation per cluster");
  }
  if (pca_components < 1) throw ConfigError("plan: pca_components must be >= 1");
  if (data.train_images.empty() || data.train_labels.empty() || data.test_images.empty() || data.test_labels.empty()) {
    throw ConfigError("plan: data section needs train_images, train_labels, test_images and test_labels");
  }
  train.validate();
  if (!train.alpha.empty()) validate_alpha(train.alpha, k);
}

ExperimentPlan plan_from_json(const json& root, const fs::path& base_dir) {
  try {
    // A run's metadata.json embeds the plan it was produced from.
    const json& j = root.contains("plan") && root.contains("format") ? root.at("plan") : root;
    reject_unknown(j, {"data", "clusters", "roster", "train", "groups", "seed", "folds", "mode", "output"}, "plan");
    ExperimentPlan p;
    const json& d = j.at("data");
    reject_unknown(d, {"train_images", "train_labels", "test_images", "test_labels", "train_limit", "test_limit", "num_classes"}, "plan.data");
    p.data.train_images = resolve(d.at("train_images").get<std::string>(), base_dir);
    p.data.train_labels = resolve(d.at("train_labels").get<std::string>(), base_dir);
    p.data.test_images = resolve(d.at("test_images").get<std::string>(), base_dir);
    p.data.test_labels = resolve(d.at("test_labels").get<std::string>(), base_dir);
    p.data.train_limit = d.value("train_limit", std::size_t{0});
    p.data.test_limit = d.value("test_limit", std::size_t{0});
    p.data.num_classes = d.value("num_classes", std::size_t{0});

    if (j.contains("clusters")) {
      const json& c = j.at("clusters");
      reject_unknown(c, {"mode", "k", "perturbations", "pca_components"}, "plan.clusters");
      const auto mode = c.value("mode", std::string("perturbation"));
      if (mode == "random") p.partition = PartitionMode::random;
      else if (mode == "noniid") p.partition = PartitionMode::noniid;
      else if (mode == "perturbation") p.partition = PartitionMode::perturbation;
      else throw ConfigError("plan.clusters: unknown mode '" + mode + "'");
      p.k = c.value("k", std::size_t{3});
      for (const auto& name : c.value("perturbations", std::vector<std::string>{})) p.perturbations.push_back(perturbation_from_string(name));
      p.pca_components = c.value("pca_components", std::size_t{50});
    }
    if (p.partition == PartitionMode::perturbation && p.perturbations.empty() && p.k == 3) {
      p.perturbations = {Perturbation::plain, Perturbation::thin, Perturbation::thicken};
    }

    if (j.contains("roster")) {
      for (const auto& m : j.at("roster")) p.roster.push_back(model_config_from_json(m));
    } else {
      p.roster = default_roster();
    }

    if (j.contains("train")) {
      const json& t = j.at("train");
      reject_unknown(t, {"epochs", "batch_size", "learning_rate", "weight_decay", "beta1", "beta2", "eps", "schedule",
                         "min_lr_ratio", "alpha", "threads"}, "plan.train");
      p.train.epochs = t.value("epochs", p.train.epochs);
      p.train.batch_size = t.value("batch_size", p.train.batch_size);
      p.train.learning_rate = t.value("learning_rate", p.train.learning_rate);
      p.train.weight_decay = t.value("weight_decay", p.train.weight_decay);
      p.train.beta1 = t.value("beta1", p.train.beta1);
      p.train.beta2 = t.value("beta2", p.train.beta2);
      p.train.eps = t.value("eps", p.train.eps);
      const auto sched = t.value("schedule", std::string("cosine"));
      if (sched == "cosine") p.train.schedule = Schedule::cosine;
      else if (sched == "constant") p.train.schedule = Schedule::constant;
      else throw ConfigError("plan.train: unknown schedule '" + sched + "'");
      p.train.min_lr_ratio = t.value("min_lr_ratio", p.train.min_lr_ratio);
      p.train.alpha = t.value("alpha", std::vector<double>{});
      p.train.threads = t.value("threads", 1u);
    }
    if (j.contains("groups")) {
      const json& g = j.at("groups");
      reject_unknown(g, {"k_edge", "k_bias"}, "plan.groups");
      p.k_edge = g.value("k_edge", std::size_t{0});
      p.k_bias = g.value("k_bias", std::size_t{0});
    }
    p.seed = j.value("seed", std::uint64_t{0});
    p.folds = j.value("folds", std::size_t{1});
    const auto mode = j.value("mode", std::string("both"));
    if (mode == "individual") p.modes = RunModes::individual;
    else if (mode == "unified") p.modes = RunModes::unified;
    else if (mode == "both") p.modes = RunModes::both;
    else throw ConfigError("plan: mode must be individual, unified or both");
    p.output = j.value("output", std::string{});
    return p;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("plan: ") + e.what());
  }
}

json plan_to_json(const ExperimentPlan& p) {
  json j;
  j["data"] = {{"train_images", p.data.train_images}, {"train_labels", p.data.train_labels},
               {"test_images", p.data.test_images},   {"test_labels", p.data.test_labels},
               {"train_limit", p.data.train_limit},   {"test_limit", p.data.test_limit},
               {"num_classes", p.data.num_classes}};
  std::vector<std::string> perts;
  for (auto q : p.perturbations) perts.emplace_back(to_string(q));
  j["clusters"] = {{"mode", to_string(p.partition)}, {"k", p.k}, {"perturbations", perts}, {"pca_components", p.pca_components}};
  auto roster = json::array();
  for (const auto& m : p.roster) roster.push_back(model_config_to_json(m));
  j["roster"] = roster;
  j["train"] = {{"epochs", p.train.epochs},
                {"batch_size", p.train.batch_size},
                {"learning_rate", p.train.learning_rate},
                {"weight_decay", p.train.weight_decay},
                {"beta1", p.train.beta1},
                {"beta2", p.train.beta2},
                {"eps", p.train.eps},
                {"schedule", p.train.schedule == Schedule::cosine ? "cosine" : "constant"},
                {"min_lr_ratio", p.train.min_lr_ratio},
                {"alpha", p.train.resolved_alpha(p.k)},
                {"threads", p.train.threads}};
  j["groups"] = {{"k_edge", p.k_edge}, {"k_bias", p.k_bias}};
  j["seed"] = p.seed;
  j["folds"] = p.folds;
  j["mode"] = to_string(p.modes);
  j["output"] = p.output;
  return j;
}

ExperimentPlan load_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open plan " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return plan_from_json(j, fs::absolute(path).parent_path());
}

void write_results_csv(std::ostream& out, const std::vector<ResultRow>& rows) {
  out << "fold,model_id,arch,mode,mixed_acc,mixed_loss,cluster_accs\n";
  for (const auto& r : rows) {
    std::string accs;
    for (std::size_t k = 0; k < r.cluster_accs.size(); ++k) {
      if (k) accs += ';';
      accs += std::isnan(r.cluster_accs[k]) ? std::string("nan") : fmt::format("{:.6f}", r.cluster_accs[k]);
    }
    out << fmt::format("{},{},{},{},{:.6f},{:.6f},{}\n", r.fold, r.model_id, r.arch, r.mode, r.mixed_acc, r.mixed_loss, accs);
  }
}

std::uint64_t fold_seed(const ExperimentPlan& plan, std::size_t fold) { return derive_seed(plan.seed, fold); }

namespace {

enum SeedStream : std::uint64_t { kClusterStream = 1, kGroupStream = 2, kTrainStream = 3, kMixStream = 4, kTestSplitStream = 5, kInitStream = 100 };

struct LoadedData {
  Dataset train;
  Dataset test;
};

Dataset head(const Dataset& d, std::size_t limit) {
  if (limit == 0 || limit >= d.size()) return d;
  std::vector<std::size_t> rows(limit);
  for (std::size_t k = 0; k < limit; ++k) rows[k] = k;
  Dataset out = d.subset(rows);
  out.provenance = d.provenance + " | first " + std::to_string(limit);
  return out;
}

LoadedData load_data(const ExperimentPlan& plan) {
  LoadedData d;
  d.train = head(load_idx(plan.data.train_images, plan.data.train_labels, Split::train, plan.data.num_classes), plan.data.train_limit);
  d.test = head(load_idx(plan.data.test_images, plan.data.test_labels, Split::test, plan.data.num_classes), plan.data.test_limit);
  if (d.train.height != d.test.height || d.train.width != d.test.width) throw DataError("train and test image sizes differ");
  const std::size_t classes = std::max(d.train.num_classes, d.test.num_classes);
  d.train.num_classes = classes;
  d.test.num_classes = classes;
  if (classes < 2) throw DataError("datasets need at least 2 classes");
  return d;
}

std::size_t cluster_of(const ExperimentPlan& plan, std::size_t model) { return plan.roster[model].cluster.value_or(model); }

fs::path fold_dir(const ExperimentPlan& plan, std::size_t fold) { return fs::path(plan.output) / ("fold_" + std::to_string(fold)); }

std::string hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::string to_text(const auto& writer) {
  std::ostringstream os;
  writer(os);
  return os.str();
}

TrainingSummary summarize(std::size_t fold, const std::string& id, const std::string& mode, const TrainTrace& trace, std::size_t idx) {
  TrainingSummary s;
  s.fold = fold;
  s.model_id = id;
  s.mode = mode;
  for (const auto& e : trace.epochs) s.all_finite = s.all_finite && std::isfinite(e.model_loss[idx]) && std::isfinite(e.total_loss);
  if (!trace.epochs.empty()) {
    s.final_loss = trace.epochs.back().model_loss[idx];
    s.final_train_acc = trace.epochs.back().model_train_acc[idx];
  }
  return s;
}

}  // namespace

FoldData prepare_fold(const ExperimentPlan& plan, const Dataset& train, const Dataset& test, std::size_t fold) {
  const std::uint64_t seed = fold_seed(plan, fold);
  FoldData fd;
  const std::uint64_t cluster_seed = derive_seed(seed, kClusterStream);
  fd.clusters = plan.partition == PartitionMode::noniid ? cluster_noniid(train, plan.k, cluster_seed, plan.pca_components)
                                                        : cluster_random(train, plan.k, cluster_seed);
  const auto members = fd.clusters.members();
  for (std::size_t c = 0; c < plan.k; ++c) {
    if (members[c].empty()) throw DataError("fold " + std::to_string(fold) + ": cluster " + std::to_string(c) + " is empty");
    fd.train.push_back(train.subset(members[c]));
  }
  switch (plan.partition) {
    case PartitionMode::perturbation:
      for (std::size_t c = 0; c < plan.k; ++c) {
        fd.train[c] = perturb(fd.train[c], plan.perturbations[c]);
        fd.test.push_back(perturb(test, plan.perturbations[c]));
      }
      break;
    case PartitionMode::random: {
      const auto split = cluster_random(test, plan.k, derive_seed(seed, kTestSplitStream)).members();
      for (const auto& rows : split) fd.test.push_back(test.subset(rows));
      break;
    }
    case PartitionMode::noniid: {
      const auto routed = fd.clusters.route(test);
      std::vector<std::vector<std::size_t>> split(plan.k);
      for (std::size_t s = 0; s < routed.size(); ++s) split[routed[s]].push_back(s);
      for (const auto& rows : split) fd.test.push_back(test.subset(rows));
      break;
    }
  }
  fd.mixed = mixed_test(fd.test, derive_seed(seed, kMixStream));
  return fd;
}

ExperimentResult train_experiment(const ExperimentPlan& plan) {
  plan.validate();
  if (plan.output.empty()) throw ConfigError("plan: output directory not set");
  const LoadedData data = load_data(plan);
  const std::size_t m = plan.roster.size();
  ExperimentResult result;
  json folds_meta = json::array();

  for (std::size_t fold = 0; fold < plan.folds; ++fold) {
    const auto context = [&](const std::string& what) { return "fold " + std::to_string(fold) + ": " + what; };
    try {
      const std::uint64_t seed = fold_seed(plan, fold);
      const fs::path dir = fold_dir(plan, fold);
      const FoldData fd = prepare_fold(plan, data.train, data.test, fold);
      io::atomic_write((dir / "clusters.csv").string(), to_text([&](std::ostream& os) { fd.clusters.write_csv(os); }));

      std::vector<ModelSpec> init;
      std::vector<std::uint64_t> checksums;
      for (std::size_t i = 0; i < m; ++i) {
        ModelSpec spec = build_model(plan.roster[i], data.train.height, data.train.width, data.train.num_classes);
        spec = init_params(std::move(spec), derive_seed(seed, kInitStream + i));
        save_model(spec, (dir / "init" / (spec.model_id + ".json")).string(), (dir / "init" / (spec.model_id + ".params")).string());
        checksums.push_back(params_checksum(spec));
        init.push_back(std::move(spec));
      }

      TrainConfig cfg = plan.train;
      cfg.seed = derive_seed(seed, kTrainStream);

      if (runs_individual(plan.modes)) {
        cfg.mode = TrainMode::individual;
        for (std::size_t i = 0; i < m; ++i) {
          if (params_checksum(init[i]) != checksums[i]) throw NumericError(context("initial parameters diverged before training"));
          const auto res = train_individual(init[i], fd.train[cluster_of(plan, i)].labeled(), cfg, i);
          const std::string id = init[i].model_id;
          save_model(res.model, (dir / "individual" / (id + ".json")).string(), (dir / "individual" / (id + ".params")).string());
          io::atomic_write((dir / "individual" / ("trace_" + id + ".csv")).string(),
                           to_text([&](std::ostream& os) { res.trace.write_csv(os); }));
          result.training.push_back(summarize(fold, id, "individual", res.trace, 0));
        }
      }

      if (runs_unified(plan.modes)) {
        cfg.mode = TrainMode::unified;
        std::vector<ModelGraph> graphs;
        for (std::size_t i = 0; i < m; ++i) {
          if (params_checksum(init[i]) != checksums[i]) throw NumericError(context("initial parameters diverged before graph encoding"));
          graphs.push_back(graphize(init[i]));
        }
        UnifiedGraph u = disjoint_union(graphs);
        const std::size_t k_edge = plan.k_edge == 0 ? u.total_edges() : plan.k_edge;
        const std::size_t k_bias = plan.k_bias == 0 ? u.total_nodes() : plan.k_bias;
        u = assign_groups(std::move(u), k_edge, k_bias, derive_seed(seed, kGroupStream));
        std::vector<LabeledSet> clusters;
        for (std::size_t i = 0; i < m; ++i) clusters.push_back(fd.train[cluster_of(plan, i)].labeled());
        const auto res = train_unified(u, init_identityish(k_edge, k_bias), clusters, cfg);
        io::atomic_write((dir / "unified" / "graph.ugu").string(), to_text([&](std::ostream& os) { write_unified_graph(os, u); }));
        io::atomic_write((dir / "unified" / "theta.bin").string(), to_text([&](std::ostream& os) { write_theta(os, res.theta); }));
        io::atomic_write((dir / "unified" / "trace.csv").string(), to_text([&](std::ostream& os) { res.trace.write_csv(os); }));
        for (std::size_t i = 0; i < m; ++i) result.training.push_back(summarize(fold, init[i].model_id, "unified", res.trace, i));
      }

      result.init_checksums.push_back(checksums);
      json fm;
      fm["fold"] = fold;
      fm["seed"] = seed;
      fm["cluster_sizes"] = fd.clusters.sizes();
      fm["pca_components"] = fd.clusters.pca_components;
      json cs;
      for (std::size_t i = 0; i < m; ++i) cs[init[i].model_id] = hex(checksums[i]);
      fm["init_checksums"] = cs;
      folds_meta.push_back(fm);
    } catch (const ConfigError& e) {
      throw ConfigError(context(e.what()));
    } catch (const DataError& e) {
      throw DataError(context(e.what()));
    } catch (const NumericError& e) {
      throw NumericError(context(e.what()));
    }
  }

  json meta;
  meta["format"] = "ugnn-run";
  meta["version"] = 1;
  meta["plan"] = plan_to_json(plan);
  meta["folds"] = folds_meta;
  meta["num_classes"] = data.train.num_classes;
  meta["image_shape"] = {data.train.height, data.train.width};
  meta["softsign"] = {{"denominator_floor", kDenominatorFloor}, {"act_scale_floor", kActScaleFloor}};
  io::atomic_write((fs::path(plan.output) / "metadata.json").string(), meta.dump(2) + "\n");
  return result;
}

ExperimentResult evaluate_experiment(const ExperimentPlan& plan) {
  plan.validate();
  const LoadedData data = load_data(plan);
  const std::size_t m = plan.roster.size();
  ExperimentResult result;
  const auto eval_all = [&](const ForwardFn& fn, const FoldData& fd, ResultRow& row) {
    const EvalResult mixed = evaluate(fn, fd.mixed.labeled());
    row.mixed_acc = mixed.accuracy;
    row.mixed_loss = mixed.mean_loss;
    for (const auto& t : fd.test) {
      row.cluster_accs.push_back(t.size() == 0 ? std::nan("") : evaluate(fn, t.labeled()).accuracy);
    }
  };
  for (std::size_t fold = 0; fold < plan.folds; ++fold) {
    const fs::path dir = fold_dir(plan, fold);
    const FoldData fd = prepare_fold(plan, data.train, data.test, fold);
    std::vector<ResultRow> individual_rows, unified_rows;
    if (runs_individual(plan.modes)) {
      for (std::size_t i = 0; i < m; ++i) {
        const std::string& id = plan.roster[i].id;
        const ModelSpec spec = load_model((dir / "individual" / (id + ".json")).string(), (dir / "individual" / (id + ".params")).string());
        ResultRow row{fold, id, plan.roster[i].arch, "individual", 0.0, 0.0, {}};
        eval_all(dense_model_fn(spec), fd, row);
        individual_rows.push_back(std::move(row));
      }
    }
    if (runs_unified(plan.modes)) {
      std::ifstream gin(dir / "unified" / "graph.ugu", std::ios::binary);
      std::ifstream tin(dir / "unified" / "theta.bin", std::ios::binary);
      if (!gin || !tin) throw DataError("fold " + std::to_string(fold) + ": unified artifacts missing under " + dir.string());
      const UnifiedGraph u = read_unified_graph(gin);
      const ThetaParams theta = read_theta(tin);
      const Engine engine(u, plan.train.threads);
      for (std::size_t i = 0; i < m; ++i) {
        ResultRow row{fold, plan.roster[i].id, plan.roster[i].arch, "unified", 0.0, 0.0, {}};
        eval_all(unified_model_fn(engine, theta, i), fd, row);
        unified_rows.push_back(std::move(row));
      }
    }
    for (std::size_t i = 0; i < m; ++i) {
      if (i < individual_rows.size()) result.rows.push_back(individual_rows[i]);
      if (i < unified_rows.size()) result.rows.push_back(unified_rows[i]);
    }
  }
  io::atomic_write((fs::path(plan.output) / "results.csv").string(),
                   to_text([&](std::ostream& os) { write_results_csv(os, result.rows); }));
  return result;
}

ExperimentResult run_experiment(const ExperimentPlan& plan) {
  ExperimentResult trained = train_experiment(plan);
  ExperimentResult evaluated = evaluate_experiment(plan);
  evaluated.training = std::move(trained.training);
  evaluated.init_checksums = std::move(trained.init_checksums);
  return evaluated;
}

std::vector<ResultRow> read_results_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw DataError("results CSV: empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "fold,model_id,arch,mode,mixed_acc,mixed_loss,cluster_accs") {
    throw DataError("results CSV line 1: unexpected header '" + line + "'");
  }
  std::vector<ResultRow> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fail = [&](const std::string& why) { return DataError("results CSV line " + std::to_string(line_no) + ": " + why); };
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) f.push_back(field);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 7) throw fail("expected 7 fields, got " + std::to_string(f.size()));
    const auto number = [&](const std::string& s) {
      try {
        std::size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw fail("bad number '" + s + "'");
        return v;
      } catch (const std::logic_error&) {
        throw fail("bad number '" + s + "'");
      }
    };
    ResultRow r;
    r.fold = static_cast<std::size_t>(number(f[0]));
    r.model_id = f[1];
    r.arch = f[2];
    r.mode = f[3];
    if (r.mode != "individual" && r.mode != "unified") throw fail("mode must be individual or unified");
    r.mixed_acc = number(f[4]);
    r.mixed_loss = number(f[5]);
    if (!(r.mixed_acc >= 0.0 && r.mixed_acc <= 1.0)) throw fail("accuracy outside [0, 1]");
    std::stringstream accs(f[6]);
    while (std::getline(accs, field, ';')) r.cluster_accs.push_back(field == "nan" ? std::nan("") : number(field));
    rows.push_back(std::move(r));
  }
  return rows;
}

Report make_report(const std::vector<ResultRow>& rows) {
  Report rep;
  std::vector<std::pair<std::string, std::string>> order;  // (model_id, arch) by first appearance
  std::map<std::pair<std::string, std::string>, std::vector<double>> acc;
  for (const auto& r : rows) {
    if (std::find_if(order.begin(), order.end(), [&](const auto& o) { return o.first == r.model_id; }) == order.end()) {
      order.emplace_back(r.model_id, r.arch);
    }
    acc[{r.model_id, r.mode}].push_back(r.mixed_acc);
  }
  const auto stats = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::pair{mean, std::sqrt(var / static_cast<double>(v.size()))};
  };
  for (const auto& [id, arch] : order) {
    PairedDelta pair{id, arch};
    bool have_ind = false, have_uni = false;
    for (const char* mode : {"individual", "unified"}) {
      const auto it = acc.find({id, mode});
      if (it == acc.end()) continue;
      const auto [mean, sd] = stats(it->second);
      rep.summaries.push_back({id, arch, mode, it->second.size(), mean, sd});
      if (std::string(mode) == "individual") {
        have_ind = true;
        pair.individual_mean = mean;
      } else {
        have_uni = true;
        pair.unified_mean = mean;
      }
    }
    pair.complete = have_ind && have_uni;
    if (pair.complete) pair.delta = pair.unified_mean - pair.individual_mean;
    rep.pairs.push_back(pair);
  }
  return rep;
}

void write_report(std::ostream& out, const Report& r) {
  out << fmt::format("{:<16} {:<6} {:<11} {:>5} {:>9} {:>9}\n", "model_id", "arch", "mode", "folds", "mean_acc", "std_acc");
  for (const auto& s : r.summaries) {
    out << fmt::format("{:<16} {:<6} {:<11} {:>5} {:>9.4f} {:>9.4f}\n", s.model_id, s.arch, s.mode, s.folds, s.mean, s.stddev);
  }
  out << "\n" << fmt::format("{:<16} {:<6} {:>10} {:>10} {:>9}\n", "model_id", "arch", "individual", "unified", "delta");
  for (const auto& p : r.pairs) {
    if (p.complete) {
      out << fmt::format("{:<16} {:<6} {:>10.4f} {:>10.4f} {:>+9.4f}\n", p.model_id, p.arch, p.individual_mean, p.unified_mean, p.delta);
    } else {
      out << fmt::format("{:<16} {:<6} {:>10} {:>10} {:>9}\n", p.model_id, p.arch, "-", "-", "incomplete");
    }
  }
}

void write_plot_data(std::ostream& out, const Report& r) {
  out << "model_id,arch,mode,mean_acc,std_acc,folds\n";
  for (const auto& s : r.summaries) out << fmt::format("{},{},{},{:.6f},{:.6f},{}\n", s.model_id, s.arch, s.mode, s.mean, s.stddev, s.folds);
}

}  // namespace ugnn
