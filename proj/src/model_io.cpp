#include "ugnn/model_io.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ugnn/binary_io.hpp"
#include "ugnn/errors.hpp"

namespace ugnn {

using nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

}  // namespace

json model_to_json(const ModelSpec& spec) {
  json j;
  j["model_id"] = spec.model_id;
  j["input_shape"] = {spec.input_shape.channels, spec.input_shape.height, spec.input_shape.width};
  auto layers = json::array();
  for (const auto& l : spec.layers) {
    json jl;
    jl["kind"] = std::string(to_string(l.kind));
    switch (l.kind) {
      case LayerKind::conv2d:
        jl["kernel"] = {l.kernel_h, l.kernel_w};
        jl["stride"] = l.stride;
        jl["padding"] = l.padding;
        [[fallthrough]];
      case LayerKind::dense:
      case LayerKind::gnn_mp:
        jl["in"] = l.in;
        jl["out"] = l.out;
        break;
      case LayerKind::readout_mean:
        jl["in"] = l.in;
        break;
      case LayerKind::flatten:
        break;
    }
    if (l.kind != LayerKind::flatten) jl["activation"] = std::string(to_string(l.activation));
    layers.push_back(jl);
  }
  j["layers"] = layers;
  if (spec.graph) {
    auto entries = json::array();
    for (const auto& e : spec.graph->entries) entries.push_back({e.src, e.dst, e.coeff});
    j["graph"] = {{"num_nodes", spec.graph->num_nodes}, {"entries", entries}};
  }
  return j;
}

ModelSpec model_from_json(const json& j) {
  try {
    reject_unknown(j, {"model_id", "input_shape", "layers", "graph"}, "model config");
    ModelSpec spec;
    spec.model_id = j.at("model_id").get<std::string>();
    const auto& s = j.at("input_shape");
    spec.input_shape = {s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>()};
    for (const auto& jl : j.at("layers")) {
      reject_unknown(jl, {"kind", "in", "out", "kernel", "stride", "padding", "activation"}, "model '" + spec.model_id + "' layer");
      LayerSpec l;
      l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
      l.in = jl.value("in", std::size_t{0});
      l.out = l.kind == LayerKind::readout_mean ? l.in : jl.value("out", std::size_t{0});
      if (jl.contains("kernel")) {
        l.kernel_h = jl.at("kernel").at(0).get<std::size_t>();
        l.kernel_w = jl.at("kernel").at(1).get<std::size_t>();
      }
      l.stride = jl.value("stride", std::size_t{1});
      l.padding = jl.value("padding", std::size_t{0});
      l.activation = activation_from_string(jl.value("activation", std::string("identity")));
      spec.layers.push_back(l);
    }
    if (j.contains("graph")) {
      const auto& g = j.at("graph");
      reject_unknown(g, {"num_nodes", "entries", "grid", "norm"}, "model '" + spec.model_id + "' graph");
      if (g.contains("grid")) {
        const auto norm = g.value("norm", std::string("mean")) == "symmetric" ? AdjacencyNorm::symmetric : AdjacencyNorm::mean;
        spec.graph = grid_graph(g.at("grid").at(0).get<std::size_t>(), g.at("grid").at(1).get<std::size_t>(), norm);
      } else {
        FixedGraph fg;
        fg.num_nodes = g.at("num_nodes").get<std::size_t>();
        for (const auto& e : g.at("entries")) {
          fg.entries.push_back({e.at(0).get<std::size_t>(), e.at(1).get<std::size_t>(), e.at(2).get<double>()});
        }
        spec.graph = std::move(fg);
      }
    }
    validate(spec, false);
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

void write_params(std::ostream& out, const ModelSpec& spec) {
  validate(spec);
  for (double v : flatten_params(spec)) io::write_le<double>(out, v);
}

void read_params(std::istream& in, ModelSpec& spec) {
  std::vector<double> flat(spec.parameter_count());
  for (auto& v : flat) v = io::read_le<double>(in, "parameter blob for '" + spec.model_id + "'");
  if (in.peek() != std::char_traits<char>::eof()) {
    throw DataError("parameter blob for '" + spec.model_id + "': trailing bytes after " + std::to_string(flat.size()) + " values");
  }
  unflatten_params(spec, flat);
}

void save_model(const ModelSpec& spec, const std::string& config_path, const std::string& params_path) {
  io::atomic_write(config_path, model_to_json(spec).dump(2) + "\n");
  std::ostringstream blob;
  write_params(blob, spec);
  io::atomic_write(params_path, blob.str());
}

ModelSpec load_model(const std::string& config_path, const std::string& params_path) {
  std::ifstream cfg(config_path);
  if (!cfg) throw DataError("cannot open " + config_path);
  json j;
  try {
    j = json::parse(cfg);
  } catch (const json::exception& e) {
    throw ConfigError(config_path + ": " + e.what());
  }
  ModelSpec spec = model_from_json(j);
  std::ifstream blob(params_path, std::ios::binary);
  if (!blob) throw DataError("cannot open " + params_path);
  read_params(blob, spec);
  return spec;
}

}  // namespace ugnn
