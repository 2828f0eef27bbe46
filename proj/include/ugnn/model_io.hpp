#pragma once

// ModelSpec persistence: a JSON architecture config plus a raw parameter
// blob of little-endian f64 values (layer-major, weights then bias).

#include <iosfwd>
#include <string>

#include <nlohmann/json.hpp>

#include "ugnn/model_ir.hpp"

namespace ugnn {

nlohmann::json model_to_json(const ModelSpec& spec);
// Parameters are left empty; load them with read_params.
ModelSpec model_from_json(const nlohmann::json& j);

void write_params(std::ostream& out, const ModelSpec& spec);
void read_params(std::istream& in, ModelSpec& spec);

void save_model(const ModelSpec& spec, const std::string& config_path, const std::string& params_path);
ModelSpec load_model(const std::string& config_path, const std::string& params_path);

}  // namespace ugnn
