#pragma once

#include <string>

#include "circuitlab/model.hpp"
#include "json.hpp"

namespace circuitlab {

nlohmann::json config_to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

/// {format_version, config, params: [{name, shape, data}]}. Doubles are
/// written with round-trip precision, so load(save(p)) == p bit for bit.
nlohmann::json checkpoint_to_json(const Parameters& p);
Parameters checkpoint_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, const Parameters& p);
/// Throws std::runtime_error when the file is missing or malformed.
Parameters load_checkpoint(const std::string& path);

}  // namespace circuitlab
