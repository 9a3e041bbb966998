#pragma once

#include "ctxseg/common.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace ctxseg {

nlohmann::json load_json_file(const std::string& path);
void write_json_file(const std::string& path, const nlohmann::json& j);

// Sets a dotted path ("train.lr") to a value parsed as JSON when possible,
// else kept as a string.
void set_json_path(nlohmann::json& j, const std::string& dotted_path, const std::string& value);

// Environment overrides: CTXSEG_train__lr=0.01 -> train.lr = 0.01.
void apply_env_overrides(nlohmann::json& j, const std::string& prefix = "CTXSEG_");

// --set a.b=c overrides, applied after the environment.
void apply_set_overrides(nlohmann::json& j, const std::vector<std::string>& sets);

// Layering: file < environment < flags. Returns the resolved config.
nlohmann::json resolve_config(const std::string& path, const std::vector<std::string>& sets);

// Stable content hash of the canonical (sorted-key) dump.
std::string config_hash(const nlohmann::json& j);

}  // namespace ctxseg
