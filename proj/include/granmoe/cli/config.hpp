#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace granmoe {

inline constexpr int kConfigSchemaVersion = 1;

// Bad config or override; the CLI maps it to exit code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Toy defaults for every section (model, data, eval_data, stage1, stage2, eval).
nlohmann::ordered_json default_config();

// Defaults overlaid with the file (deep merge). Empty path = defaults only.
nlohmann::ordered_json load_config(const std::filesystem::path& path);

// "a.b.c=value": value parsed as JSON when possible, otherwise kept as a string.
void apply_override(nlohmann::ordered_json& config, const std::string& assignment);

void merge_into(nlohmann::ordered_json& base, const nlohmann::ordered_json& patch);

}  // namespace granmoe
