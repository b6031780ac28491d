#include "granmoe/cli/config.hpp"

#include <fstream>

#include "granmoe/datagen/datagen.hpp"
#include "granmoe/model/model.hpp"
#include "granmoe/training/training.hpp"

namespace granmoe {

using ordered_json = nlohmann::ordered_json;

ordered_json default_config() {
  DataKnobs train_data;
  train_data.scenes = 200;
  train_data.pairs = 40;
  DataKnobs eval_data = train_data;
  eval_data.scenes = 64;
  eval_data.pairs = 16;

  TrainConfig s1;
  s1.stage = 1;
  s1.lr = 3e-3;
  s1.steps = 1500;
  TrainConfig s2 = s1;
  s2.stage = 2;
  s2.variant = Variant::gmoe;
  s2.lr = 1e-3;
  s2.steps = 300;
  s2.quotas = {{TaskToken::cap, 32}, {TaskToken::cls, 32}, {TaskToken::vqa, 64}, {TaskToken::vg, 64},
               {TaskToken::ref, 32}, {TaskToken::seg, 64}, {TaskToken::ccd, 16}};

  ordered_json c;
  c["schema_version"] = kConfigSchemaVersion;
  c["model"] = ModelConfig::toy().to_json();
  c["data"] = train_data.to_json();
  c["eval_data"] = eval_data.to_json();
  c["stage1"] = s1.to_json();
  c["stage2"] = s2.to_json();
  c["eval"] = {{"max_new", 96}, {"bleu_smoothing", false}};
  return c;
}

void merge_into(ordered_json& base, const ordered_json& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (const auto& [k, v] : patch.items()) {
    // quota and task maps are replaced, not merged
    if (base.contains(k) && base[k].is_object() && v.is_object() && k != "quotas") {
      merge_into(base[k], v);
    } else {
      base[k] = v;
    }
  }
}

ordered_json load_config(const std::filesystem::path& path) {
  ordered_json c = default_config();
  if (path.empty()) return c;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  ordered_json file;
  try {
    file = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  if (!file.is_object()) throw ConfigError("config must be a JSON object");
  if (!file.contains("schema_version")) throw ConfigError("config is missing schema_version");
  if (file.at("schema_version") != kConfigSchemaVersion) {
    throw ConfigError("unsupported config schema_version " + file.at("schema_version").dump());
  }
  merge_into(c, file);
  return c;
}

void apply_override(ordered_json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like path.to.key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  ordered_json value;
  try {
    value = ordered_json::parse(raw);
  } catch (const nlohmann::json::parse_error&) {
    value = raw;
  }
  ordered_json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("empty key in override " + assignment);
    if (!node->is_object()) throw ConfigError("override path " + path + " runs through a non-object");
    if (dot == std::string::npos) {
      if (!node->contains(key)) throw ConfigError("unknown config key " + path);
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) throw ConfigError("unknown config key " + path);
    node = &(*node)[key];
    start = dot + 1;
  }
}

}  // namespace granmoe
