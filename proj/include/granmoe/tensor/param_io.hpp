#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "granmoe/tensor/tensor.hpp"

namespace granmoe {

using ordered_json = nlohmann::ordered_json;

inline constexpr const char* kParamFormat = "granmoe-params";
inline constexpr int kParamFormatVersion = 1;

// Parameter container: name -> shape, trainable flag and row-major values.
// Layout is described in docs/checkpoint-format.md.
ordered_json params_to_json(const ParameterSet& params);
ParameterSet params_from_json(const ordered_json& tensors);

struct ParamFile {
  ParameterSet params;
  ordered_json meta;
};

void write_param_file(const std::filesystem::path& path, const ParameterSet& params, const ordered_json& meta);
ParamFile read_param_file(const std::filesystem::path& path);

// Whole-document variants, used by training checkpoints that add sections.
ordered_json param_document(const ParameterSet& params, const ordered_json& meta);
ParamFile parse_param_document(const ordered_json& doc);

}  // namespace granmoe
