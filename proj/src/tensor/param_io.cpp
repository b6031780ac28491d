#include "granmoe/tensor/param_io.hpp"

#include <fstream>

namespace granmoe {

ordered_json params_to_json(const ParameterSet& params) {
  ordered_json tensors = ordered_json::array();
  params.for_each([&](const ParameterSet::Entry& e) {
    ordered_json t;
    t["name"] = e.name;
    t["shape"] = e.tensor.shape();
    t["trainable"] = e.trainable;
    const auto data = e.tensor.data();
    t["values"] = std::vector<double>(data.begin(), data.end());
    tensors.push_back(std::move(t));
  });
  return tensors;
}

ParameterSet params_from_json(const ordered_json& tensors) {
  if (!tensors.is_array()) throw DataError("parameter container: 'tensors' must be an array");
  ParameterSet params;
  for (const auto& t : tensors) {
    const auto shape = t.at("shape").get<Shape>();
    const auto values = t.at("values").get<std::vector<double>>();
    if (static_cast<Index>(values.size()) != shape_numel(shape)) {
      throw DataError("parameter container: tensor '" + t.at("name").get<std::string>() + "' has " +
                      std::to_string(values.size()) + " values for shape " + shape_string(shape));
    }
    Matrix m(shape_rows(shape), shape_cols(shape));
    std::copy(values.begin(), values.end(), m.data());
    params.add(t.at("name").get<std::string>(), Tensor(shape, std::move(m)), t.at("trainable").get<bool>());
  }
  return params;
}

ordered_json param_document(const ParameterSet& params, const ordered_json& meta) {
  ordered_json doc;
  doc["format"] = kParamFormat;
  doc["version"] = kParamFormatVersion;
  doc["meta"] = meta;
  doc["tensors"] = params_to_json(params);
  return doc;
}

ParamFile parse_param_document(const ordered_json& doc) {
  if (doc.value("format", std::string{}) != kParamFormat) throw DataError("not a granmoe parameter file");
  const int version = doc.at("version").get<int>();
  if (version != kParamFormatVersion) {
    throw DataError("unsupported parameter file version " + std::to_string(version));
  }
  return ParamFile{params_from_json(doc.at("tensors")), doc.value("meta", ordered_json::object())};
}

void write_param_file(const std::filesystem::path& path, const ParameterSet& params, const ordered_json& meta) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << param_document(params, meta).dump() << '\n';
}

ParamFile read_param_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  ordered_json doc;
  try {
    doc = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return parse_param_document(doc);
}

}  // namespace granmoe
