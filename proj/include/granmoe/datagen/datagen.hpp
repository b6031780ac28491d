#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "granmoe/datagen/sample.hpp"
#include "granmoe/textcodec/bbox.hpp"
#include "granmoe/textcodec/mask.hpp"

namespace granmoe {

// Classes of the synthetic world; id 0 is background.
const LabelSet& scene_labels();

enum class Tone { bright, dark };
enum class ShapeKind { rectangle, ellipse };

std::string_view to_string(Tone t) noexcept;

struct PlacedShape {
  int label = 1;  // id in scene_labels()
  Tone tone = Tone::bright;
  ShapeKind kind = ShapeKind::rectangle;
  BBox box;  // tight, half-open pixel extents of the raster

  friend bool operator==(const PlacedShape&, const PlacedShape&) = default;
};

struct SceneKnobs {
  int canvas = 32;
  int patch_size = 8;
  int min_shapes = 1;
  int max_shapes = 3;
  int min_extent = 6;
  int max_extent = 16;

  nlohmann::ordered_json to_json() const;
  static SceneKnobs from_json(const nlohmann::ordered_json& j);
};

struct SceneSpec {
  int width = 0;
  int height = 0;
  std::uint64_t seed = 0;
  std::vector<PlacedShape> shapes;

  friend bool operator==(const SceneSpec&, const SceneSpec&) = default;
};

// Gray level (0..255) of a class/tone pair; every pair is distinct and
// brighter than any background pixel.
int shape_gray(int label, Tone tone);

// Pixels inside the shape (ellipses are inscribed in their nominal box).
std::vector<std::pair<int, int>> rasterize(const PlacedShape& s);

SceneSpec generate_scene(std::uint64_t seed, const SceneKnobs& knobs = {});

// Rendering and analytic ground truth.
Image render_image(const SceneSpec& scene);
Mask label_mask(const SceneSpec& scene);
Mask class_mask(const SceneSpec& scene, int label);  // {background, label}
std::string scene_class(const SceneSpec& scene);     // class of the largest shape
std::string position_word(const BBox& box, int width, int height);
std::string object_phrase(const PlacedShape& s);     // "the bright building"
std::string scene_caption(const SceneSpec& scene);

enum class Mutation { add, remove, move };
std::string_view to_string(Mutation m) noexcept;

struct ScenePair {
  SceneSpec before;
  SceneSpec after;
  Mutation mutation = Mutation::add;
  PlacedShape changed;     // the shape that was added, removed or moved (pre-move state)
  PlacedShape moved_to;    // post-move state (move only)
};

ScenePair mutate_scene(const SceneSpec& base, std::uint64_t seed, const SceneKnobs& knobs = {});
std::string change_caption(const ScenePair& pair);
Mask change_mask(const ScenePair& pair);  // symmetric difference; changed pixels carry the shape's label

struct SkipEntry {
  std::string scene_id;
  std::string task;
  std::string reason;
};

struct GeneratedSamples {
  std::vector<InstructionSample> samples;
  std::vector<SkipEntry> skipped;
};

// One sample per task per applicable object.
GeneratedSamples scene_to_samples(const SceneSpec& scene, const std::string& scene_id,
                                  const std::set<TaskToken>& tasks, int grid_n);
// [CCD] caption and, for building mutations, the change-detection [SEG] sample.
GeneratedSamples pair_to_samples(const ScenePair& pair, const std::string& pair_id,
                                 const std::set<TaskToken>& tasks, int grid_n);

struct DataKnobs {
  int scenes = 64;
  int pairs = 16;
  int grid_n = 8;
  std::set<TaskToken> tasks{TaskToken::cap, TaskToken::cls, TaskToken::vqa, TaskToken::vg,
                            TaskToken::ref, TaskToken::seg, TaskToken::ccd};
  SceneKnobs scene;

  nlohmann::ordered_json to_json() const;
  static DataKnobs from_json(const nlohmann::ordered_json& j);
};

GeneratedSamples generate_dataset(std::uint64_t seed, const DataKnobs& knobs);

// ---- files ----------------------------------------------------------------------

inline constexpr int kSampleSchemaVersion = 1;

// Plain-text graymap (P2, maxval 255); pixel = gray / 255.
void write_image_pgm(const std::filesystem::path& path, const Image& image);
// P2 graymap, or the "W H" ASCII grid (values read as 0..255 gray levels).
Image read_image_file(const std::filesystem::path& path);

nlohmann::ordered_json sample_to_json(const InstructionSample& s);

// Writes <dir>/<jsonl_name> and every referenced image under <dir>.
void export_dataset(const std::filesystem::path& dir, const std::vector<InstructionSample>& samples,
                    const std::string& jsonl_name = "data.jsonl");

struct IngestError {
  std::size_t line = 0;
  std::string id;
  std::string message;

  nlohmann::ordered_json to_json() const;
};

struct IngestResult {
  std::vector<InstructionSample> samples;
  std::vector<IngestError> errors;
};

// Image paths resolve against image_root. Bad records go to errors.
IngestResult ingest_jsonl(const std::filesystem::path& path, const std::filesystem::path& image_root);

// Records in export order; used for the error sidecar too.
void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::ordered_json>& records);

}  // namespace granmoe
