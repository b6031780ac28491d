#pragma once

#include <optional>
#include <string>
#include <vector>

#include "granmoe/model/model.hpp"
#include "granmoe/textcodec/task.hpp"

namespace granmoe {

// One instruction record: task, prompt (with "<image>" markers), target text
// and the image(s) it refers to.
struct InstructionSample {
  std::string id;
  TaskToken task = TaskToken::cap;
  std::vector<Image> images;
  std::vector<std::string> image_paths;  // relative to the dataset root, when known
  std::string prompt;
  std::string target;
  std::optional<GranularityLevel> granularity;
  std::string provenance = "synthetic";

  friend bool operator==(const InstructionSample&, const InstructionSample&) = default;
};

// Change tasks ([CCD] and the two-image [SEG] prompt) carry two images.
bool is_change_sample(const InstructionSample& s);

// Throws DataError when the record breaks an invariant (image count, route).
void validate_sample(const InstructionSample& s);

}  // namespace granmoe
