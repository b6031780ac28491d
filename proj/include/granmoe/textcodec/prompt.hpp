#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "granmoe/textcodec/task.hpp"

namespace granmoe {

inline constexpr int kPromptTableVersion = 1;

struct PromptTemplate {
  TaskToken task;
  int id;           // 1-based within the task
  int image_count;  // number of "<image>" markers
  std::string_view body;
  bool reference_wording;  // false for the two locally written templates
};

const std::vector<PromptTemplate>& prompt_templates();
const PromptTemplate& find_template(TaskToken task, int template_id);

// "{name}" placeholders in the template body, in order of appearance.
std::vector<std::string> template_slots(const PromptTemplate& tmpl);

using SlotMap = std::map<std::string, std::string, std::less<>>;

// "<image>[ <image>]\n[TOK] body" with slots substituted.
std::string build_prompt(TaskToken task, int template_id, const SlotMap& slots, int images);

// Removes "<image>" markers and returns how many were present.
int strip_image_markers(std::string& prompt);

}  // namespace granmoe
