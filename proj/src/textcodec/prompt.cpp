#include "granmoe/textcodec/prompt.hpp"

#include <algorithm>

#include "granmoe/errors.hpp"

namespace granmoe {

const std::vector<PromptTemplate>& prompt_templates() {
  using T = TaskToken;
  static const std::vector<PromptTemplate> table{
      {T::cls, 1, 1, "Choose the best category describe the image from: {class names}. Only output the category.", true},
      {T::vqa, 1, 1, "{question}.", true},
      {T::vg, 1, 1, "{object describing}.", true},
      {T::seg, 1, 1, "Can you segment the {class name} in this image?", true},
      {T::seg, 2, 1, "Please segment the {class name} in this image.", true},
      {T::seg, 3, 1, "What is {class name} in this image? Please respond with segmentation mask.", true},
      {T::seg, 4, 1, "What is {class name} in this image? Please output segmentation mask.", true},
      // Change detection shares the [SEG] token; the doubled period is part of the wording.
      {T::seg, 5, 2, "Please Segment the building area in the images that have changed in the second image..", true},
      {T::ccd, 1, 2, "Please briefly describe the changes in these two images.", true},
      {T::ccd, 2, 2, "What are the differences between these two images?", true},
      {T::ccd, 3, 2, "Can you describe the key changes in the second image compared to the first?", true},
      {T::ccd, 4, 2, "What visual changes can be observed between the two images?", true},
      {T::ccd, 5, 2, "Highlight the main differences between the two images.", true},
      {T::ccd, 6, 2, "What has been altered in the second image compared to the first one?", true},
      {T::ccd, 7, 2, "Describe any noticeable transformations in these images.", true},
      {T::ccd, 8, 2, "What specific details have changed from the first image to the second?", true},
      {T::ccd, 9, 2, "Point out the adjustments made between these two images.", true},
      {T::ccd, 10, 2, "What are the most significant changes visible in the images?", true},
      // No published evaluation wording exists for these two tasks.
      {T::cap, 1, 1, "Describe this image briefly.", false},
      {T::ref, 1, 1, "Describe the object in the region {bbox}.", false},
  };
  return table;
}

const PromptTemplate& find_template(TaskToken task, int template_id) {
  for (const auto& t : prompt_templates())
    if (t.task == task && t.id == template_id) return t;
  throw TemplateError("no template " + std::to_string(template_id) + " for " + std::string(to_string(task)));
}

std::vector<std::string> template_slots(const PromptTemplate& tmpl) {
  std::vector<std::string> slots;
  for (std::size_t open = tmpl.body.find('{'); open != std::string_view::npos;
       open = tmpl.body.find('{', open + 1)) {
    const std::size_t close = tmpl.body.find('}', open);
    slots.emplace_back(tmpl.body.substr(open + 1, close - open - 1));
  }
  return slots;
}

std::string build_prompt(TaskToken task, int template_id, const SlotMap& slots, int images) {
  const PromptTemplate& tmpl = find_template(task, template_id);
  if (images != tmpl.image_count) {
    throw TemplateError(std::string(to_string(task)) + " template " + std::to_string(template_id) + " takes " +
                        std::to_string(tmpl.image_count) + " image(s), got " + std::to_string(images));
  }
  const auto names = template_slots(tmpl);
  for (const auto& [k, v] : slots) {
    if (std::find(names.begin(), names.end(), k) == names.end()) {
      throw TemplateError("template has no slot \"" + k + "\"");
    }
  }
  std::string out;
  for (int i = 0; i < images; ++i) out += i ? " <image>" : "<image>";
  out += '\n';
  out += to_string(task);
  out += ' ';
  std::size_t pos = 0;
  const std::string_view body = tmpl.body;
  while (pos < body.size()) {
    const std::size_t open = body.find('{', pos);
    if (open == std::string_view::npos) {
      out += body.substr(pos);
      break;
    }
    out += body.substr(pos, open - pos);
    const std::size_t close = body.find('}', open);
    const std::string name(body.substr(open + 1, close - open - 1));
    auto it = slots.find(name);
    if (it == slots.end()) throw TemplateError("missing slot \"" + name + "\"");
    out += it->second;
    pos = close + 1;
  }
  return out;
}

int strip_image_markers(std::string& prompt) {
  static constexpr std::string_view marker = "<image>";
  int n = 0;
  for (std::size_t pos = prompt.find(marker); pos != std::string::npos; pos = prompt.find(marker, pos)) {
    prompt.erase(pos, marker.size());
    ++n;
  }
  return n;
}

}  // namespace granmoe
