#include "granmoe/textcodec/task.hpp"

#include <algorithm>
#include <cctype>

#include "granmoe/errors.hpp"

namespace granmoe {

std::string_view to_string(TaskToken task) noexcept {
  switch (task) {
    case TaskToken::cap: return "[CAP]";
    case TaskToken::cls: return "[CLS]";
    case TaskToken::vqa: return "[VQA]";
    case TaskToken::vg: return "[VG]";
    case TaskToken::ref: return "[REF]";
    case TaskToken::seg: return "[SEG]";
    case TaskToken::ccd: return "[CCD]";
  }
  return "[?]";
}

std::string_view to_string(GranularityLevel level) noexcept {
  switch (level) {
    case GranularityLevel::image: return "image";
    case GranularityLevel::region: return "region";
    case GranularityLevel::pixel: return "pixel";
  }
  return "?";
}

std::optional<TaskToken> parse_task_token(std::string_view text) noexcept {
  std::string upper;
  for (char c : text) upper.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  if (upper.size() < 2 || upper.front() != '[') upper = "[" + upper + "]";
  for (TaskToken t : kAllTasks)
    if (to_string(t) == upper) return t;
  return std::nullopt;
}

std::optional<GranularityLevel> parse_granularity(std::string_view text) noexcept {
  for (GranularityLevel l : kAllLevels)
    if (to_string(l) == text) return l;
  return std::nullopt;
}

GranularityLevel granularity_of(TaskToken task) noexcept {
  switch (task) {
    case TaskToken::cap:
    case TaskToken::cls:
    case TaskToken::vqa:
    case TaskToken::ccd: return GranularityLevel::image;
    case TaskToken::vg:
    case TaskToken::ref: return GranularityLevel::region;
    case TaskToken::seg: return GranularityLevel::pixel;
  }
  return GranularityLevel::image;
}

std::vector<TokenHit> find_task_tokens(std::string_view text) {
  std::vector<TokenHit> hits;
  for (std::size_t pos = text.find('['); pos != std::string_view::npos; pos = text.find('[', pos + 1)) {
    for (TaskToken t : kAllTasks) {
      const auto tok = to_string(t);
      if (text.substr(pos, tok.size()) == tok) {
        hits.push_back({t, pos});
        break;
      }
    }
  }
  return hits;
}

RouteResult route_granularity(std::string_view prompt, RouteMode mode) {
  const auto hits = find_task_tokens(prompt);
  if (hits.size() == 1) return RouteResult{granularity_of(hits[0].task), hits[0].task, false, {}};
  const std::string problem = hits.empty() ? "prompt carries no task token"
                                           : "prompt carries " + std::to_string(hits.size()) + " task tokens";
  if (mode == RouteMode::strict) throw RoutingError(problem);
  return RouteResult{GranularityLevel::image, std::nullopt, true, problem + "; routed to image-level"};
}

GranularityLevel route_granularity(std::string_view prompt) {
  return route_granularity(prompt, RouteMode::strict).level;
}

}  // namespace granmoe
