#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace granmoe {

// Task prefix tokens. Serialized as bracketed uppercase, e.g. "[SEG]".
enum class TaskToken { cap, cls, vqa, vg, ref, seg, ccd };

inline constexpr std::array<TaskToken, 7> kAllTasks{TaskToken::cap, TaskToken::cls, TaskToken::vqa, TaskToken::vg,
                                                    TaskToken::ref, TaskToken::seg, TaskToken::ccd};

enum class GranularityLevel { image = 0, region = 1, pixel = 2 };

inline constexpr std::array<GranularityLevel, 3> kAllLevels{GranularityLevel::image, GranularityLevel::region,
                                                            GranularityLevel::pixel};

std::string_view to_string(TaskToken task) noexcept;
std::string_view to_string(GranularityLevel level) noexcept;

// Accepts "[SEG]" as well as "SEG" / "seg".
std::optional<TaskToken> parse_task_token(std::string_view text) noexcept;
std::optional<GranularityLevel> parse_granularity(std::string_view text) noexcept;

// Fixed task -> expert mapping used by the training-free router.
GranularityLevel granularity_of(TaskToken task) noexcept;

struct TokenHit {
  TaskToken task;
  std::size_t offset;
};

// Every task token occurrence in the text, in order.
std::vector<TokenHit> find_task_tokens(std::string_view text);

enum class RouteMode { strict, lenient };

struct RouteResult {
  GranularityLevel level = GranularityLevel::image;
  std::optional<TaskToken> task;
  bool fallback = false;  // lenient mode could not route and chose image-level
  std::string warning;
};

// Strict routing: the prompt must carry exactly one task token, otherwise
// RoutingError is thrown.
GranularityLevel route_granularity(std::string_view prompt);
RouteResult route_granularity(std::string_view prompt, RouteMode mode);

}  // namespace granmoe
