#include "granmoe/datagen/sample.hpp"

#include "granmoe/errors.hpp"

namespace granmoe {

namespace {

int count_markers(const std::string& prompt) {
  int n = 0;
  for (auto pos = prompt.find("<image>"); pos != std::string::npos; pos = prompt.find("<image>", pos + 1)) ++n;
  return n;
}

}  // namespace

bool is_change_sample(const InstructionSample& s) {
  if (s.task == TaskToken::ccd) return true;
  return s.task == TaskToken::seg && count_markers(s.prompt) == 2;
}

void validate_sample(const InstructionSample& s) {
  const std::string who = "sample '" + s.id + "': ";
  const auto hits = find_task_tokens(s.prompt);
  if (hits.size() != 1) throw DataError(who + "prompt must contain exactly one task token");
  if (hits.front().task != s.task) {
    throw DataError(who + "task " + std::string(to_string(s.task)) + " does not match prompt token " +
                    std::string(to_string(hits.front().task)));
  }
  const std::size_t want = s.task == TaskToken::ccd ? 2 : (s.task == TaskToken::seg ? 0 : 1);
  const int markers = count_markers(s.prompt);
  if (want == 2 && s.images.size() != 2) {
    throw DataError(who + "change task needs 2 images, got " + std::to_string(s.images.size()));
  }
  if (want == 1 && s.images.size() != 1) {
    throw DataError(who + "task needs 1 image, got " + std::to_string(s.images.size()));
  }
  if (s.images.empty() || s.images.size() > 2) throw DataError(who + "needs 1 or 2 images");
  if (markers != static_cast<int>(s.images.size())) {
    throw DataError(who + std::to_string(markers) + " image marker(s) for " + std::to_string(s.images.size()) +
                    " image(s)");
  }
  if (!s.granularity) throw DataError(who + "granularity level missing");
  if (*s.granularity != route_granularity(s.prompt)) {
    throw DataError(who + "granularity " + std::string(to_string(*s.granularity)) +
                    " disagrees with the router");
  }
}

}  // namespace granmoe
