#include "granmoe/textcodec/bbox.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <optional>

#include "granmoe/errors.hpp"
#include "granmoe/textcodec/task.hpp"

namespace granmoe {

namespace {

int normalize_coord(int c, int extent) {
  // Integer form of round-half-away-from-zero for non-negative values.
  const long long n = (200LL * c + extent) / (2LL * extent);
  return static_cast<int>(std::clamp<long long>(n, 0, 100));
}

struct TupleScan {
  std::optional<NormalizedBBox> box;
  std::size_t end = 0;
  std::string error;
  std::size_t error_at = 0;
};

void skip_space(std::string_view t, std::size_t& i) {
  while (i < t.size() && (t[i] == ' ' || t[i] == '\t')) ++i;
}

// Parses "[a, b, c, d]" starting at t[start] == '['.
TupleScan scan_tuple(std::string_view t, std::size_t start) {
  TupleScan s;
  std::array<int, 4> v{};
  std::array<std::size_t, 4> at{};
  std::size_t i = start + 1;
  for (int k = 0; k < 4; ++k) {
    skip_space(t, i);
    at[k] = i;
    if (i >= t.size() || !std::isdigit(static_cast<unsigned char>(t[i]))) {
      s.error = "expected a non-negative integer in box tuple";
      s.error_at = i;
      return s;
    }
    long long n = 0;
    while (i < t.size() && std::isdigit(static_cast<unsigned char>(t[i]))) {
      n = n * 10 + (t[i] - '0');
      if (n > 1000000) break;
      ++i;
    }
    if (n > 100) {
      s.error = "box coordinate " + std::to_string(n) + " outside [0, 100]";
      s.error_at = at[k];
      return s;
    }
    v[k] = static_cast<int>(n);
    skip_space(t, i);
    const char want = k < 3 ? ',' : ']';
    if (i >= t.size() || t[i] != want) {
      s.error = std::string("expected '") + want + "' in box tuple";
      s.error_at = i;
      return s;
    }
    ++i;
  }
  if (v[0] > v[2] || v[1] > v[3]) {
    s.error = "inverted box corners";
    s.error_at = start;
    return s;
  }
  s.box = NormalizedBBox{v[0], v[1], v[2], v[3]};
  s.end = i;
  return s;
}

bool is_task_token_at(std::string_view t, std::size_t pos) {
  for (const auto& hit : find_task_tokens(t.substr(pos, 5)))
    if (hit.offset == 0) return true;
  return false;
}

}  // namespace

NormalizedBBox normalize_bbox(const BBox& box, int img_w, int img_h) {
  if (img_w <= 0 || img_h <= 0) throw DegenerateInputError("normalize_bbox: zero-sized image");
  if (box.x1 < 0 || box.y1 < 0 || box.x1 > box.x2 || box.y1 > box.y2 || box.x2 > img_w || box.y2 > img_h) {
    throw DimensionError("normalize_bbox: box outside " + std::to_string(img_w) + "x" + std::to_string(img_h) +
                         " image");
  }
  return NormalizedBBox{normalize_coord(box.x1, img_w), normalize_coord(box.y1, img_h), normalize_coord(box.x2, img_w),
                        normalize_coord(box.y2, img_h)};
}

std::string bbox_to_text(const NormalizedBBox& b) {
  return "[" + std::to_string(b.x1) + ", " + std::to_string(b.y1) + ", " + std::to_string(b.x2) + ", " +
         std::to_string(b.y2) + "]";
}

NormalizedBBox parse_bbox_text(std::string_view text) {
  std::optional<NormalizedBBox> found;
  for (std::size_t pos = text.find('['); pos != std::string_view::npos; pos = text.find('[', pos + 1)) {
    if (is_task_token_at(text, pos)) continue;
    TupleScan s = scan_tuple(text, pos);
    if (!s.box) throw ParseError(s.error, s.error_at);
    if (found) throw ParseError("more than one box tuple", pos);
    found = s.box;
    pos = s.end - 1;
  }
  if (!found) throw ParseError("no box tuple found", text.size());
  return *found;
}

}  // namespace granmoe
