#pragma once

#include <string>
#include <string_view>

namespace granmoe {

// Pixel box with half-open extents: covers x in [x1, x2), y in [y1, y2).
struct BBox {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  int area() const noexcept { return (x2 - x1) * (y2 - y1); }
  friend bool operator==(const BBox&, const BBox&) = default;
};

// Box on the integer [0, 100] lattice.
struct NormalizedBBox {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  friend bool operator==(const NormalizedBBox&, const NormalizedBBox&) = default;
};

// round(100 * c / extent), half away from zero, clamped to [0, 100].
NormalizedBBox normalize_bbox(const BBox& box, int img_w, int img_h);

// "[x1, y1, x2, y2]"
std::string bbox_to_text(const NormalizedBBox& box);

// Extracts the single "[a, b, c, d]" tuple in the text. Throws ParseError
// with the byte offset of the problem.
NormalizedBBox parse_bbox_text(std::string_view text);

}  // namespace granmoe
