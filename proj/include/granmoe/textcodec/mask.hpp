#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace granmoe {

// Ordered class names; id 0 is always "background".
class LabelSet {
 public:
  LabelSet() : LabelSet(std::vector<std::string>{"background"}) {}
  explicit LabelSet(std::vector<std::string> names);

  const std::string& name(int id) const;
  std::optional<int> id_of(std::string_view name) const noexcept;
  bool contains(int id) const noexcept { return id >= 0 && id < size(); }
  int size() const noexcept { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  friend bool operator==(const LabelSet&, const LabelSet&) = default;

 private:
  std::vector<std::string> names_;
};

inline constexpr std::string_view kBackground = "background";

// Integer label grid, row-major.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<int> labels;

  Mask() = default;
  Mask(int w, int h, int fill = 0) : width(w), height(h), labels(static_cast<std::size_t>(w) * h, fill) {}

  int& at(int x, int y) { return labels[static_cast<std::size_t>(y) * width + x]; }
  int at(int x, int y) const { return labels[static_cast<std::size_t>(y) * width + x]; }

  friend bool operator==(const Mask&, const Mask&) = default;
};

struct DescriptorRun {
  std::string label;
  int count = 0;

  friend bool operator==(const DescriptorRun&, const DescriptorRun&) = default;
};

// Row-wise run-length encoded grid_n x grid_n label grid.
struct DescriptorSequence {
  int grid_n = 0;
  std::vector<DescriptorRun> runs;

  // Runs grouped per grid row (row boundaries are implied by the counts).
  std::vector<std::vector<DescriptorRun>> rows() const;

  friend bool operator==(const DescriptorSequence&, const DescriptorSequence&) = default;
};

inline constexpr int kDefaultGridN = 24;

// Majority label per cell (ties -> lowest id). Cells smaller than a pixel use
// the pixel under the cell centre.
Mask downsample_majority(const Mask& mask, int grid_n);

DescriptorSequence encode_mask(const Mask& mask, int grid_n, const LabelSet& labels);

// Nearest-cell upsampling back to out_w x out_h label ids.
Mask decode_mask(const DescriptorSequence& seq, const LabelSet& labels, int out_w, int out_h);

// "label*count label*count | label*count ..." with one " | " between rows.
std::string descriptor_to_text(const DescriptorSequence& seq);

// Strict inverse of descriptor_to_text. Throws ParseError.
DescriptorSequence parse_descriptor_text(std::string_view text, int grid_n, const LabelSet& labels);

struct LenientDescriptor {
  DescriptorSequence sequence;
  bool repaired = false;
  std::vector<std::string> repairs;
};

// Never throws on malformed input: unknown labels become background, rows are
// padded or truncated to grid_n cells, missing rows are filled with
// background and adjacent equal runs are merged.
LenientDescriptor parse_descriptor_text_lenient(std::string_view text, int grid_n, const LabelSet& labels);

// Throws if seq violates the sequence invariants.
void validate_descriptor(const DescriptorSequence& seq, const LabelSet& labels);

// Mask files: "W H" followed by H rows of W label ids, or plain PGM ("P2").
Mask read_mask_file(const std::filesystem::path& path);
Mask parse_mask_text(std::string_view text);
void write_mask_file(const std::filesystem::path& path, const Mask& mask);
std::string mask_to_text(const Mask& mask);

}  // namespace granmoe
