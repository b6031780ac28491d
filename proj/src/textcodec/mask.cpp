#include "granmoe/textcodec/mask.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "granmoe/errors.hpp"

namespace granmoe {

// ---- LabelSet ---------------------------------------------------------------

LabelSet::LabelSet(std::vector<std::string> names) : names_(std::move(names)) {
  if (names_.empty() || names_.front() != kBackground) {
    throw LabelSetError("label set must start with \"background\" at id 0");
  }
  std::set<std::string> seen;
  for (const auto& n : names_) {
    if (n.empty()) throw LabelSetError("empty label name");
    if (n.find_first_of("*:|\n\r\t") != std::string::npos) {
      throw LabelSetError("label name \"" + n + "\" contains a reserved character");
    }
    if (std::isspace(static_cast<unsigned char>(n.front())) || std::isspace(static_cast<unsigned char>(n.back()))) {
      throw LabelSetError("label name \"" + n + "\" has surrounding whitespace");
    }
    if (!seen.insert(n).second) throw LabelSetError("duplicate label name \"" + n + "\"");
  }
}

const std::string& LabelSet::name(int id) const {
  if (!contains(id)) throw LabelSetError("label id " + std::to_string(id) + " not in label set");
  return names_[static_cast<std::size_t>(id)];
}

std::optional<int> LabelSet::id_of(std::string_view name) const noexcept {
  for (std::size_t i = 0; i < names_.size(); ++i)
    if (names_[i] == name) return static_cast<int>(i);
  return std::nullopt;
}

// ---- grid conversion --------------------------------------------------------

std::vector<std::vector<DescriptorRun>> DescriptorSequence::rows() const {
  std::vector<std::vector<DescriptorRun>> out;
  std::vector<DescriptorRun> cur;
  int filled = 0;
  for (const auto& r : runs) {
    cur.push_back(r);
    filled += r.count;
    if (filled >= grid_n) {
      out.push_back(std::move(cur));
      cur.clear();
      filled = 0;
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace {

// A pixel belongs to the cell its centre falls in. Decoding uses the same
// rule, so cells and pixel blocks line up for any size >= grid_n.
int cell_of(int pixel, int size, int n) {
  return static_cast<int>((2LL * pixel + 1) * n / (2LL * size));
}

}  // namespace

Mask downsample_majority(const Mask& mask, int grid_n) {
  if (grid_n < 1) throw DegenerateInputError("grid_n must be at least 1");
  if (mask.width <= 0 || mask.height <= 0 || mask.labels.empty()) throw DegenerateInputError("empty mask");
  const int max_label = *std::max_element(mask.labels.begin(), mask.labels.end());
  const auto n_labels = static_cast<std::size_t>(std::max(max_label, 0)) + 1;
  const auto n = static_cast<std::size_t>(grid_n);
  std::vector<int> votes(n * n * n_labels, 0);
  for (int y = 0; y < mask.height; ++y) {
    const auto r = static_cast<std::size_t>(cell_of(y, mask.height, grid_n));
    for (int x = 0; x < mask.width; ++x) {
      const auto c = static_cast<std::size_t>(cell_of(x, mask.width, grid_n));
      ++votes[(r * n + c) * n_labels + static_cast<std::size_t>(mask.at(x, y))];
    }
  }
  Mask grid(grid_n, grid_n);
  for (int r = 0; r < grid_n; ++r)
    for (int c = 0; c < grid_n; ++c) {
      const auto first = votes.begin() + static_cast<std::ptrdiff_t>((static_cast<std::size_t>(r) * n + static_cast<std::size_t>(c)) * n_labels);
      const auto top = std::max_element(first, first + static_cast<std::ptrdiff_t>(n_labels));
      if (*top == 0) {
        // smaller than the grid: the cell holds no pixel centre, take the nearest pixel
        const int x = static_cast<int>((2LL * c + 1) * mask.width / (2LL * grid_n));
        const int y = static_cast<int>((2LL * r + 1) * mask.height / (2LL * grid_n));
        grid.at(c, r) = mask.at(x, y);
      } else {
        // max_element returns the first maximum, i.e. the lowest label id on ties.
        grid.at(c, r) = static_cast<int>(top - first);
      }
    }
  return grid;
}

DescriptorSequence encode_mask(const Mask& mask, int grid_n, const LabelSet& labels) {
  if (grid_n < 1) throw DegenerateInputError("grid_n must be at least 1");
  if (mask.width <= 0 || mask.height <= 0 || mask.labels.empty()) throw DegenerateInputError("empty mask");
  for (int id : mask.labels)
    if (!labels.contains(id)) throw LabelSetError("mask label id " + std::to_string(id) + " not in label set");
  const Mask grid = downsample_majority(mask, grid_n);
  DescriptorSequence seq{grid_n, {}};
  for (int r = 0; r < grid_n; ++r) {
    int c = 0;
    while (c < grid_n) {
      const int id = grid.at(c, r);
      int end = c + 1;
      while (end < grid_n && grid.at(end, r) == id) ++end;
      seq.runs.push_back({labels.name(id), end - c});
      c = end;
    }
  }
  return seq;
}

void validate_descriptor(const DescriptorSequence& seq, const LabelSet& labels) {
  if (seq.grid_n < 1) throw DegenerateInputError("grid_n must be at least 1");
  long long total = 0;
  int filled = 0;
  const DescriptorRun* prev = nullptr;
  for (const auto& run : seq.runs) {
    if (!labels.id_of(run.label)) throw LabelSetError("unknown label \"" + run.label + "\"");
    if (run.count <= 0) throw DataError("descriptor run with non-positive count");
    if (filled + run.count > seq.grid_n) throw DataError("descriptor run crosses a row boundary");
    if (prev != nullptr && filled > 0 && prev->label == run.label) throw DataError("adjacent runs share a label");
    filled += run.count;
    total += run.count;
    prev = &run;
    if (filled == seq.grid_n) filled = 0;
  }
  if (total != static_cast<long long>(seq.grid_n) * seq.grid_n) {
    throw DataError("descriptor counts sum to " + std::to_string(total) + ", expected " +
                    std::to_string(seq.grid_n * seq.grid_n));
  }
}

Mask decode_mask(const DescriptorSequence& seq, const LabelSet& labels, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw DegenerateInputError("decode_mask: zero output size");
  validate_descriptor(seq, labels);
  const int n = seq.grid_n;
  std::vector<int> cells;
  cells.reserve(static_cast<std::size_t>(n) * n);
  for (const auto& run : seq.runs) cells.insert(cells.end(), static_cast<std::size_t>(run.count), *labels.id_of(run.label));
  Mask out(out_w, out_h);
  for (int y = 0; y < out_h; ++y) {
    const int r = cell_of(y, out_h, n);
    for (int x = 0; x < out_w; ++x) {
      const int c = cell_of(x, out_w, n);
      out.at(x, y) = cells[static_cast<std::size_t>(r) * n + c];
    }
  }
  return out;
}

// ---- text form ----------------------------------------------------------------

std::string descriptor_to_text(const DescriptorSequence& seq) {
  std::string out;
  for (const auto& row : seq.rows()) {
    if (!out.empty()) out += " | ";
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i) out += ' ';
      out += row[i].label;
      out += '*';
      out += std::to_string(row[i].count);
    }
  }
  return out;
}

namespace {

struct RawRun {
  std::string label;
  long long count = 0;
  std::size_t offset = 0;
};

struct Segment {
  std::vector<RawRun> runs;
  std::size_t offset = 0;
};

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; }

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

// Splits on '|' and reads "label*count" runs. Strict mode throws on the first
// malformed run; lenient mode records a note and skips it.
std::vector<Segment> scan_segments(std::string_view text, bool strict, std::vector<std::string>* notes) {
  std::vector<Segment> segs;
  std::size_t seg_start = 0;
  while (true) {
    const std::size_t bar = text.find('|', seg_start);
    const std::size_t seg_end = bar == std::string_view::npos ? text.size() : bar;
    Segment seg{{}, seg_start};
    std::size_t i = seg_start;
    while (true) {
      while (i < seg_end && is_space(text[i])) ++i;
      if (i >= seg_end) break;
      const std::size_t star = text.find('*', i);
      if (star == std::string_view::npos || star >= seg_end) {
        if (strict) throw ParseError("expected 'label*count'", i);
        notes->push_back("dropped trailing text without a count");
        break;
      }
      RawRun run{trim(text.substr(i, star - i)), 0, i};
      std::size_t j = star + 1;
      const std::size_t digits = j;
      while (j < seg_end && std::isdigit(static_cast<unsigned char>(text[j]))) {
        if (run.count < 1000000000LL) run.count = run.count * 10 + (text[j] - '0');
        ++j;
      }
      const bool bad_count = j == digits || run.count <= 0;
      const bool bad_end = j < seg_end && !is_space(text[j]);
      if (run.label.empty() || bad_count || bad_end) {
        if (strict) {
          if (run.label.empty()) throw ParseError("empty label before '*'", i);
          throw ParseError(bad_count ? "expected a positive count after '*'" : "unexpected character after count",
                           bad_count ? digits : j);
        }
        notes->push_back("skipped malformed run");
        while (j < seg_end && !is_space(text[j])) ++j;
        i = j;
        continue;
      }
      seg.runs.push_back(std::move(run));
      i = j;
    }
    segs.push_back(std::move(seg));
    if (bar == std::string_view::npos) break;
    seg_start = bar + 1;
  }
  return segs;
}

}  // namespace

DescriptorSequence parse_descriptor_text(std::string_view text, int grid_n, const LabelSet& labels) {
  if (grid_n < 1) throw DegenerateInputError("grid_n must be at least 1");
  const auto segs = scan_segments(text, true, nullptr);
  long long total = 0;
  for (const auto& s : segs)
    for (const auto& r : s.runs) {
      if (!labels.id_of(r.label)) throw ParseError("unknown label \"" + r.label + "\"", r.offset);
      total += r.count;
    }
  const long long want = static_cast<long long>(grid_n) * grid_n;
  if (total != want) {
    throw ParseError("descriptor counts sum to " + std::to_string(total) + ", expected " + std::to_string(want),
                     text.size());
  }
  if (segs.size() != static_cast<std::size_t>(grid_n)) {
    throw ParseError("expected " + std::to_string(grid_n) + " rows, found " + std::to_string(segs.size()),
                     segs.size() > static_cast<std::size_t>(grid_n) ? segs[static_cast<std::size_t>(grid_n)].offset
                                                                     : text.size());
  }
  DescriptorSequence seq{grid_n, {}};
  for (std::size_t r = 0; r < segs.size(); ++r) {
    long long filled = 0;
    for (std::size_t k = 0; k < segs[r].runs.size(); ++k) {
      const auto& run = segs[r].runs[k];
      filled += run.count;
      if (filled > grid_n) throw ParseError("run crosses the boundary of row " + std::to_string(r), run.offset);
      if (k > 0 && segs[r].runs[k - 1].label == run.label) throw ParseError("adjacent runs share a label", run.offset);
      seq.runs.push_back({run.label, static_cast<int>(run.count)});
    }
    if (filled != grid_n) {
      throw ParseError("row " + std::to_string(r) + " holds " + std::to_string(filled) + " cells, expected " +
                           std::to_string(grid_n),
                       segs[r].offset);
    }
  }
  return seq;
}

LenientDescriptor parse_descriptor_text_lenient(std::string_view text, int grid_n, const LabelSet& labels) {
  if (grid_n < 1) throw DegenerateInputError("grid_n must be at least 1");
  LenientDescriptor out;
  auto segs = scan_segments(text, false, &out.repairs);
  const std::string bg(kBackground);
  for (auto& s : segs)
    for (auto& r : s.runs)
      if (!labels.id_of(r.label)) {
        out.repairs.push_back("unknown label \"" + r.label + "\" replaced by background");
        r.label = bg;
      }

  std::vector<std::vector<std::pair<std::string, long long>>> rows;
  if (segs.size() == 1 && grid_n > 1) {
    // No row separators: cut the flat stream at row boundaries.
    if (!segs[0].runs.empty()) out.repairs.push_back("row separators missing; rows cut from flat run stream");
    std::vector<std::pair<std::string, long long>> cur;
    long long filled = 0;
    for (const auto& r : segs[0].runs) {
      long long left = r.count;
      while (left > 0 && rows.size() < static_cast<std::size_t>(grid_n)) {
        const long long take = std::min<long long>(left, grid_n - filled);
        cur.emplace_back(r.label, take);
        filled += take;
        left -= take;
        if (filled == grid_n) {
          rows.push_back(std::move(cur));
          cur.clear();
          filled = 0;
        }
      }
    }
    if (!cur.empty()) rows.push_back(std::move(cur));
  } else {
    for (const auto& s : segs) {
      std::vector<std::pair<std::string, long long>> row;
      for (const auto& r : s.runs) row.emplace_back(r.label, r.count);
      rows.push_back(std::move(row));
    }
  }
  if (rows.size() > static_cast<std::size_t>(grid_n)) {
    out.repairs.push_back("dropped " + std::to_string(rows.size() - grid_n) + " extra rows");
    rows.resize(static_cast<std::size_t>(grid_n));
  }
  while (rows.size() < static_cast<std::size_t>(grid_n)) {
    out.repairs.push_back("appended missing background row");
    rows.emplace_back();
  }

  out.sequence.grid_n = grid_n;
  for (auto& row : rows) {
    long long filled = 0;
    std::vector<DescriptorRun> fixed;
    for (const auto& [label, count] : row) {
      if (filled >= grid_n) {
        out.repairs.push_back("truncated overlong row");
        break;
      }
      const int take = static_cast<int>(std::min<long long>(count, grid_n - filled));
      if (take < count) out.repairs.push_back("truncated overlong row");
      if (!fixed.empty() && fixed.back().label == label) {
        fixed.back().count += take;
        out.repairs.push_back("merged adjacent runs");
      } else {
        fixed.push_back({label, take});
      }
      filled += take;
    }
    if (filled < grid_n) {
      out.repairs.push_back("padded short row with background");
      const int pad = static_cast<int>(grid_n - filled);
      if (!fixed.empty() && fixed.back().label == bg) fixed.back().count += pad;
      else fixed.push_back({bg, pad});
    }
    out.sequence.runs.insert(out.sequence.runs.end(), fixed.begin(), fixed.end());
  }
  out.repaired = !out.repairs.empty();
  return out;
}

// ---- mask files ---------------------------------------------------------------

Mask parse_mask_text(std::string_view text) {
  std::string cleaned;
  // Strip PGM comments.
  for (std::size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '#') {
      while (i < text.size() && text[i] != '\n') ++i;
      cleaned.push_back('\n');
      continue;
    }
    cleaned.push_back(text[i]);
  }
  std::istringstream in(cleaned);
  std::string first;
  if (!(in >> first)) throw DataError("mask file is empty");
  int w = 0, h = 0;
  bool pgm = false;
  if (first == "P2") {
    pgm = true;
    if (!(in >> w >> h)) throw DataError("PGM header is missing width/height");
    int maxval = 0;
    if (!(in >> maxval) || maxval <= 0) throw DataError("PGM header is missing maxval");
  } else {
    try {
      w = std::stoi(first);
    } catch (const std::exception&) {
      throw DataError("mask file must start with \"W H\" or \"P2\"");
    }
    if (!(in >> h)) throw DataError("mask header is missing height");
  }
  if (w <= 0 || h <= 0) throw DegenerateInputError("mask has zero size");
  Mask m(w, h);
  for (auto& v : m.labels) {
    if (!(in >> v)) throw DataError(std::string(pgm ? "PGM" : "mask") + " file has fewer than W*H values");
    if (v < 0) throw DataError("negative label id in mask file");
  }
  int extra = 0;
  if (in >> extra) throw DataError("mask file has more than W*H values");
  return m;
}

Mask read_mask_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read mask file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_mask_text(ss.str());
}

std::string mask_to_text(const Mask& mask) {
  std::string out = std::to_string(mask.width) + " " + std::to_string(mask.height) + "\n";
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (x) out += ' ';
      out += std::to_string(mask.at(x, y));
    }
    out += '\n';
  }
  return out;
}

void write_mask_file(const std::filesystem::path& path, const Mask& mask) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write mask file " + path.string());
  out << mask_to_text(mask);
}

}  // namespace granmoe
