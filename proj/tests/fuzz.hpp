#pragma once
// Seeded generators shared by the property tests and the acceptance binary.

#include <random>
#include <string>
#include <vector>

#include "granmoe/textcodec/mask.hpp"

namespace fuzz {

inline granmoe::LabelSet labels_of(int n) {
  std::vector<std::string> names{"background"};
  for (int i = 1; i < n; ++i) names.push_back("class_" + std::to_string(i));
  return granmoe::LabelSet(names);
}

// Valid row-wise RLE: each row splits grid_n cells into runs whose
// neighbours never share a label.
inline granmoe::DescriptorSequence descriptor(std::mt19937_64& rng, const granmoe::LabelSet& labels, int grid_n) {
  granmoe::DescriptorSequence d;
  d.grid_n = grid_n;
  std::uniform_int_distribution<int> pick(0, labels.size() - 1);
  for (int r = 0; r < grid_n; ++r) {
    int left = grid_n, prev = -1;
    while (left > 0) {
      int lab = pick(rng);
      while (labels.size() > 1 && lab == prev) lab = pick(rng);
      // one label: the whole row is a single run
      const int count = labels.size() == 1 ? left : std::uniform_int_distribution<int>(1, left)(rng);
      d.runs.push_back({labels.name(lab), count});
      left -= count;
      prev = lab;
    }
  }
  return d;
}

// Blocky masks (runs of equal labels) so downsampling sees real structure.
inline granmoe::Mask mask(std::mt19937_64& rng, int w, int h, int n_labels) {
  granmoe::Mask m(w, h);
  std::uniform_int_distribution<int> lab(0, n_labels - 1), blocks(1, 6);
  const int nb = blocks(rng);
  for (int b = 0; b < nb; ++b) {
    const int x0 = static_cast<int>(rng() % static_cast<unsigned>(w)), y0 = static_cast<int>(rng() % static_cast<unsigned>(h));
    const int x1 = x0 + 1 + static_cast<int>(rng() % static_cast<unsigned>(w - x0));
    const int y1 = y0 + 1 + static_cast<int>(rng() % static_cast<unsigned>(h - y0));
    const int l = lab(rng);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) m.at(x, y) = l;
  }
  // a sprinkle of noise
  for (int k = 0; k < w * h / 16; ++k)
    m.at(static_cast<int>(rng() % static_cast<unsigned>(w)), static_cast<int>(rng() % static_cast<unsigned>(h))) = lab(rng);
  return m;
}

// Row segments of a rendered sequence: split on " | ", sum "label*count".
inline std::vector<int> row_sums(const std::string& text) {
  std::vector<int> sums;
  std::size_t start = 0;
  while (true) {
    const std::size_t bar = text.find(" | ", start);
    const std::string seg = text.substr(start, bar == std::string::npos ? std::string::npos : bar - start);
    int s = 0;
    std::size_t p = 0;
    while ((p = seg.find('*', p)) != std::string::npos) {
      s += std::stoi(seg.substr(p + 1));
      ++p;
    }
    sums.push_back(s);
    if (bar == std::string::npos) break;
    start = bar + 3;
  }
  return sums;
}

}  // namespace fuzz
