#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "granmoe/textcodec/bbox.hpp"
#include "granmoe/textcodec/mask.hpp"

namespace granmoe {

using Tokens = std::vector<std::string>;

// Lowercase, put spaces around punctuation, split on whitespace.
Tokens metric_tokens(std::string_view text);

// ---- BLEU -------------------------------------------------------------------------

struct BleuResult {
  std::vector<double> bleu;        // BLEU-1 .. BLEU-max_n
  std::vector<double> precisions;  // modified n-gram precisions p_1 .. p_max_n
  double brevity_penalty = 0;
  long candidate_length = 0;
  long reference_length = 0;
  bool empty_candidate = false;
};

// Sentence-level BLEU against one or more references.
BleuResult bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n = 4,
                bool smoothing = false);
// Corpus BLEU: clipped counts and lengths summed before the ratio.
BleuResult corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                       int max_n = 4, bool smoothing = false);

// ---- ROUGE-L / METEOR ---------------------------------------------------------------

std::size_t lcs_length(const Tokens& a, const Tokens& b);
double rouge_l(const Tokens& candidate, const Tokens& reference, double beta = 1.2);

struct MeteorAlignment {
  std::size_t matches = 0;
  std::size_t chunks = 0;
  bool exact = true;  // false: the search budget ran out; matches are still maximal
};
// Alignment with the most exact unigram matches, then the fewest chunks.
// Chunk minimisation is exponential in the worst case, so the search stops
// after `node_budget` nodes and keeps the best alignment found.
inline constexpr long kMeteorNodeBudget = 200000;
MeteorAlignment meteor_align(const Tokens& candidate, const Tokens& reference, long node_budget = kMeteorNodeBudget);
double meteor_exact(const Tokens& candidate, const Tokens& reference);
double meteor_exact(const Tokens& candidate, const std::vector<Tokens>& references);  // best reference

// ---- CIDEr ----------------------------------------------------------------------------

struct CiderResult {
  double score = 0;                // mean over samples, scaled by 10
  std::vector<double> per_sample;  // scaled by 10
  bool degenerate = false;         // fewer than two samples: every IDF is log(1) = 0
};

CiderResult cider(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                  int max_n = 4);

// ---- grounding --------------------------------------------------------------------------

double iou_bbox(const NormalizedBBox& a, const NormalizedBBox& b);

// Fraction of entries with IoU >= t, per threshold. nullopt (parse failure) counts as IoU 0.
std::vector<double> acc_at(const std::vector<std::optional<NormalizedBBox>>& preds,
                           const std::vector<NormalizedBBox>& gts, const std::vector<double>& thresholds = {0.5, 0.7});

// ---- segmentation -------------------------------------------------------------------------

struct ClassCounts {
  long tp = 0, fp = 0, fn = 0, tn = 0;
};

struct ClassScores {
  double iou = 0, precision = 0, recall = 0, f1 = 0;
};

struct SegmentationScores {
  std::map<int, ClassCounts> counts;  // every label id in the set
  std::map<int, ClassScores> per_class;
  std::vector<int> present;           // classes in gt or pred
  double miou = 0;
  double oa = 0;
  // macro over foreground classes present in gt or pred
  double precision = 0, recall = 0, f1 = 0;
  double foreground_iou = 0;
};

std::map<int, ClassCounts> confusion_counts(const Mask& pred, const Mask& gt, const LabelSet& labels);
SegmentationScores segmentation_scores(const Mask& pred, const Mask& gt, const LabelSet& labels);

// ---- classification ---------------------------------------------------------------------------

// Case-folded, trimmed, trailing periods removed.
std::string normalize_answer(std::string_view text);
double classification_accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& gts,
                                std::vector<bool>* per_sample = nullptr);

// ---- reports ------------------------------------------------------------------------------------

struct MetricReport {
  std::string task;
  std::size_t sample_count = 0;
  std::size_t parse_failures = 0;
  std::vector<std::pair<std::string, double>> values;  // in insertion order
  std::vector<std::string> sample_ids;
  std::vector<std::pair<std::string, std::vector<double>>> per_sample;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();

  void set(const std::string& name, double v);
  double get(const std::string& name) const;
  bool has(const std::string& name) const;
  void set_per_sample(const std::string& name, std::vector<double> v);
  nlohmann::ordered_json to_json() const;
};

}  // namespace granmoe
