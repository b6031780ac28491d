#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "granmoe/datagen/sample.hpp"
#include "granmoe/metrics/metrics.hpp"
#include "granmoe/model/model.hpp"
#include "granmoe/training/training.hpp"

namespace granmoe {

struct DecodeResult {
  std::vector<int> ids;  // generated tokens, <eos> excluded
  std::string text;
  bool hit_eos = false;
  bool empty_budget = false;  // max_new == 0
  bool truncated = false;     // stopped by max_new or max_seq_len
};

// Argmax decoding from the sample's images and prompt. RoutingError when a
// G-MoE model cannot route the prompt.
DecodeResult greedy_decode(TransformerModel& model, const InstructionSample& sample, int max_new);

enum class TaskFamily { grounding, segmentation, captioning, classification };
TaskFamily task_family(TaskToken task) noexcept;
std::string_view to_string(TaskFamily f) noexcept;

struct DecodeRecord {
  std::string id;
  std::string prompt;
  std::string output;
  std::string parse_status;  // "ok", "n/a" or "failed: ..."

  nlohmann::ordered_json to_json() const;
};

struct EvalOptions {
  int grid_n = 8;
  int max_new = 96;
  bool bleu_smoothing = false;
  const LabelSet* labels = nullptr;  // defaults to the synthetic scene labels
};

// Scores outputs against the samples' targets. Pure: depends only on the texts
// and ground truths. All samples must share one task family.
MetricReport score_outputs(const std::vector<InstructionSample>& samples, const std::vector<std::string>& outputs,
                           const EvalOptions& opts = {}, std::vector<DecodeRecord>* records = nullptr);

struct SplitEvaluation {
  MetricReport report;
  std::vector<DecodeRecord> records;
};

SplitEvaluation evaluate_split(TransformerModel& model, const std::vector<InstructionSample>& samples,
                               const EvalOptions& opts = {});

// Groups samples by task token (in kAllTasks order) and evaluates each group.
std::vector<SplitEvaluation> evaluate_by_task(TransformerModel& model, const std::vector<InstructionSample>& samples,
                                              const EvalOptions& opts = {});

// ---- ablation -------------------------------------------------------------------------

struct AblationConfig {
  TrainConfig stage2;  // variant overwritten per row
  std::vector<Variant> variants{Variant::lora, Variant::moe, Variant::full, Variant::gmoe};
  EvalOptions eval;
};

struct AblationRow {
  Variant variant = Variant::gmoe;
  Index trainable = 0;
  Index runtime = 0;
  double vqa_score = 0;  // VQA-style: answer accuracy, percent
  double vg_score = 0;   // VG-style: acc@0.5, percent
  std::string data_order_hash;
  std::optional<std::string> failure;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  bool trainable_ordering = false;  // lora < gmoe < moe < full
  bool runtime_gmoe_equals_dense = false;
  bool shared_data_order = false;
  Index dense_runtime = 0;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();

  nlohmann::ordered_json to_json() const;
  std::string to_text() const;
};

AblationResult run_ablation(const Checkpoint& base, const std::vector<InstructionSample>& train_data,
                            const std::vector<InstructionSample>& eval_data, const AblationConfig& cfg);

// Aligned plain-text table; the first row is the header.
std::string render_table(const std::vector<std::vector<std::string>>& rows);

}  // namespace granmoe
