#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "granmoe/datagen/sample.hpp"
#include "granmoe/model/model.hpp"
#include "granmoe/model/tokenizer.hpp"
#include "granmoe/tensor/optim.hpp"

namespace granmoe {

struct TrainConfig {
  int stage = 1;
  double lr = 3e-3;
  double weight_decay = 0.0;
  double warmup_ratio = 0.03;
  std::string schedule = "cosine";
  int epochs = 1;
  long steps = 0;  // 0: epochs * ceil(samples / batch_size)
  int batch_size = 4;
  std::uint64_t seed = 0;
  Variant variant = Variant::dense;  // stage 2: gmoe | lora | moe | full
  double clip_norm = 1.0;
  int audit_every = 50;
  std::map<TaskToken, int> quotas;  // stage-2 resampling; absent task = 0

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static TrainConfig from_json(const nlohmann::ordered_json& j);
};

// Everything needed to continue or evaluate a run.
struct Checkpoint {
  ModelConfig model;
  Variant variant = Variant::dense;
  ParameterSet params;
  AdamW optimizer;
  long step = 0;
  int stage = 1;
  std::string config_hash;
  nlohmann::ordered_json train_config = nlohmann::ordered_json::object();
  nlohmann::ordered_json lineage = nlohmann::ordered_json::array();
};

inline constexpr const char* kCheckpointFormat = "granmoe-checkpoint";
inline constexpr int kCheckpointVersion = 1;

nlohmann::ordered_json checkpoint_to_json(const Checkpoint& ckpt);
Checkpoint checkpoint_from_json(const nlohmann::ordered_json& doc);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// 64-bit FNV-1a of a canonical JSON dump, as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);
std::string config_hash(const ModelConfig& model, const TrainConfig& train);

// Sample -> model sequence: prompt without image markers, answer = target + <eos>.
// The level comes from the router, not from the record.
Sequence make_sequence(const InstructionSample& s, const Tokenizer& tok, const ModelConfig& cfg);

// Deterministic per-step batch plan (indices into the dataset).
std::vector<std::vector<std::size_t>> batch_plan(std::size_t n_samples, const TrainConfig& cfg);

struct LogRecord {
  long step = 0;
  double lr = 0;
  double loss = 0;
  std::string task_token;   // "*" for the batch aggregate
  std::string granularity;  // "*" for the batch aggregate
  std::string variant;

  nlohmann::ordered_json to_json() const;
};

struct AuditRecord {
  long step = 0;
  double logged_loss = 0;
  double recomputed_loss = 0;
  bool loss_bitwise_equal = false;
  double frozen_grad_max = 0;  // largest |grad| over frozen tensors
  std::vector<std::string> nonzero_frozen;

  bool ok() const { return loss_bitwise_equal && nonzero_frozen.empty(); }
  nlohmann::ordered_json to_json() const;
};

using BucketLosses = std::map<GranularityLevel, double>;

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogRecord> log;
  std::vector<AuditRecord> audits;
  std::optional<BucketLosses> loss_before;  // stage 2 only
  std::optional<BucketLosses> loss_after;
  std::string data_order_hash;
};

struct TrainOptions {
  std::optional<std::filesystem::path> log_path;  // JSON lines, appended per step
  std::optional<long> stop_after;                 // stop early (for resume tests)
};

// Token-pooled masked loss per granularity bucket, value-only.
BucketLosses bucket_losses(TransformerModel& model, const std::vector<InstructionSample>& data,
                           const Tokenizer& tok);

TrainResult train_stage1(const std::vector<InstructionSample>& data, const ModelConfig& model_cfg,
                         const TrainConfig& cfg, const TrainOptions& opts = {});

// Stage-2 initialisation from a dense stage-1 checkpoint. Throws StateError
// when the checkpoint is already expanded.
Checkpoint expand_to_gmoe(const Checkpoint& stage1);

// Builds the stage-2 starting point for cfg.variant (gmoe / lora / moe / full).
Checkpoint prepare_stage2(const Checkpoint& stage1, const TrainConfig& cfg);

TrainResult train_stage2(const Checkpoint& stage1, const std::vector<InstructionSample>& data,
                         const TrainConfig& cfg, const TrainOptions& opts = {});

// Continue a checkpoint (of either stage) to the configured step count.
TrainResult resume_training(const Checkpoint& ckpt, const std::vector<InstructionSample>& data,
                            const TrainOptions& opts = {});

struct Stage2Stream {
  std::vector<InstructionSample> samples;  // interleaved in pool order
  std::map<GranularityLevel, std::vector<std::size_t>> buckets;
};

// Seeded sampling without replacement, per task. QuotaError if a quota
// exceeds the available pool.
Stage2Stream resample_stage2(const std::vector<InstructionSample>& data, const std::map<TaskToken, int>& quotas,
                             std::uint64_t seed);

// Hash of the sample ids in plan order.
std::string data_order_hash(const std::vector<InstructionSample>& data,
                            const std::vector<std::vector<std::size_t>>& plan);

}  // namespace granmoe
