#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "granmoe/tensor/tape.hpp"
#include "granmoe/tensor/tensor.hpp"
#include "granmoe/textcodec/task.hpp"

namespace granmoe {

struct ModelConfig {
  int vocab_size = 0;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int d_ff = 128;
  int max_seq_len = 192;
  int patch_size = 8;
  int image_channels = 1;
  int n_granularity_experts = 3;
  int moe_baseline_experts = 8;
  int moe_expert_ff = 8;  // hidden width of each classic-MoE expert
  double moe_aux_weight = 0.01;
  int lora_rank = 4;
  double lora_alpha = 8.0;
  int grid_n = 8;
  double init_std = 0.02;
  double ln_eps = 1e-5;

  // Desk-scale defaults sized to the standard tokenizer.
  static ModelConfig toy();

  void validate() const;
  int head_dim() const { return d_model / n_heads; }

  nlohmann::ordered_json to_json() const;
  static ModelConfig from_json(const nlohmann::ordered_json& j);
};

// full: a dense model fine-tuned with every parameter trainable.
enum class Variant { dense, gmoe, moe, lora, full };

std::string_view to_string(Variant v) noexcept;
Variant parse_variant(std::string_view text);

// Single-channel or multi-channel image; pixels is H x (W * C), channel fastest.
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  Matrix pixels;

  Image() = default;
  Image(int h, int w, int c = 1) : height(h), width(w), channels(c), pixels(Matrix::Zero(h, w * c)) {}
  double& at(int y, int x, int c = 0) { return pixels(y, x * channels + c); }
  double at(int y, int x, int c = 0) const { return pixels(y, x * channels + c); }
  friend bool operator==(const Image& a, const Image& b) {
    return a.height == b.height && a.width == b.width && a.channels == b.channels && a.pixels == b.pixels;
  }
};

// Non-overlapping patches flattened in (row, col, channel) order; one row per patch.
Matrix extract_patches(const Image& image, int patch_size);

inline constexpr int kImageSlot = -1;

// One assembled training/inference sequence:
// [image tokens][instruction tokens][answer tokens].
struct Sequence {
  std::vector<Image> images;
  std::vector<int> tokens;  // kImageSlot at image positions
  std::vector<std::uint8_t> loss_mask;
  Index image_tokens = 0;
  Index instruction_tokens = 0;
  Index answer_tokens = 0;
  std::optional<GranularityLevel> level;

  Index length() const { return static_cast<Index>(tokens.size()); }
};

using SequenceBatch = std::vector<Sequence>;

Sequence assemble_sequence(std::vector<Image> images, int patch_size, const std::vector<int>& prompt_ids,
                           const std::vector<int>& answer_ids, std::optional<GranularityLevel> level,
                           int max_seq_len);

// Next-token targets for a sequence: position t predicts token t + 1, and is
// scored only when token t + 1 is an answer token.
struct ShiftedTargets {
  std::vector<int> targets;
  std::vector<std::uint8_t> mask;
};
ShiftedTargets next_token_targets(const Sequence& seq);

// Per-block, per-expert count of token rows an expert FFN processed.
using ExpertTraffic = std::vector<std::vector<Index>>;

struct ForwardResult {
  Var logits;
  std::optional<Var> aux_loss;  // classic MoE load-balancing term (unweighted)
  ExpertTraffic traffic;
};

struct ParameterCounts {
  Index trainable = 0;
  Index runtime_active = 0;
  Index total = 0;
};

class TransformerModel {
 public:
  TransformerModel(ModelConfig config, Variant variant, ParameterSet params);

  // Fresh dense model: N(0, init_std) projections, zero biases, unit gains.
  static TransformerModel init_dense(const ModelConfig& config, std::uint64_t seed);

  ForwardResult forward(DoubleTape& tape, const Sequence& seq);

  // Value-only forward on a private tape.
  Matrix logits(const Sequence& seq);

  // Image tokens for one image through the patch projection only.
  Var patch_encode(DoubleTape& tape, const Image& image);

  const ModelConfig& config() const noexcept { return config_; }
  Variant variant() const noexcept { return variant_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

 private:
  struct Binder;

  Var linear(Binder& b, Var x, const std::string& prefix);
  Var ffn(Binder& b, Var x, const std::string& prefix);
  Var attention(Binder& b, Var x, const std::string& prefix);
  Var moe_ffn(Binder& b, Var x, int layer, ForwardResult& result, std::vector<Var>& aux_terms);

  ModelConfig config_;
  Variant variant_;
  ParameterSet params_;
};

ParameterCounts count_parameters(const ParameterSet& params, Variant variant);

// Stage-2 initialisation: each block's FFN copied into image/region/pixel
// experts; everything except the experts is frozen.
ParameterSet expand_ffn_to_gmoe(const ParameterSet& dense, const ModelConfig& config);

// Classic MoE baseline: the FFN becomes moe_baseline_experts experts of
// width moe_expert_ff (initialised from consecutive hidden-unit slices of the
// dense FFN) behind a top-1 softmax gate. All parameters train.
ParameterSet convert_to_classic_moe(const ParameterSet& dense, const ModelConfig& config, std::uint64_t seed);

// LoRA adapters on attention q/k/v/o and both FFN matrices; base frozen,
// A ~ N(0, 1/sqrt(d_in)), B = 0.
ParameterSet attach_lora(const ParameterSet& dense, const ModelConfig& config, std::uint64_t seed);

// All parameters trainable (full fine-tune of a dense model).
ParameterSet make_all_trainable(const ParameterSet& params);

std::string expert_name(GranularityLevel level);

}  // namespace granmoe
