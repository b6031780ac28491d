#pragma once
// Closed-form parameter counts, written from the architecture description
// rather than by walking a ParameterSet.

#include "granmoe/model/model.hpp"

namespace counts {

using granmoe::Index;
using granmoe::ModelConfig;

inline Index ffn(const ModelConfig& c) {
  return static_cast<Index>(c.d_model) * c.d_ff + c.d_ff + static_cast<Index>(c.d_ff) * c.d_model + c.d_model;
}

inline Index dense(const ModelConfig& c) {
  const Index D = c.d_model, V = c.vocab_size;
  const Index P = static_cast<Index>(c.patch_size) * c.patch_size * c.image_channels;
  const Index lin = D * D + D;
  const Index block = 2 * D + 4 * lin + 2 * D + ffn(c);
  return (P * D + D) + 2 * lin + V * D + static_cast<Index>(c.max_seq_len) * D + c.n_layers * block + 2 * D + D * V + V;
}

struct Expected {
  Index gmoe_trainable, gmoe_runtime, gmoe_total;
  Index moe_trainable, moe_runtime;
  Index lora_trainable, lora_total;
  Index full_trainable;
};

inline Expected expected(const ModelConfig& c) {
  const Index D = dense(c), L = c.n_layers;
  const Index E = c.moe_baseline_experts, w = c.moe_expert_ff, dm = c.d_model;
  const Index expert = dm * w + w + w * dm + dm;
  const Index moe_total = D - L * ffn(c) + L * (dm * E + E + E * expert);
  const Index r = c.lora_rank;
  const Index lora = L * (4 * r * (dm + dm) + 2 * r * (dm + c.d_ff));
  return {3 * ffn(c) * L, D, D + 2 * ffn(c) * L, moe_total, moe_total - L * (E - 1) * expert, lora, D + lora, D};
}

}  // namespace counts
