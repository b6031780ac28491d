#include "granmoe/model/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "granmoe/model/tokenizer.hpp"

namespace granmoe {

namespace {

constexpr std::array<const char*, 4> kFfnParts{"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"};
constexpr std::array<const char*, 6> kLoraTargets{"attn.q", "attn.k", "attn.v", "attn.o", "ffn.fc1", "ffn.fc2"};

std::string block(int i) { return "blocks." + std::to_string(i) + "."; }

bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

Tensor gaussian(Shape shape, double std, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor ones(Shape shape) {
  Tensor t(std::move(shape));
  t.values().setOnes();
  return t;
}

// Which FFN tensor of which block a name refers to, if any ("blocks.3.ffn.fc1.weight" -> 3).
std::optional<int> dense_ffn_block(const std::string& name) {
  if (!starts_with(name, "blocks.")) return std::nullopt;
  const auto dot = name.find('.', 7);
  if (name.compare(dot, 5, ".ffn.") != 0) return std::nullopt;
  return std::stoi(name.substr(7, dot - 7));
}

}  // namespace

// ---- config -------------------------------------------------------------------

ModelConfig ModelConfig::toy() {
  ModelConfig c;
  c.vocab_size = Tokenizer::standard().size();
  return c;
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* what) {
    if (v <= 0) throw ContractError(std::string("model config: ") + what + " must be positive");
  };
  positive(vocab_size, "vocab_size");
  positive(d_model, "d_model");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_ff, "d_ff");
  positive(max_seq_len, "max_seq_len");
  positive(patch_size, "patch_size");
  positive(image_channels, "image_channels");
  positive(moe_baseline_experts, "moe_baseline_experts");
  positive(moe_expert_ff, "moe_expert_ff");
  positive(lora_rank, "lora_rank");
  positive(grid_n, "grid_n");
  if (d_model % n_heads != 0) throw ContractError("model config: d_model must be divisible by n_heads");
  if (n_granularity_experts != 3) throw ContractError("model config: n_granularity_experts is fixed at 3");
  if (moe_expert_ff > d_ff) throw ContractError("model config: moe_expert_ff cannot exceed d_ff");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  return {{"vocab_size", vocab_size},
          {"d_model", d_model},
          {"n_layers", n_layers},
          {"n_heads", n_heads},
          {"d_ff", d_ff},
          {"max_seq_len", max_seq_len},
          {"patch_size", patch_size},
          {"image_channels", image_channels},
          {"n_granularity_experts", n_granularity_experts},
          {"moe_baseline_experts", moe_baseline_experts},
          {"moe_expert_ff", moe_expert_ff},
          {"moe_aux_weight", moe_aux_weight},
          {"lora_rank", lora_rank},
          {"lora_alpha", lora_alpha},
          {"grid_n", grid_n},
          {"init_std", init_std},
          {"ln_eps", ln_eps}};
}

ModelConfig ModelConfig::from_json(const nlohmann::ordered_json& j) {
  ModelConfig c = toy();
  auto read = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
  };
  read("vocab_size", c.vocab_size);
  read("d_model", c.d_model);
  read("n_layers", c.n_layers);
  read("n_heads", c.n_heads);
  read("d_ff", c.d_ff);
  read("max_seq_len", c.max_seq_len);
  read("patch_size", c.patch_size);
  read("image_channels", c.image_channels);
  read("n_granularity_experts", c.n_granularity_experts);
  read("moe_baseline_experts", c.moe_baseline_experts);
  read("moe_expert_ff", c.moe_expert_ff);
  read("moe_aux_weight", c.moe_aux_weight);
  read("lora_rank", c.lora_rank);
  read("lora_alpha", c.lora_alpha);
  read("grid_n", c.grid_n);
  read("init_std", c.init_std);
  read("ln_eps", c.ln_eps);
  c.validate();
  return c;
}

std::string_view to_string(Variant v) noexcept {
  switch (v) {
    case Variant::dense: return "dense";
    case Variant::gmoe: return "gmoe";
    case Variant::moe: return "moe";
    case Variant::lora: return "lora";
    case Variant::full: return "full";
  }
  return "?";
}

Variant parse_variant(std::string_view text) {
  for (Variant v : {Variant::dense, Variant::gmoe, Variant::moe, Variant::lora, Variant::full})
    if (to_string(v) == text) return v;
  throw ContractError("unknown model variant \"" + std::string(text) + "\"");
}

std::string expert_name(GranularityLevel level) { return std::string(to_string(level)); }

// ---- sequences ------------------------------------------------------------------

Matrix extract_patches(const Image& image, int p) {
  if (p <= 0 || image.height % p != 0 || image.width % p != 0) {
    throw DimensionError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                         " is not divisible into " + std::to_string(p) + "x" + std::to_string(p) + " patches");
  }
  const int ph = image.height / p, pw = image.width / p;
  Matrix out(ph * pw, p * p * image.channels);
  for (int py = 0; py < ph; ++py)
    for (int px = 0; px < pw; ++px) {
      Index col = 0;
      for (int y = 0; y < p; ++y)
        for (int x = 0; x < p; ++x)
          for (int c = 0; c < image.channels; ++c) out(py * pw + px, col++) = image.at(py * p + y, px * p + x, c);
    }
  return out;
}

Sequence assemble_sequence(std::vector<Image> images, int patch_size, const std::vector<int>& prompt_ids,
                           const std::vector<int>& answer_ids, std::optional<GranularityLevel> level,
                           int max_seq_len) {
  if (images.empty() || images.size() > 2) {
    throw ContractError("a sequence carries one or two images, got " + std::to_string(images.size()));
  }
  Sequence seq;
  for (const auto& img : images) {
    if (patch_size <= 0 || img.height % patch_size != 0 || img.width % patch_size != 0) {
      throw DimensionError("image dimensions not divisible by patch size " + std::to_string(patch_size));
    }
    seq.image_tokens += static_cast<Index>(img.height / patch_size) * (img.width / patch_size);
  }
  seq.instruction_tokens = static_cast<Index>(prompt_ids.size());
  seq.answer_tokens = static_cast<Index>(answer_ids.size());
  const Index total = seq.image_tokens + seq.instruction_tokens + seq.answer_tokens;
  if (total > max_seq_len) {
    throw SequenceLengthError("sequence of " + std::to_string(total) + " tokens exceeds the max_seq_len budget of " +
                              std::to_string(max_seq_len));
  }
  seq.images = std::move(images);
  seq.tokens.assign(static_cast<std::size_t>(seq.image_tokens), kImageSlot);
  seq.tokens.insert(seq.tokens.end(), prompt_ids.begin(), prompt_ids.end());
  seq.tokens.insert(seq.tokens.end(), answer_ids.begin(), answer_ids.end());
  seq.loss_mask.assign(static_cast<std::size_t>(seq.image_tokens + seq.instruction_tokens), 0);
  seq.loss_mask.insert(seq.loss_mask.end(), answer_ids.size(), 1);
  seq.level = level;
  return seq;
}

ShiftedTargets next_token_targets(const Sequence& seq) {
  const auto n = seq.tokens.size();
  ShiftedTargets out{std::vector<int>(n, 0), std::vector<std::uint8_t>(n, 0)};
  for (std::size_t t = 0; t + 1 < n; ++t) {
    if (seq.loss_mask[t + 1]) {
      out.targets[t] = seq.tokens[t + 1];
      out.mask[t] = 1;
    }
  }
  return out;
}

// ---- model ----------------------------------------------------------------------

struct TransformerModel::Binder {
  DoubleTape& tape;
  ParameterSet& params;
  std::map<std::string, Var> cache;

  Var operator()(const std::string& name) {
    auto it = cache.find(name);
    if (it != cache.end()) return it->second;
    auto& e = params.entry(name);
    Var v = tape.parameter(e.tensor, e.trainable);
    cache.emplace(name, v);
    return v;
  }
};

TransformerModel::TransformerModel(ModelConfig config, Variant variant, ParameterSet params)
    : config_(std::move(config)), variant_(variant), params_(std::move(params)) {
  config_.validate();
}

TransformerModel TransformerModel::init_dense(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  const Index d = cfg.d_model;
  const double s = cfg.init_std;
  ParameterSet p;
  const Index patch_dim = static_cast<Index>(cfg.patch_size) * cfg.patch_size * cfg.image_channels;
  p.add("encoder.patch.weight", gaussian({patch_dim, d}, s, rng));
  p.add("encoder.patch.bias", zeros({d}));
  p.add("connector.fc1.weight", gaussian({d, d}, s, rng));
  p.add("connector.fc1.bias", zeros({d}));
  p.add("connector.fc2.weight", gaussian({d, d}, s, rng));
  p.add("connector.fc2.bias", zeros({d}));
  p.add("embed.tokens", gaussian({cfg.vocab_size, d}, s, rng));
  p.add("embed.positions", gaussian({cfg.max_seq_len, d}, s, rng));
  for (int i = 0; i < cfg.n_layers; ++i) {
    const std::string b = block(i);
    p.add(b + "ln1.gain", ones({d}));
    p.add(b + "ln1.bias", zeros({d}));
    for (const char* proj : {"q", "k", "v", "o"}) {
      p.add(b + "attn." + proj + ".weight", gaussian({d, d}, s, rng));
      p.add(b + "attn." + proj + ".bias", zeros({d}));
    }
    p.add(b + "ln2.gain", ones({d}));
    p.add(b + "ln2.bias", zeros({d}));
    p.add(b + "ffn.fc1.weight", gaussian({d, cfg.d_ff}, s, rng));
    p.add(b + "ffn.fc1.bias", zeros({cfg.d_ff}));
    p.add(b + "ffn.fc2.weight", gaussian({cfg.d_ff, d}, s, rng));
    p.add(b + "ffn.fc2.bias", zeros({d}));
  }
  p.add("final_ln.gain", ones({d}));
  p.add("final_ln.bias", zeros({d}));
  p.add("head.weight", gaussian({d, cfg.vocab_size}, s, rng));
  p.add("head.bias", zeros({cfg.vocab_size}));
  return TransformerModel(cfg, Variant::dense, std::move(p));
}

Var TransformerModel::linear(Binder& b, Var x, const std::string& prefix) {
  Var out = add(matmul(x, b(prefix + ".weight")), b(prefix + ".bias"));
  if (variant_ == Variant::lora && params_.contains(prefix + ".lora_a")) {
    const double scaling = config_.lora_alpha / config_.lora_rank;
    Var delta = matmul(matmul(x, b(prefix + ".lora_a")), b(prefix + ".lora_b"));
    out = add(out, scale(delta, scaling));
  }
  return out;
}

Var TransformerModel::ffn(Binder& b, Var x, const std::string& prefix) {
  return linear(b, gelu(linear(b, x, prefix + ".fc1")), prefix + ".fc2");
}

Var TransformerModel::attention(Binder& b, Var x, const std::string& prefix) {
  Var q = linear(b, x, prefix + ".q");
  Var k = linear(b, x, prefix + ".k");
  Var v = linear(b, x, prefix + ".v");
  const Index hd = config_.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  std::vector<Var> heads;
  heads.reserve(static_cast<std::size_t>(config_.n_heads));
  for (int h = 0; h < config_.n_heads; ++h) {
    Var qh = slice_cols(q, h * hd, hd);
    Var kh = slice_cols(k, h * hd, hd);
    Var vh = slice_cols(v, h * hd, hd);
    Var probs = causal_softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
    heads.push_back(matmul(probs, vh));
  }
  return linear(b, concat_cols(heads), prefix + ".o");
}

Var TransformerModel::moe_ffn(Binder& b, Var x, int layer, ForwardResult& result, std::vector<Var>& aux_terms) {
  const std::string pre = block(layer) + "moe.";
  const int n_exp = config_.moe_baseline_experts;
  const Index rows = x.rows();
  Var probs = softmax_rows(linear(b, x, pre + "gate"));
  std::vector<std::vector<Index>> routed(static_cast<std::size_t>(n_exp));
  for (Index r = 0; r < rows; ++r) {
    Index best = 0;
    probs.value().row(r).maxCoeff(&best);
    routed[static_cast<std::size_t>(best)].push_back(r);
  }
  std::optional<Var> out;
  Matrix fraction(1, n_exp);
  for (int e = 0; e < n_exp; ++e) {
    const auto& idx = routed[static_cast<std::size_t>(e)];
    fraction(0, e) = static_cast<double>(idx.size()) / static_cast<double>(rows);
    result.traffic[static_cast<std::size_t>(layer)][static_cast<std::size_t>(e)] += static_cast<Index>(idx.size());
    if (idx.empty()) continue;
    Var h = ffn(b, gather_rows(x, idx), pre + "experts." + std::to_string(e));
    Var gate = slice_cols(gather_rows(probs, idx), e, 1);
    Var placed = scatter_rows(scale_rows(h, gate), idx, rows);
    out = out ? add(*out, placed) : placed;
  }
  // Switch-style balance term: n_exp * sum_e fraction_e * mean_prob_e.
  Var balance = scale(sum(mul(col_mean(probs), b.tape.constant(fraction))), static_cast<double>(n_exp));
  aux_terms.push_back(balance);
  return *out;
}

Var TransformerModel::patch_encode(DoubleTape& tape, const Image& image) {
  if (image.channels != config_.image_channels) {
    throw DimensionError("image has " + std::to_string(image.channels) + " channels, model expects " +
                         std::to_string(config_.image_channels));
  }
  Binder b{tape, params_, {}};
  Var patches = tape.constant(extract_patches(image, config_.patch_size));
  return linear(b, patches, "encoder.patch");
}

ForwardResult TransformerModel::forward(DoubleTape& tape, const Sequence& seq) {
  if (variant_ == Variant::gmoe && !seq.level) {
    throw RoutingError("G-MoE forward needs the sample's granularity level");
  }
  if (seq.length() > config_.max_seq_len) {
    throw SequenceLengthError("sequence of " + std::to_string(seq.length()) + " tokens exceeds max_seq_len " +
                              std::to_string(config_.max_seq_len));
  }
  Binder b{tape, params_, {}};
  ForwardResult result{Var{}, std::nullopt, {}};
  const std::size_t experts_per_block = variant_ == Variant::gmoe  ? 3
                                        : variant_ == Variant::moe ? static_cast<std::size_t>(config_.moe_baseline_experts)
                                                                   : 1;
  result.traffic.assign(static_cast<std::size_t>(config_.n_layers), std::vector<Index>(experts_per_block, 0));

  std::vector<Var> parts;
  for (const auto& img : seq.images) {
    Var tokens = patch_encode(tape, img);
    parts.push_back(linear(b, gelu(linear(b, tokens, "connector.fc1")), "connector.fc2"));
  }
  Index image_rows = 0;
  for (const auto& p : parts) image_rows += p.rows();
  if (image_rows != seq.image_tokens) throw DimensionError("image token count does not match the sequence layout");
  if (seq.length() > seq.image_tokens) {
    std::vector<int> ids(seq.tokens.begin() + seq.image_tokens, seq.tokens.end());
    parts.push_back(embedding(b("embed.tokens"), std::move(ids)));
  }
  Var x = concat_rows(parts);
  x = add(x, slice_rows(b("embed.positions"), 0, seq.length()));

  std::vector<Var> aux_terms;
  for (int i = 0; i < config_.n_layers; ++i) {
    const std::string pre = block(i);
    Var h = add(x, attention(b, layer_norm(x, b(pre + "ln1.gain"), b(pre + "ln1.bias"), config_.ln_eps), pre + "attn"));
    Var y = layer_norm(h, b(pre + "ln2.gain"), b(pre + "ln2.bias"), config_.ln_eps);
    Var f;
    switch (variant_) {
      case Variant::dense:
      case Variant::full:
      case Variant::lora: f = ffn(b, y, pre + "ffn"); break;
      case Variant::gmoe: {
        // Training-free routing: the sample's level picks exactly one expert.
        const auto lvl = static_cast<std::size_t>(*seq.level);
        f = ffn(b, y, pre + "experts." + expert_name(*seq.level));
        result.traffic[static_cast<std::size_t>(i)][lvl] += y.rows();
        break;
      }
      case Variant::moe: f = moe_ffn(b, y, i, result, aux_terms); break;
    }
    x = add(h, f);
  }
  x = layer_norm(x, b("final_ln.gain"), b("final_ln.bias"), config_.ln_eps);
  result.logits = linear(b, x, "head");
  if (!aux_terms.empty()) {
    Var total = aux_terms.front();
    for (std::size_t k = 1; k < aux_terms.size(); ++k) total = add(total, aux_terms[k]);
    result.aux_loss = scale(total, 1.0 / static_cast<double>(aux_terms.size()));
  }
  return result;
}

Matrix TransformerModel::logits(const Sequence& seq) {
  DoubleTape tape;
  return forward(tape, seq).logits.value();
}

// ---- parameter accounting & variant conversion ------------------------------------

ParameterCounts count_parameters(const ParameterSet& params, Variant /*variant*/) {
  ParameterCounts c;
  c.total = params.count(false);
  c.trainable = params.count(true);
  // Expert groups: "<block>experts.<name>." or "<block>moe.experts.<name>."
  std::map<std::string, std::map<std::string, Index>> groups;
  params.for_each([&](const ParameterSet::Entry& e) {
    const auto pos = e.name.find("experts.");
    if (pos == std::string::npos) return;
    const auto end = e.name.find('.', pos + 8);
    groups[e.name.substr(0, pos)][e.name.substr(pos + 8, end - pos - 8)] += e.tensor.size();
  });
  c.runtime_active = c.total;
  for (const auto& [blk, experts] : groups) {
    Index all = 0, largest = 0;
    for (const auto& [name, n] : experts) {
      all += n;
      largest = std::max(largest, n);
    }
    c.runtime_active -= all - largest;
  }
  return c;
}

ParameterSet expand_ffn_to_gmoe(const ParameterSet& dense, const ModelConfig& config) {
  bool has_ffn = false, has_experts = false;
  dense.for_each([&](const ParameterSet::Entry& e) {
    has_ffn = has_ffn || dense_ffn_block(e.name).has_value();
    has_experts = has_experts || e.name.find("experts.") != std::string::npos;
  });
  if (has_experts || !has_ffn) throw StateError("expand_to_gmoe needs a dense checkpoint; experts already present");
  ParameterSet out;
  dense.for_each([&](const ParameterSet::Entry& e) {
    const auto blk = dense_ffn_block(e.name);
    if (!blk) {
      out.add(e.name, e.tensor, false);
      return;
    }
    if (e.name != block(*blk) + "ffn.fc1.weight") return;
    for (GranularityLevel lvl : kAllLevels)
      for (const char* part : kFfnParts)
        out.add(block(*blk) + "experts." + expert_name(lvl) + "." + part, dense.at(block(*blk) + "ffn." + part), true);
  });
  (void)config;
  return out;
}

ParameterSet convert_to_classic_moe(const ParameterSet& dense, const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index d = config.d_model, w = config.moe_expert_ff;
  ParameterSet out;
  dense.for_each([&](const ParameterSet::Entry& e) {
    const auto blk = dense_ffn_block(e.name);
    if (!blk) {
      out.add(e.name, e.tensor, true);
      return;
    }
    if (e.name != block(*blk) + "ffn.fc1.weight") return;
    const std::string src = block(*blk) + "ffn.";
    const std::string pre = block(*blk) + "moe.";
    out.add(pre + "gate.weight", gaussian({d, config.moe_baseline_experts}, config.init_std, rng), true);
    out.add(pre + "gate.bias", zeros({config.moe_baseline_experts}), true);
    const Matrix& w1 = dense.at(src + "fc1.weight").values();
    const Matrix& b1 = dense.at(src + "fc1.bias").values();
    const Matrix& w2 = dense.at(src + "fc2.weight").values();
    for (int x = 0; x < config.moe_baseline_experts; ++x) {
      Index start = (static_cast<Index>(x) * w) % config.d_ff;
      if (start + w > config.d_ff) start = config.d_ff - w;
      const std::string ep = pre + "experts." + std::to_string(x) + ".";
      out.add(ep + "fc1.weight", Tensor({d, w}, w1.middleCols(start, w)), true);
      out.add(ep + "fc1.bias", Tensor({w}, b1.middleCols(start, w)), true);
      out.add(ep + "fc2.weight", Tensor({w, d}, w2.middleRows(start, w)), true);
      out.add(ep + "fc2.bias", dense.at(src + "fc2.bias"), true);
    }
  });
  return out;
}

ParameterSet attach_lora(const ParameterSet& dense, const ModelConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Index r = config.lora_rank;
  ParameterSet out;
  dense.for_each([&](const ParameterSet::Entry& e) {
    out.add(e.name, e.tensor, false);
    if (!starts_with(e.name, "blocks.") || e.name.size() < 5 || e.name.compare(e.name.size() - 5, 5, ".bias") != 0) {
      return;
    }
    const std::string prefix = e.name.substr(0, e.name.size() - 5);
    for (const char* target : kLoraTargets) {
      const std::string suffix = std::string(".") + target;
      if (prefix.size() < suffix.size() || prefix.compare(prefix.size() - suffix.size(), suffix.size(), suffix) != 0) {
        continue;
      }
      const Tensor& weight = dense.at(prefix + ".weight");
      const Index in = weight.shape()[0], outd = weight.shape()[1];
      out.add(prefix + ".lora_a", gaussian({in, r}, 1.0 / std::sqrt(static_cast<double>(in)), rng), true);
      out.add(prefix + ".lora_b", zeros({r, outd}), true);
    }
  });
  return out;
}

ParameterSet make_all_trainable(const ParameterSet& params) {
  ParameterSet out = params;
  out.for_each([](ParameterSet::Entry& e) { e.trainable = true; });
  return out;
}

}  // namespace granmoe
