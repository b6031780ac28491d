#include "granmoe/training/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "granmoe/tensor/param_io.hpp"
#include "granmoe/textcodec/prompt.hpp"

namespace granmoe {

using ordered_json = nlohmann::ordered_json;

// ---- config -------------------------------------------------------------------

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ContractError("train config: stage must be 1 or 2");
  if (!(lr > 0) || !std::isfinite(lr)) throw ContractError("train config: lr must be positive");
  if (weight_decay < 0) throw ContractError("train config: weight_decay must be non-negative");
  if (warmup_ratio < 0 || warmup_ratio >= 1) throw ContractError("train config: warmup_ratio must be in [0, 1)");
  if (schedule != "cosine") throw ContractError("train config: only the cosine schedule is supported");
  if (epochs < 1) throw ContractError("train config: epochs must be >= 1");
  if (steps < 0) throw ContractError("train config: steps must be >= 0");
  if (batch_size < 1) throw ContractError("train config: batch_size must be >= 1");
  if (clip_norm <= 0) throw ContractError("train config: clip_norm must be positive");
  if (audit_every < 1) throw ContractError("train config: audit_every must be >= 1");
  if (stage == 1 && variant != Variant::dense) throw ContractError("train config: stage 1 trains the dense model");
  if (stage == 2 && variant == Variant::dense) {
    throw ContractError("train config: stage 2 variant must be gmoe, lora, moe or full");
  }
  for (const auto& [task, q] : quotas)
    if (q < 0) throw ContractError("train config: negative quota for " + std::string(to_string(task)));
}

ordered_json TrainConfig::to_json() const {
  ordered_json q = ordered_json::object();
  for (const auto& [task, n] : quotas) q[std::string(to_string(task))] = n;
  return {{"schema_version", 1},
          {"stage", stage},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"warmup_ratio", warmup_ratio},
          {"schedule", schedule},
          {"epochs", epochs},
          {"steps", steps},
          {"batch_size", batch_size},
          {"seed", seed},
          {"variant", std::string(to_string(variant))},
          {"clip_norm", clip_norm},
          {"audit_every", audit_every},
          {"quotas", q}};
}

TrainConfig TrainConfig::from_json(const ordered_json& j) {
  if (!j.contains("lr")) throw ContractError("train config: lr is required");
  TrainConfig c;
  c.stage = j.value("stage", c.stage);
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_ratio = j.value("warmup_ratio", c.warmup_ratio);
  c.schedule = j.value("schedule", c.schedule);
  c.epochs = j.value("epochs", c.epochs);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.variant = parse_variant(j.value("variant", std::string(c.stage == 1 ? "dense" : "gmoe")));
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.audit_every = j.value("audit_every", c.audit_every);
  if (j.contains("quotas")) {
    for (const auto& [key, val] : j.at("quotas").items()) {
      const auto task = parse_task_token(key);
      if (!task) throw ContractError("train config: unknown task token in quotas: " + key);
      c.quotas[*task] = val.get<int>();
    }
  }
  c.validate();
  return c;
}

// ---- checkpoints ----------------------------------------------------------------

std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const ModelConfig& model, const TrainConfig& train) {
  return fnv1a_hex(model.to_json().dump() + train.to_json().dump());
}

ordered_json checkpoint_to_json(const Checkpoint& ckpt) {
  ordered_json moments = ordered_json::array();
  for (const auto& [name, m] : ckpt.optimizer.state()) {
    moments.push_back({{"name", name},
                       {"m", std::vector<double>(m.m.data(), m.m.data() + m.m.size())},
                       {"v", std::vector<double>(m.v.data(), m.v.data() + m.v.size())}});
  }
  ordered_json doc;
  doc["format"] = kCheckpointFormat;
  doc["version"] = kCheckpointVersion;
  doc["stage"] = ckpt.stage;
  doc["variant"] = std::string(to_string(ckpt.variant));
  doc["step"] = ckpt.step;
  doc["config_hash"] = ckpt.config_hash;
  doc["lineage"] = ckpt.lineage;
  doc["model_config"] = ckpt.model.to_json();
  doc["train_config"] = ckpt.train_config;
  doc["optimizer"] = {{"t", ckpt.optimizer.steps_taken()}, {"moments", moments}};
  doc["tensors"] = params_to_json(ckpt.params);
  return doc;
}

Checkpoint checkpoint_from_json(const ordered_json& doc) {
  if (doc.value("format", std::string{}) != kCheckpointFormat) throw DataError("not a granmoe checkpoint");
  if (doc.at("version").get<int>() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
  Checkpoint c;
  c.stage = doc.at("stage").get<int>();
  c.variant = parse_variant(doc.at("variant").get<std::string>());
  c.step = doc.at("step").get<long>();
  c.config_hash = doc.at("config_hash").get<std::string>();
  c.lineage = doc.at("lineage");
  c.model = ModelConfig::from_json(doc.at("model_config"));
  c.train_config = doc.at("train_config");
  c.params = params_from_json(doc.at("tensors"));
  const auto& opt = doc.at("optimizer");
  c.optimizer.set_steps_taken(opt.at("t").get<long>());
  for (const auto& m : opt.at("moments")) {
    const auto name = m.at("name").get<std::string>();
    const Tensor& p = c.params.at(name);
    AdamW::Moments mom{Matrix(p.rows(), p.cols()), Matrix(p.rows(), p.cols())};
    const auto mv = m.at("m").get<std::vector<double>>();
    const auto vv = m.at("v").get<std::vector<double>>();
    if (static_cast<Index>(mv.size()) != p.size() || static_cast<Index>(vv.size()) != p.size()) {
      throw DataError("checkpoint: optimizer moments for '" + name + "' have the wrong size");
    }
    std::copy(mv.begin(), mv.end(), mom.m.data());
    std::copy(vv.begin(), vv.end(), mom.v.data());
    c.optimizer.state().emplace(name, std::move(mom));
  }
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << checkpoint_to_json(ckpt).dump() << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  try {
    return checkpoint_from_json(ordered_json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---- data plumbing --------------------------------------------------------------

Sequence make_sequence(const InstructionSample& s, const Tokenizer& tok, const ModelConfig& cfg) {
  std::string prompt = s.prompt;
  strip_image_markers(prompt);
  auto answer = tok.encode(s.target);
  answer.push_back(Tokenizer::kEos);
  return assemble_sequence(s.images, cfg.patch_size, tok.encode(prompt), answer, route_granularity(s.prompt),
                           cfg.max_seq_len);
}

std::vector<std::vector<std::size_t>> batch_plan(std::size_t n, const TrainConfig& cfg) {
  if (n == 0) throw TrainingError("training data is empty");
  const auto b = static_cast<std::size_t>(cfg.batch_size);
  const std::size_t total_steps =
      cfg.steps > 0 ? static_cast<std::size_t>(cfg.steps) : (static_cast<std::size_t>(cfg.epochs) * n + b - 1) / b;
  const std::size_t needed = cfg.steps > 0 ? total_steps * b : static_cast<std::size_t>(cfg.epochs) * n;
  std::vector<std::size_t> stream;
  stream.reserve(needed + n);
  for (std::uint64_t epoch = 0; stream.size() < needed; ++epoch) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + epoch + 1);
    std::shuffle(perm.begin(), perm.end(), rng);
    stream.insert(stream.end(), perm.begin(), perm.end());
  }
  stream.resize(needed);
  std::vector<std::vector<std::size_t>> plan;
  for (std::size_t i = 0; i < needed; i += b) {
    plan.emplace_back(stream.begin() + static_cast<std::ptrdiff_t>(i),
                      stream.begin() + static_cast<std::ptrdiff_t>(std::min(i + b, needed)));
  }
  return plan;
}

std::string data_order_hash(const std::vector<InstructionSample>& data,
                            const std::vector<std::vector<std::size_t>>& plan) {
  std::string ids;
  for (const auto& batch : plan)
    for (auto i : batch) ids += data[i].id + '\n';
  return fnv1a_hex(ids);
}

ordered_json LogRecord::to_json() const {
  return {{"step", step}, {"lr", lr}, {"loss", loss}, {"task_token", task_token}, {"granularity", granularity},
          {"variant", variant}};
}

ordered_json AuditRecord::to_json() const {
  return {{"step", step},
          {"logged_loss", logged_loss},
          {"recomputed_loss", recomputed_loss},
          {"loss_bitwise_equal", loss_bitwise_equal},
          {"frozen_grad_max", frozen_grad_max},
          {"nonzero_frozen", nonzero_frozen}};
}

namespace {

struct Targets {
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
};

Targets batch_targets(const std::vector<Sequence>& seqs, const std::vector<std::size_t>& batch) {
  Targets t;
  for (auto i : batch) {
    auto sh = next_token_targets(seqs[i]);
    t.ids.insert(t.ids.end(), sh.targets.begin(), sh.targets.end());
    t.mask.insert(t.mask.end(), sh.mask.begin(), sh.mask.end());
  }
  return t;
}

std::vector<Sequence> encode_all(const std::vector<InstructionSample>& data, const ModelConfig& cfg) {
  const auto& tok = Tokenizer::standard();
  std::vector<Sequence> out;
  out.reserve(data.size());
  for (const auto& s : data) out.push_back(make_sequence(s, tok, cfg));
  return out;
}

// Value-only replay of the batch loss on a fresh tape.
double recompute_loss(TransformerModel& model, const std::vector<Sequence>& seqs,
                      const std::vector<std::size_t>& batch) {
  DoubleTape tape;
  std::vector<Var> parts;
  for (auto i : batch) parts.push_back(model.forward(tape, seqs[i]).logits);
  const Matrix logits = concat_rows(parts).value();
  const Targets t = batch_targets(seqs, batch);
  return cross_entropy_masked_value<double>(logits, t.ids, t.mask);
}

TrainResult run_loop(Checkpoint ckpt, const std::vector<InstructionSample>& data, const TrainConfig& cfg,
                     const TrainOptions& opts) {
  if (data.empty()) throw TrainingError("training data is empty");
  const auto seqs = encode_all(data, ckpt.model);
  const auto plan = batch_plan(data.size(), cfg);
  const CosineSchedule schedule(cfg.lr, static_cast<long>(plan.size()), cfg.warmup_ratio);
  const std::string variant_name(to_string(ckpt.variant));

  TrainResult result;
  result.data_order_hash = data_order_hash(data, plan);
  TransformerModel model(ckpt.model, ckpt.variant, std::move(ckpt.params));
  AdamW optimizer = std::move(ckpt.optimizer);

  std::ofstream log_out;
  if (opts.log_path) {
    log_out.open(*opts.log_path, ckpt.step == 0 ? std::ios::trunc : std::ios::app);
    if (!log_out) throw DataError("cannot write " + opts.log_path->string());
  }

  long step = ckpt.step;
  for (; step < static_cast<long>(plan.size()); ++step) {
    if (opts.stop_after && step >= *opts.stop_after) break;
    const auto& batch = plan[static_cast<std::size_t>(step)];
    model.params().zero_grad();

    DoubleTape tape;
    std::vector<Var> parts, aux;
    for (auto i : batch) {
      auto fr = model.forward(tape, seqs[i]);
      parts.push_back(fr.logits);
      if (fr.aux_loss) aux.push_back(*fr.aux_loss);
    }
    Var logits = concat_rows(parts);
    Targets tgt = batch_targets(seqs, batch);
    Var ce = cross_entropy_masked(logits, tgt.ids, tgt.mask);
    const double loss = ce.item();
    if (!std::isfinite(loss)) {
      std::string ids;
      for (auto i : batch) ids += " " + data[i].id;
      throw TrainingError("non-finite loss at step " + std::to_string(step) + "; batch:" + ids);
    }
    Var objective = ce;
    if (!aux.empty()) {
      Var a = aux.front();
      for (std::size_t k = 1; k < aux.size(); ++k) a = add(a, aux[k]);
      objective = add(ce, scale(a, ckpt.model.moe_aux_weight / static_cast<double>(aux.size())));
    }
    tape.backward(objective);

    if (step % cfg.audit_every == 0) {
      AuditRecord audit;
      audit.step = step;
      audit.logged_loss = loss;
      audit.recomputed_loss = recompute_loss(model, seqs, batch);
      audit.loss_bitwise_equal = std::memcmp(&audit.logged_loss, &audit.recomputed_loss, sizeof(double)) == 0;
      model.params().for_each([&](const ParameterSet::Entry& e) {
        if (e.trainable || !e.tensor.has_grad()) return;
        const double m = e.tensor.grad().cwiseAbs().maxCoeff();
        audit.frozen_grad_max = std::max(audit.frozen_grad_max, m);
        if (m != 0.0) audit.nonzero_frozen.push_back(e.name);
      });
      result.audits.push_back(std::move(audit));
    }

    clip_grad_norm(model.params(), cfg.clip_norm);
    const double lr = schedule.lr(step);
    optimizer.step(model.params(), lr);

    std::vector<LogRecord> records;
    records.push_back({step, lr, loss, "*", "*", variant_name});
    Index row = 0;
    const Matrix& lv = logits.value();
    for (auto i : batch) {
      const Index len = seqs[i].length();
      const auto sh = next_token_targets(seqs[i]);
      const Matrix block = lv.middleRows(row, len);
      const double l = cross_entropy_masked_value<double>(block, sh.targets, sh.mask);
      records.push_back({step, lr, l, std::string(to_string(data[i].task)),
                         std::string(to_string(*seqs[i].level)), variant_name});
      row += len;
    }
    for (auto& r : records) {
      if (log_out) log_out << r.to_json().dump() << '\n';
      result.log.push_back(std::move(r));
    }
  }

  ckpt.params = std::move(model.params());
  ckpt.optimizer = std::move(optimizer);
  ckpt.step = step;
  result.checkpoint = std::move(ckpt);
  return result;
}

}  // namespace

BucketLosses bucket_losses(TransformerModel& model, const std::vector<InstructionSample>& data,
                           const Tokenizer& tok) {
  std::map<GranularityLevel, std::pair<double, std::size_t>> acc;
  for (const auto& s : data) {
    const Sequence seq = make_sequence(s, tok, model.config());
    const auto sh = next_token_targets(seq);
    const std::size_t n = static_cast<std::size_t>(std::count(sh.mask.begin(), sh.mask.end(), 1));
    const double l = cross_entropy_masked_value<double>(model.logits(seq), sh.targets, sh.mask);
    auto& [sum, count] = acc[*seq.level];
    sum += l * static_cast<double>(n);
    count += n;
  }
  BucketLosses out;
  for (const auto& [lvl, sc] : acc) out[lvl] = sc.first / static_cast<double>(sc.second);
  return out;
}

TrainResult train_stage1(const std::vector<InstructionSample>& data, const ModelConfig& model_cfg,
                         const TrainConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  if (cfg.stage != 1) throw ContractError("train_stage1 needs a stage-1 config");
  Checkpoint ckpt;
  ckpt.model = model_cfg;
  ckpt.variant = Variant::dense;
  ckpt.params = TransformerModel::init_dense(model_cfg, cfg.seed).params();
  ckpt.stage = 1;
  ckpt.config_hash = config_hash(model_cfg, cfg);
  ckpt.train_config = cfg.to_json();
  ckpt.lineage.push_back({{"stage", 1}, {"variant", "dense"}, {"seed", cfg.seed}, {"config_hash", ckpt.config_hash}});
  return run_loop(std::move(ckpt), data, cfg, opts);
}

Checkpoint expand_to_gmoe(const Checkpoint& stage1) {
  if (stage1.variant == Variant::gmoe) throw StateError("checkpoint is already expanded to G-MoE");
  if (stage1.variant != Variant::dense) {
    throw StateError("expand_to_gmoe needs a dense checkpoint, got " + std::string(to_string(stage1.variant)));
  }
  Checkpoint out;
  out.model = stage1.model;
  out.variant = Variant::gmoe;
  out.params = expand_ffn_to_gmoe(stage1.params, stage1.model);
  out.stage = 2;
  out.lineage = stage1.lineage;
  return out;
}

Checkpoint prepare_stage2(const Checkpoint& stage1, const TrainConfig& cfg) {
  cfg.validate();
  if (cfg.stage != 2) throw ContractError("stage-2 training needs a stage-2 config");
  if (stage1.variant != Variant::dense) {
    throw StateError("stage 2 starts from a dense stage-1 checkpoint, got " + std::string(to_string(stage1.variant)));
  }
  Checkpoint out;
  switch (cfg.variant) {
    case Variant::gmoe: out = expand_to_gmoe(stage1); break;
    case Variant::lora:
      out.params = attach_lora(stage1.params, stage1.model, cfg.seed);
      break;
    case Variant::moe:
      out.params = convert_to_classic_moe(stage1.params, stage1.model, cfg.seed);
      break;
    case Variant::full:
      out.params = make_all_trainable(stage1.params);
      break;
    case Variant::dense: throw ContractError("stage 2 variant cannot be dense");
  }
  out.model = stage1.model;
  out.variant = cfg.variant;
  out.stage = 2;
  out.step = 0;
  out.config_hash = config_hash(stage1.model, cfg);
  out.train_config = cfg.to_json();
  out.lineage = stage1.lineage;
  out.lineage.push_back({{"stage", 2},
                         {"variant", std::string(to_string(cfg.variant))},
                         {"seed", cfg.seed},
                         {"parent_config_hash", stage1.config_hash},
                         {"parent_step", stage1.step},
                         {"config_hash", out.config_hash}});
  return out;
}

TrainResult train_stage2(const Checkpoint& stage1, const std::vector<InstructionSample>& data,
                         const TrainConfig& cfg, const TrainOptions& opts) {
  for (const auto& s : data) {
    if (!s.granularity) throw DataError("stage-2 sample '" + s.id + "' has no granularity level");
  }
  Checkpoint start = prepare_stage2(stage1, cfg);
  const auto& tok = Tokenizer::standard();
  TransformerModel reference(stage1.model, stage1.variant, stage1.params);
  BucketLosses before = bucket_losses(reference, data, tok);
  TrainResult result = run_loop(std::move(start), data, cfg, opts);
  TransformerModel trained(result.checkpoint.model, result.checkpoint.variant, result.checkpoint.params);
  result.loss_before = std::move(before);
  result.loss_after = bucket_losses(trained, data, tok);
  return result;
}

TrainResult resume_training(const Checkpoint& ckpt, const std::vector<InstructionSample>& data,
                            const TrainOptions& opts) {
  const TrainConfig cfg = TrainConfig::from_json(ckpt.train_config);
  return run_loop(ckpt, data, cfg, opts);
}

Stage2Stream resample_stage2(const std::vector<InstructionSample>& data, const std::map<TaskToken, int>& quotas,
                             std::uint64_t seed) {
  std::map<TaskToken, std::vector<std::size_t>> pools;
  for (std::size_t i = 0; i < data.size(); ++i) pools[data[i].task].push_back(i);
  std::vector<std::size_t> chosen;
  for (const auto& [task, quota] : quotas) {
    auto& pool = pools[task];
    if (quota > static_cast<int>(pool.size())) {
      throw QuotaError("quota " + std::to_string(quota) + " for " + std::string(to_string(task)) + " exceeds the " +
                       std::to_string(pool.size()) + " available samples");
    }
    std::mt19937_64 rng(seed ^ (0x51ED27D0A3C5ULL * (static_cast<std::uint64_t>(task) + 1)));
    std::shuffle(pool.begin(), pool.end(), rng);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + quota);
  }
  std::sort(chosen.begin(), chosen.end());
  Stage2Stream out;
  for (auto i : chosen) {
    InstructionSample s = data[i];
    s.granularity = route_granularity(s.prompt);
    out.buckets[*s.granularity].push_back(out.samples.size());
    out.samples.push_back(std::move(s));
  }
  return out;
}

}  // namespace granmoe
