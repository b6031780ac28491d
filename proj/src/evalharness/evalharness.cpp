#include "granmoe/evalharness/evalharness.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

#include "granmoe/datagen/datagen.hpp"
#include "granmoe/model/tokenizer.hpp"
#include "granmoe/textcodec/prompt.hpp"

namespace granmoe {

using ordered_json = nlohmann::ordered_json;

DecodeResult greedy_decode(TransformerModel& model, const InstructionSample& sample, int max_new) {
  DecodeResult out;
  const auto& tok = Tokenizer::standard();
  const auto mode = model.variant() == Variant::gmoe ? RouteMode::strict : RouteMode::lenient;
  const GranularityLevel level = route_granularity(sample.prompt, mode).level;
  if (max_new <= 0) {
    out.empty_budget = true;
    return out;
  }
  std::string prompt = sample.prompt;
  strip_image_markers(prompt);
  const auto prompt_ids = tok.encode(prompt);
  const int max_len = model.config().max_seq_len;
  while (static_cast<int>(out.ids.size()) < max_new) {
    const Sequence seq =
        assemble_sequence(sample.images, model.config().patch_size, prompt_ids, out.ids, level, max_len);
    if (seq.length() >= max_len) {
      out.truncated = true;
      break;
    }
    const Matrix logits = model.logits(seq);
    Index next = 0;
    logits.row(logits.rows() - 1).maxCoeff(&next);
    if (next == Tokenizer::kEos) {
      out.hit_eos = true;
      break;
    }
    out.ids.push_back(static_cast<int>(next));
  }
  if (!out.hit_eos && static_cast<int>(out.ids.size()) >= max_new) out.truncated = true;
  out.text = tok.decode(out.ids);
  return out;
}

TaskFamily task_family(TaskToken task) noexcept {
  switch (task) {
    case TaskToken::vg: return TaskFamily::grounding;
    case TaskToken::seg: return TaskFamily::segmentation;
    case TaskToken::cls:
    case TaskToken::vqa: return TaskFamily::classification;
    case TaskToken::cap:
    case TaskToken::ccd:
    case TaskToken::ref: return TaskFamily::captioning;
  }
  return TaskFamily::captioning;
}

std::string_view to_string(TaskFamily f) noexcept {
  switch (f) {
    case TaskFamily::grounding: return "grounding";
    case TaskFamily::segmentation: return "segmentation";
    case TaskFamily::captioning: return "captioning";
    case TaskFamily::classification: return "classification";
  }
  return "?";
}

ordered_json DecodeRecord::to_json() const {
  return {{"id", id}, {"prompt", prompt}, {"output", output}, {"parse_status", parse_status}};
}

namespace {

double mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Masks stacked vertically so one confusion count covers the whole split.
Mask stack(const std::vector<Mask>& masks) {
  Mask out;
  out.width = masks.front().width;
  for (const auto& m : masks) {
    if (m.width != out.width) throw DimensionError("segmentation split mixes image widths");
    out.height += m.height;
    out.labels.insert(out.labels.end(), m.labels.begin(), m.labels.end());
  }
  return out;
}

}  // namespace

MetricReport score_outputs(const std::vector<InstructionSample>& samples, const std::vector<std::string>& outputs,
                           const EvalOptions& opts, std::vector<DecodeRecord>* records) {
  if (samples.empty()) throw DegenerateInputError("evaluation split is empty");
  if (samples.size() != outputs.size()) throw DimensionError("one output per sample is required");
  const TaskFamily family = task_family(samples.front().task);
  std::set<TaskToken> tasks;
  for (const auto& s : samples) {
    if (task_family(s.task) != family) throw ContractError("evaluation split mixes task families");
    tasks.insert(s.task);
  }
  const LabelSet& labels = opts.labels ? *opts.labels : scene_labels();

  MetricReport rep;
  for (TaskToken t : tasks) rep.task += (rep.task.empty() ? "" : " ") + std::string(to_string(t));
  rep.sample_count = samples.size();
  rep.config = {{"family", std::string(to_string(family))}};
  std::vector<std::string> status(samples.size(), "ok");
  for (const auto& s : samples) rep.sample_ids.push_back(s.id);

  switch (family) {
    case TaskFamily::grounding: {
      std::vector<std::optional<NormalizedBBox>> preds;
      std::vector<NormalizedBBox> gts;
      std::vector<double> ious;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        gts.push_back(parse_bbox_text(samples[i].target));
        try {
          preds.emplace_back(parse_bbox_text(outputs[i]));
        } catch (const ParseError& e) {
          preds.emplace_back(std::nullopt);
          status[i] = std::string("failed: ") + e.what();
          ++rep.parse_failures;
        }
        ious.push_back(preds.back() ? iou_bbox(*preds.back(), gts.back()) : 0.0);
      }
      const auto acc = acc_at(preds, gts, {0.5, 0.7});
      rep.set("acc@0.5", acc[0]);
      rep.set("acc@0.7", acc[1]);
      rep.set("mean_iou", mean(ious));
      rep.set_per_sample("iou", ious);
      rep.config["thresholds"] = {0.5, 0.7};
      break;
    }
    case TaskFamily::segmentation: {
      std::vector<Mask> preds, gts;
      std::vector<double> per;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& img = samples[i].images.front();
        const Mask gt = decode_mask(parse_descriptor_text(samples[i].target, opts.grid_n, labels), labels, img.width,
                                    img.height);
        Mask pred(img.width, img.height, 0);  // a miss predicts background everywhere
        try {
          pred = decode_mask(parse_descriptor_text(outputs[i], opts.grid_n, labels), labels, img.width, img.height);
        } catch (const std::exception& e) {
          status[i] = std::string("failed: ") + e.what();
          ++rep.parse_failures;
        }
        per.push_back(segmentation_scores(pred, gt, labels).miou);
        preds.push_back(std::move(pred));
        gts.push_back(gt);
      }
      const auto sc = segmentation_scores(stack(preds), stack(gts), labels);
      rep.set("miou", sc.miou);
      rep.set("oa", sc.oa);
      rep.set("precision", sc.precision);
      rep.set("recall", sc.recall);
      rep.set("f1", sc.f1);
      rep.set("iou", sc.foreground_iou);
      rep.set_per_sample("miou", per);
      rep.config["grid_n"] = opts.grid_n;
      rep.config["miou_classes"] = "present in gt or pred";
      break;
    }
    case TaskFamily::captioning: {
      std::vector<Tokens> cands;
      std::vector<std::vector<Tokens>> refs;
      std::vector<double> b4, met, rl;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        cands.push_back(metric_tokens(outputs[i]));
        refs.push_back({metric_tokens(samples[i].target)});
        if (cands.back().empty()) {
          status[i] = "failed: empty output";
          ++rep.parse_failures;
        }
        b4.push_back(bleu(cands.back(), refs.back(), 4, opts.bleu_smoothing).bleu[3]);
        met.push_back(meteor_exact(cands.back(), refs.back()));
        rl.push_back(rouge_l(cands.back(), refs.back().front()));
      }
      const auto corpus = corpus_bleu(cands, refs, 4, opts.bleu_smoothing);
      for (int n = 1; n <= 4; ++n) rep.set("bleu" + std::to_string(n), corpus.bleu[static_cast<std::size_t>(n - 1)]);
      rep.set("bleu4_sentence_avg", mean(b4));
      rep.set("meteor_exact", mean(met));
      rep.set("rouge_l", mean(rl));
      const auto cd = cider(cands, refs, 4);
      rep.set("cider", cd.score);
      rep.set_per_sample("bleu4", b4);
      rep.set_per_sample("meteor_exact", met);
      rep.set_per_sample("rouge_l", rl);
      rep.set_per_sample("cider", cd.per_sample);
      rep.config["bleu_max_n"] = 4;
      rep.config["bleu_smoothing"] = opts.bleu_smoothing;
      rep.config["rouge_beta"] = 1.2;
      rep.config["cider_max_n"] = 4;
      rep.config["cider_degenerate"] = cd.degenerate;
      break;
    }
    case TaskFamily::classification: {
      std::vector<std::string> gts;
      for (const auto& s : samples) gts.push_back(s.target);
      std::vector<bool> hit;
      rep.set("accuracy", classification_accuracy(outputs, gts, &hit));
      std::vector<double> per;
      for (bool h : hit) per.push_back(h ? 1.0 : 0.0);
      rep.set_per_sample("correct", per);
      rep.config["normalization"] = "casefold, trim, strip trailing periods";
      break;
    }
  }
  if (records) {
    records->clear();
    for (std::size_t i = 0; i < samples.size(); ++i)
      records->push_back({samples[i].id, samples[i].prompt, outputs[i], status[i]});
  }
  return rep;
}

SplitEvaluation evaluate_split(TransformerModel& model, const std::vector<InstructionSample>& samples,
                               const EvalOptions& opts) {
  if (samples.empty()) throw DegenerateInputError("evaluation split is empty");
  std::vector<std::string> outputs;
  outputs.reserve(samples.size());
  for (const auto& s : samples) outputs.push_back(greedy_decode(model, s, opts.max_new).text);
  SplitEvaluation ev;
  ev.report = score_outputs(samples, outputs, opts, &ev.records);
  return ev;
}

std::vector<SplitEvaluation> evaluate_by_task(TransformerModel& model, const std::vector<InstructionSample>& samples,
                                              const EvalOptions& opts) {
  std::vector<SplitEvaluation> out;
  for (TaskToken t : kAllTasks) {
    std::vector<InstructionSample> group;
    for (const auto& s : samples)
      if (s.task == t) group.push_back(s);
    if (!group.empty()) out.push_back(evaluate_split(model, group, opts));
  }
  return out;
}

// ---- ablation -------------------------------------------------------------------------

AblationResult run_ablation(const Checkpoint& base, const std::vector<InstructionSample>& train_data,
                            const std::vector<InstructionSample>& eval_data, const AblationConfig& cfg) {
  AblationResult res;
  res.dense_runtime = count_parameters(base.params, base.variant).runtime_active;
  std::vector<InstructionSample> vqa, vg;
  for (const auto& s : eval_data) {
    if (s.task == TaskToken::vqa) vqa.push_back(s);
    if (s.task == TaskToken::vg) vg.push_back(s);
  }
  res.config = {{"stage2", cfg.stage2.to_json()},
                {"eval_vqa_samples", vqa.size()},
                {"eval_vg_samples", vg.size()},
                {"vqa_style", "answer accuracy on synthetic [VQA] samples, percent"},
                {"vg_style", "acc@0.5 on synthetic [VG] samples, percent"}};
  for (Variant v : cfg.variants) {
    AblationRow row;
    row.variant = v;
    try {
      TrainConfig tc = cfg.stage2;
      tc.stage = 2;
      tc.variant = v;
      TrainResult r = train_stage2(base, train_data, tc);
      row.data_order_hash = r.data_order_hash;
      const auto counts = count_parameters(r.checkpoint.params, v);
      row.trainable = counts.trainable;
      row.runtime = counts.runtime_active;
      TransformerModel model(r.checkpoint.model, v, std::move(r.checkpoint.params));
      if (!vqa.empty()) row.vqa_score = 100.0 * evaluate_split(model, vqa, cfg.eval).report.get("accuracy");
      if (!vg.empty()) row.vg_score = 100.0 * evaluate_split(model, vg, cfg.eval).report.get("acc@0.5");
    } catch (const std::exception& e) {
      row.failure = e.what();
    }
    res.rows.push_back(std::move(row));
  }
  auto find = [&](Variant v) -> const AblationRow* {
    for (const auto& r : res.rows)
      if (r.variant == v && !r.failure) return &r;
    return nullptr;
  };
  const auto *lora = find(Variant::lora), *gmoe = find(Variant::gmoe), *moe = find(Variant::moe),
             *full = find(Variant::full);
  res.trainable_ordering = lora && gmoe && moe && full && lora->trainable < gmoe->trainable &&
                           gmoe->trainable < moe->trainable && moe->trainable < full->trainable;
  res.runtime_gmoe_equals_dense = gmoe && gmoe->runtime == res.dense_runtime;
  res.shared_data_order = !res.rows.empty();
  for (const auto& r : res.rows)
    if (r.failure || r.data_order_hash != res.rows.front().data_order_hash) res.shared_data_order = false;
  return res;
}

ordered_json AblationResult::to_json() const {
  ordered_json rows_json = ordered_json::array();
  for (const auto& r : rows) {
    ordered_json j;
    j["variant"] = std::string(to_string(r.variant));
    j["trainable_params"] = r.trainable;
    j["runtime_params"] = r.runtime;
    j["vqa_style"] = r.vqa_score;
    j["vg_style"] = r.vg_score;
    j["data_order_hash"] = r.data_order_hash;
    j["failure"] = r.failure ? ordered_json(*r.failure) : ordered_json(nullptr);
    rows_json.push_back(std::move(j));
  }
  return {{"rows", rows_json},
          {"dense_runtime_params", dense_runtime},
          {"trainable_ordering_lora_gmoe_moe_full", trainable_ordering},
          {"runtime_gmoe_equals_dense", runtime_gmoe_equals_dense},
          {"shared_data_order", shared_data_order},
          {"config", config}};
}

std::string render_table(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& r : rows)
    for (std::size_t c = 0; c < r.size(); ++c) {
      if (width.size() <= c) width.push_back(0);
      width[c] = std::max(width[c], r[c].size());
    }
  std::ostringstream os;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < rows[i].size(); ++c) {
      os << rows[i][c];
      if (c + 1 < rows[i].size()) os << std::string(width[c] - rows[i][c].size() + 2, ' ');
    }
    os << '\n';
    if (i == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w + 2;
      os << std::string(total - 2, '-') << '\n';
    }
  }
  return os.str();
}

std::string AblationResult::to_text() const {
  auto fmt = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  std::vector<std::vector<std::string>> t{{"Method", "Trainable", "Runtime", "VQA-style", "VG-style", "Note"}};
  for (const auto& r : rows) {
    t.push_back({std::string(to_string(r.variant)), std::to_string(r.trainable), std::to_string(r.runtime),
                 r.failure ? "-" : fmt(r.vqa_score), r.failure ? "-" : fmt(r.vg_score),
                 r.failure ? "failed: " + *r.failure : ""});
  }
  std::string out = render_table(t);
  out += "trainable lora < gmoe < moe < full: " + std::string(trainable_ordering ? "yes" : "no") + "\n";
  out += "runtime gmoe == dense (" + std::to_string(dense_runtime) +
         "): " + std::string(runtime_gmoe_equals_dense ? "yes" : "no") + "\n";
  out += "shared data order: " + std::string(shared_data_order ? "yes" : "no") + "\n";
  return out;
}

}  // namespace granmoe
