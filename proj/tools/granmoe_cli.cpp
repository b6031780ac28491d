// granmoe: codec, data, train, eval, ablate and report subcommands.

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "granmoe/cli/config.hpp"
#include "granmoe/datagen/datagen.hpp"
#include "granmoe/evalharness/evalharness.hpp"
#include "granmoe/training/training.hpp"

using namespace granmoe;
using ordered_json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool seed_required) {
  cmd->add_option("--config", c.config_path, "JSON config (defaults apply to missing fields)");
  cmd->add_option("--set", c.overrides, "override a config field: dotted.path=value");
  auto* s = cmd->add_option("--seed", c.seed, "random seed");
  if (seed_required) s->required();
}

ordered_json resolve_config(const Common& c) {
  ordered_json cfg = load_config(c.config_path);
  for (const auto& o : c.overrides) apply_override(cfg, o);
  return cfg;
}

// Parse a section, turning contract violations into usage errors.
template <typename Fn>
auto section(const char* what, Fn&& fn) {
  try {
    return fn();
  } catch (const ContractError& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string(what) + ": " + e.what());
  }
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

LabelSet parse_labels(const std::string& csv) {
  if (csv.empty()) return scene_labels();
  std::vector<std::string> names;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ',')) names.push_back(item);
  return LabelSet(names);
}

std::vector<InstructionSample> load_samples(const fs::path& path, const fs::path& root) {
  auto r = ingest_jsonl(path, root.empty() ? path.parent_path() : root);
  if (!r.errors.empty()) {
    std::ostringstream os;
    os << r.errors.size() << " malformed record(s) in " << path.string() << "; first: line " << r.errors.front().line
       << ": " << r.errors.front().message;
    throw DataError(os.str());
  }
  return r.samples;
}

std::string fixed(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string report_table(const MetricReport& r) {
  std::vector<std::vector<std::string>> rows{{"metric", "value"}};
  for (const auto& [k, v] : r.values) rows.push_back({k, fixed(v)});
  rows.push_back({"samples", std::to_string(r.sample_count)});
  rows.push_back({"parse_failures", std::to_string(r.parse_failures)});
  return r.task + "\n" + render_table(rows);
}

ordered_json train_summary(const TrainResult& r) {
  ordered_json j;
  j["final_step"] = r.checkpoint.step;
  j["variant"] = std::string(to_string(r.checkpoint.variant));
  j["config_hash"] = r.checkpoint.config_hash;
  j["data_order_hash"] = r.data_order_hash;
  j["final_loss"] = r.log.empty() ? ordered_json(nullptr) : ordered_json(r.log.front().loss);
  for (auto it = r.log.rbegin(); it != r.log.rend(); ++it)
    if (it->task_token == "*") {
      j["final_loss"] = it->loss;
      break;
    }
  ordered_json audits = ordered_json::array();
  for (const auto& a : r.audits) audits.push_back(a.to_json());
  j["audits"] = audits;
  auto buckets = [](const BucketLosses& b) {
    ordered_json o = ordered_json::object();
    for (const auto& [lvl, v] : b) o[std::string(to_string(lvl))] = v;
    return o;
  };
  if (r.loss_before) j["loss_before"] = buckets(*r.loss_before);
  if (r.loss_after) j["loss_after"] = buckets(*r.loss_after);
  j["lineage"] = r.checkpoint.lineage;
  return j;
}

// ---- report -------------------------------------------------------------------------

std::string render_log(const fs::path& log_path, const std::string& csv_path) {
  std::ifstream in(log_path);
  if (!in) throw DataError("cannot read " + log_path.string());
  struct Acc {
    double first = 0, last = 0;
    long n = 0;
  };
  std::map<std::string, Acc> by_task;
  std::ostringstream csv;
  csv << "step,lr,loss,task_token,granularity,variant\n";
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = ordered_json::parse(line);
    const auto task = j.at("task_token").get<std::string>();
    const double loss = j.at("loss").get<double>();
    auto& a = by_task[task];
    if (a.n == 0) a.first = loss;
    a.last = loss;
    ++a.n;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%s,%s,%s\n", j.at("step").get<long>(), j.at("lr").get<double>(),
                  loss, task.c_str(), j.at("granularity").get<std::string>().c_str(),
                  j.at("variant").get<std::string>().c_str());
    csv << buf;
  }
  if (!csv_path.empty()) write_text(csv_path, csv.str());
  std::vector<std::vector<std::string>> rows{{"task", "records", "first loss", "last loss"}};
  for (const auto& [task, a] : by_task) rows.push_back({task, std::to_string(a.n), fixed(a.first), fixed(a.last)});
  return render_table(rows);
}

std::string render_json_report(const ordered_json& j) {
  if (j.contains("rows")) {  // ablation
    std::vector<std::vector<std::string>> rows{{"Method", "Trainable", "Runtime", "VQA-style", "VG-style"}};
    for (const auto& r : j.at("rows")) {
      rows.push_back({r.at("variant").get<std::string>(), std::to_string(r.at("trainable_params").get<long>()),
                      std::to_string(r.at("runtime_params").get<long>()), fixed(r.at("vqa_style").get<double>(), 2),
                      fixed(r.at("vg_style").get<double>(), 2)});
    }
    return render_table(rows);
  }
  std::string out;
  const auto& reports = j.contains("reports") ? j.at("reports") : ordered_json::array({j});
  for (const auto& r : reports) {
    std::vector<std::vector<std::string>> rows{{"metric", "value"}};
    for (const auto& [k, v] : r.at("metrics").items()) rows.push_back({k, fixed(v.get<double>())});
    out += r.at("task").get<std::string>() + "\n" + render_table(rows) + "\n";
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"granularity-routed mixture-of-experts toolkit"};
  app.require_subcommand(1);

  // codec
  auto* codec = app.add_subcommand("codec", "mask <-> descriptor text");
  codec->require_subcommand(1);
  std::string mask_path, labels_csv, text, text_path, out_path;
  int grid = kDefaultGridN, width = 0, height = 0;
  bool lenient = false;
  auto* enc = codec->add_subcommand("encode", "mask file -> descriptor text");
  enc->add_option("--mask", mask_path, "mask file (W H grid or P2 graymap)")->required();
  enc->add_option("--grid", grid, "descriptor grid side");
  enc->add_option("--labels", labels_csv, "comma-separated label names, background first");
  auto* dec = codec->add_subcommand("decode", "descriptor text -> mask grid");
  dec->add_option("--text", text, "descriptor text");
  dec->add_option("--in", text_path, "file holding descriptor text");
  dec->add_option("--grid", grid, "descriptor grid side");
  dec->add_option("--width", width, "output width")->required();
  dec->add_option("--height", height, "output height")->required();
  dec->add_option("--labels", labels_csv, "comma-separated label names, background first");
  dec->add_option("--out", out_path, "write the mask here instead of stdout");
  dec->add_flag("--lenient", lenient, "pad/truncate malformed descriptors and report repairs");

  // data
  auto* data = app.add_subcommand("data", "dataset generation and ingestion");
  data->require_subcommand(1);
  Common gen_c, res_c;
  std::string data_out, data_in, image_root, errors_path;
  auto* gen = data->add_subcommand("gen", "generate the synthetic dataset");
  add_common(gen, gen_c, true);
  gen->add_option("--out", data_out, "output directory")->required();
  gen->add_option("--split", labels_csv, "config section to use: data or eval_data")->default_val("data");
  auto* ing = data->add_subcommand("ingest", "validate a JSON-lines dataset");
  ing->add_option("--in", data_in, "records")->required();
  ing->add_option("--image-root", image_root, "directory image paths are relative to");
  ing->add_option("--out", data_out, "validated records")->required();
  ing->add_option("--errors", errors_path, "error sidecar (default <out>.errors.jsonl)");
  auto* res = data->add_subcommand("resample", "stage-2 quota sampling");
  add_common(res, res_c, true);
  res->add_option("--in", data_in, "records")->required();
  res->add_option("--image-root", image_root, "directory image paths are relative to");
  res->add_option("--out", data_out, "resampled records")->required();

  // train
  auto* train = app.add_subcommand("train", "two-stage training");
  train->require_subcommand(1);
  Common s1_c, s2_c;
  std::string ckpt_out, log_path, from_path, variant_name, summary_path;
  std::optional<long> stop_after;
  auto* st1 = train->add_subcommand("stage1", "dense full fine-tune");
  add_common(st1, s1_c, true);
  st1->add_option("--data", data_in, "training records")->required();
  st1->add_option("--image-root", image_root, "directory image paths are relative to");
  st1->add_option("--out", ckpt_out, "checkpoint path")->required();
  st1->add_option("--log", log_path, "JSON-lines training log");
  st1->add_option("--summary", summary_path, "JSON run summary");
  st1->add_option("--stop-after", stop_after, "stop after this many steps (resumable)");
  auto* st2 = train->add_subcommand("stage2", "expand and fine-tune from a stage-1 checkpoint");
  add_common(st2, s2_c, true);
  st2->add_option("--from", from_path, "stage-1 checkpoint")->required();
  st2->add_option("--variant", variant_name, "gmoe | lora | moe | full");
  st2->add_option("--data", data_in, "training records")->required();
  st2->add_option("--image-root", image_root, "directory image paths are relative to");
  st2->add_option("--out", ckpt_out, "checkpoint path")->required();
  st2->add_option("--log", log_path, "JSON-lines training log");
  st2->add_option("--summary", summary_path, "JSON run summary");
  st2->add_option("--stop-after", stop_after, "stop after this many steps (resumable)");
  auto* rsm = train->add_subcommand("resume", "continue a checkpoint to its configured step count");
  rsm->add_option("--from", from_path, "checkpoint")->required();
  rsm->add_option("--data", data_in, "training records (as used by the original run)")->required();
  rsm->add_option("--image-root", image_root, "directory image paths are relative to");
  rsm->add_option("--out", ckpt_out, "checkpoint path")->required();
  rsm->add_option("--log", log_path, "JSON-lines training log (appended)");

  // eval
  Common ev_c;
  std::string decodes_path;
  auto* ev = app.add_subcommand("eval", "decode and score a dataset");
  add_common(ev, ev_c, false);
  ev->add_option("--ckpt", from_path, "checkpoint")->required();
  ev->add_option("--data", data_in, "evaluation records")->required();
  ev->add_option("--image-root", image_root, "directory image paths are relative to");
  ev->add_option("--out", out_path, "JSON report")->required();
  ev->add_option("--decodes", decodes_path, "JSON-lines decode outputs");

  // ablate
  Common ab_c;
  auto* ab = app.add_subcommand("ablate", "four-way fine-tuning comparison");
  add_common(ab, ab_c, true);
  ab->add_option("--out", data_out, "output directory")->required();

  // report
  std::string report_log, report_json, csv_path;
  auto* rep = app.add_subcommand("report", "render logs and reports as tables");
  rep->add_option("--log", report_log, "training log (JSON lines)");
  rep->add_option("--json", report_json, "eval or ablation report");
  rep->add_option("--csv", csv_path, "plot-ready CSV of the training log");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*enc) {
      const LabelSet labels = section("labels", [&] { return parse_labels(labels_csv); });
      const Mask m = read_mask_file(mask_path);
      std::cout << descriptor_to_text(encode_mask(m, grid, labels)) << '\n';
    } else if (*dec) {
      const LabelSet labels = section("labels", [&] { return parse_labels(labels_csv); });
      if (text.empty() == text_path.empty()) throw ConfigError("give exactly one of --text or --in");
      std::string body = text_path.empty() ? text : read_text(text_path);
      while (!body.empty() && (body.back() == '\n' || body.back() == '\r')) body.pop_back();
      DescriptorSequence seq;
      if (lenient) {
        auto r = parse_descriptor_text_lenient(body, grid, labels);
        for (const auto& note : r.repairs) std::cerr << "repaired: " << note << '\n';
        seq = r.sequence;
      } else {
        seq = parse_descriptor_text(body, grid, labels);
      }
      const Mask m = decode_mask(seq, labels, width, height);
      if (out_path.empty()) {
        std::cout << mask_to_text(m);
      } else {
        write_mask_file(out_path, m);
      }
    } else if (*gen) {
      const auto cfg = resolve_config(gen_c);
      const std::string split = labels_csv;
      if (split != "data" && split != "eval_data") throw ConfigError("--split must be data or eval_data");
      const DataKnobs knobs = section(split.c_str(), [&] { return DataKnobs::from_json(cfg.at(split)); });
      const auto g = generate_dataset(*gen_c.seed, knobs);
      export_dataset(data_out, g.samples);
      ordered_json skipped = ordered_json::array();
      for (const auto& s : g.skipped) skipped.push_back({{"scene", s.scene_id}, {"task", s.task}, {"reason", s.reason}});
      ordered_json manifest{{"seed", *gen_c.seed}, {"split", split}, {"knobs", knobs.to_json()},
                            {"samples", g.samples.size()}, {"skipped", skipped}};
      write_text(fs::path(data_out) / "manifest.json", manifest.dump(2) + "\n");
      std::cout << g.samples.size() << " samples, " << g.skipped.size() << " skipped -> " << data_out << '\n';
    } else if (*ing) {
      const auto r = ingest_jsonl(data_in, image_root.empty() ? fs::path(data_in).parent_path() : fs::path(image_root));
      std::vector<ordered_json> good, bad;
      for (const auto& s : r.samples) good.push_back(sample_to_json(s));
      for (const auto& e : r.errors) bad.push_back(e.to_json());
      write_jsonl(data_out, good);
      write_jsonl(errors_path.empty() ? data_out + ".errors.jsonl" : errors_path, bad);
      std::cout << r.samples.size() << " valid, " << r.errors.size() << " rejected\n";
    } else if (*res) {
      const auto cfg = resolve_config(res_c);
      const TrainConfig tc = section("stage2", [&] { return TrainConfig::from_json(cfg.at("stage2")); });
      const auto samples = load_samples(data_in, image_root);
      const auto stream = resample_stage2(samples, tc.quotas, *res_c.seed);
      std::vector<ordered_json> out;
      for (const auto& s : stream.samples) out.push_back(sample_to_json(s));
      write_jsonl(data_out, out);
      for (const auto& [lvl, idx] : stream.buckets) std::cout << to_string(lvl) << ": " << idx.size() << '\n';
    } else if (*st1) {
      const auto cfg = resolve_config(s1_c);
      const ModelConfig mc = section("model", [&] { return ModelConfig::from_json(cfg.at("model")); });
      TrainConfig tc = section("stage1", [&] { return TrainConfig::from_json(cfg.at("stage1")); });
      tc.seed = *s1_c.seed;
      section("stage1", [&] { tc.validate(); return 0; });
      const auto samples = load_samples(data_in, image_root);
      TrainOptions opts;
      if (!log_path.empty()) opts.log_path = log_path;
      opts.stop_after = stop_after;
      const auto r = train_stage1(samples, mc, tc, opts);
      save_checkpoint(ckpt_out, r.checkpoint);
      const auto summary = train_summary(r);
      if (!summary_path.empty()) write_text(summary_path, summary.dump(2) + "\n");
      std::cout << "stage 1: " << r.checkpoint.step << " steps, final loss " << fixed(summary["final_loss"].get<double>())
                << " -> " << ckpt_out << '\n';
    } else if (*st2) {
      auto cfg = resolve_config(s2_c);
      if (!variant_name.empty()) cfg["stage2"]["variant"] = variant_name;
      TrainConfig tc = section("stage2", [&] { return TrainConfig::from_json(cfg.at("stage2")); });
      tc.seed = *s2_c.seed;
      const Checkpoint base = load_checkpoint(from_path);
      auto samples = load_samples(data_in, image_root);
      if (!tc.quotas.empty()) samples = resample_stage2(samples, tc.quotas, tc.seed).samples;
      TrainOptions opts;
      if (!log_path.empty()) opts.log_path = log_path;
      opts.stop_after = stop_after;
      const auto r = train_stage2(base, samples, tc, opts);
      save_checkpoint(ckpt_out, r.checkpoint);
      const auto summary = train_summary(r);
      if (!summary_path.empty()) write_text(summary_path, summary.dump(2) + "\n");
      std::vector<std::vector<std::string>> rows{{"granularity", "loss before", "loss after"}};
      for (const auto& [lvl, v] : *r.loss_before)
        rows.push_back({std::string(to_string(lvl)), fixed(v), fixed(r.loss_after->at(lvl))});
      std::cout << "stage 2 (" << to_string(tc.variant) << "): " << r.checkpoint.step << " steps -> " << ckpt_out
                << '\n'
                << render_table(rows);
    } else if (*rsm) {
      const Checkpoint ck = load_checkpoint(from_path);
      auto samples = load_samples(data_in, image_root);
      const TrainConfig tc = TrainConfig::from_json(ck.train_config);
      if (ck.stage == 2 && !tc.quotas.empty()) samples = resample_stage2(samples, tc.quotas, tc.seed).samples;
      TrainOptions opts;
      if (!log_path.empty()) opts.log_path = log_path;
      const auto r = resume_training(ck, samples, opts);
      save_checkpoint(ckpt_out, r.checkpoint);
      std::cout << "resumed to step " << r.checkpoint.step << " -> " << ckpt_out << '\n';
    } else if (*ev) {
      const auto cfg = resolve_config(ev_c);
      EvalOptions eo;
      eo.max_new = section("eval", [&] { return cfg.at("eval").at("max_new").get<int>(); });
      eo.bleu_smoothing = section("eval", [&] { return cfg.at("eval").at("bleu_smoothing").get<bool>(); });
      Checkpoint ck = load_checkpoint(from_path);
      eo.grid_n = ck.model.grid_n;
      TransformerModel model(ck.model, ck.variant, std::move(ck.params));
      const auto samples = load_samples(data_in, image_root);
      const auto results = evaluate_by_task(model, samples, eo);
      ordered_json reports = ordered_json::array();
      std::vector<ordered_json> decodes;
      for (const auto& r : results) {
        reports.push_back(r.report.to_json());
        for (const auto& d : r.records) decodes.push_back(d.to_json());
        std::cout << report_table(r.report) << '\n';
      }
      ordered_json doc{{"checkpoint", from_path}, {"variant", std::string(to_string(ck.variant))},
                       {"config", cfg.at("eval")}, {"reports", reports}};
      write_text(out_path, doc.dump(2) + "\n");
      if (!decodes_path.empty()) write_jsonl(decodes_path, decodes);
    } else if (*ab) {
      const auto cfg = resolve_config(ab_c);
      const std::uint64_t seed = *ab_c.seed;
      const ModelConfig mc = section("model", [&] { return ModelConfig::from_json(cfg.at("model")); });
      const DataKnobs train_knobs = section("data", [&] { return DataKnobs::from_json(cfg.at("data")); });
      const DataKnobs eval_knobs = section("eval_data", [&] { return DataKnobs::from_json(cfg.at("eval_data")); });
      TrainConfig s1 = section("stage1", [&] { return TrainConfig::from_json(cfg.at("stage1")); });
      TrainConfig s2 = section("stage2", [&] { return TrainConfig::from_json(cfg.at("stage2")); });
      s1.seed = s2.seed = seed;
      const auto train_data = generate_dataset(seed, train_knobs).samples;
      const auto eval_data = generate_dataset(seed + 1, eval_knobs).samples;
      const auto base = train_stage1(train_data, mc, s1);
      auto stage2_data = train_data;
      if (!s2.quotas.empty()) stage2_data = resample_stage2(train_data, s2.quotas, seed).samples;
      AblationConfig ac;
      ac.stage2 = s2;
      ac.eval.max_new = cfg.at("eval").at("max_new").get<int>();
      ac.eval.grid_n = mc.grid_n;
      auto result = run_ablation(base.checkpoint, stage2_data, eval_data, ac);
      result.config["seed"] = seed;
      result.config["config"] = cfg;
      fs::create_directories(data_out);
      write_text(fs::path(data_out) / "ablation.json", result.to_json().dump(2) + "\n");
      write_text(fs::path(data_out) / "ablation.txt", result.to_text());
      std::cout << result.to_text();
    } else if (*rep) {
      if (report_log.empty() == report_json.empty()) throw ConfigError("give exactly one of --log or --json");
      if (!report_log.empty()) {
        std::cout << render_log(report_log, csv_path);
      } else {
        std::cout << render_json_report(ordered_json::parse(read_text(report_json)));
      }
    }
  } catch (const ConfigError& e) {
    std::cerr << ordered_json{{"error", "usage"}, {"message", e.what()}}.dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << ordered_json{{"error", "runtime"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}
