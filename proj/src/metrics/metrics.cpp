#include "granmoe/metrics/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <set>
#include <unordered_map>

#include "granmoe/errors.hpp"

namespace granmoe {

namespace {

using NgramCounts = std::map<Tokens, long>;

NgramCounts ngrams(const Tokens& t, int n) {
  NgramCounts out;
  if (static_cast<int>(t.size()) < n) return out;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= t.size(); ++i) {
    ++out[Tokens(t.begin() + static_cast<std::ptrdiff_t>(i), t.begin() + static_cast<std::ptrdiff_t>(i) + n)];
  }
  return out;
}

// Reference length closest to the candidate's; ties go to the shorter one.
long closest_ref_length(long c, const std::vector<Tokens>& refs) {
  long best = static_cast<long>(refs.front().size());
  for (const auto& r : refs) {
    const long len = static_cast<long>(r.size());
    if (std::abs(len - c) < std::abs(best - c) || (std::abs(len - c) == std::abs(best - c) && len < best)) best = len;
  }
  return best;
}

struct BleuStats {
  std::vector<long> matched, total;
  long c = 0, r = 0;
};

void accumulate_bleu(BleuStats& s, const Tokens& cand, const std::vector<Tokens>& refs, int max_n) {
  if (refs.empty()) throw ContractError("bleu: at least one reference is required");
  for (int n = 1; n <= max_n; ++n) {
    const auto cc = ngrams(cand, n);
    NgramCounts max_ref;
    for (const auto& r : refs)
      for (const auto& [g, k] : ngrams(r, n)) max_ref[g] = std::max(max_ref[g], k);
    for (const auto& [g, k] : cc) {
      auto it = max_ref.find(g);
      s.matched[static_cast<std::size_t>(n - 1)] += std::min(k, it == max_ref.end() ? 0L : it->second);
      s.total[static_cast<std::size_t>(n - 1)] += k;
    }
  }
  s.c += static_cast<long>(cand.size());
  s.r += closest_ref_length(static_cast<long>(cand.size()), refs);
}

BleuResult finish_bleu(const BleuStats& s, int max_n, bool smoothing) {
  BleuResult out;
  out.candidate_length = s.c;
  out.reference_length = s.r;
  out.bleu.assign(static_cast<std::size_t>(max_n), 0.0);
  out.precisions.assign(static_cast<std::size_t>(max_n), 0.0);
  if (s.c == 0) {
    out.empty_candidate = true;
    return out;
  }
  out.brevity_penalty = s.c < s.r ? std::exp(1.0 - static_cast<double>(s.r) / static_cast<double>(s.c)) : 1.0;
  double log_sum = 0;
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    const auto i = static_cast<std::size_t>(n - 1);
    double m = static_cast<double>(s.matched[i]), t = static_cast<double>(s.total[i]);
    if (smoothing && n > 1) {  // add-one on higher orders
      m += 1;
      t += 1;
    }
    const double p = t > 0 ? m / t : 0.0;
    out.precisions[i] = p;
    if (p <= 0) zero = true;
    if (!zero) log_sum += std::log(p);
    out.bleu[i] = zero ? 0.0 : out.brevity_penalty * std::exp(log_sum / n);
  }
  return out;
}

}  // namespace

Tokens metric_tokens(std::string_view text) {
  Tokens out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      flush();
    } else if (std::ispunct(c)) {
      flush();
      out.emplace_back(1, ch);
    } else {
      cur += static_cast<char>(std::tolower(c));
    }
  }
  flush();
  return out;
}

BleuResult bleu(const Tokens& candidate, const std::vector<Tokens>& references, int max_n, bool smoothing) {
  if (max_n < 1 || max_n > 4) throw ContractError("bleu: max_n must be in 1..4");
  BleuStats s{std::vector<long>(static_cast<std::size_t>(max_n)), std::vector<long>(static_cast<std::size_t>(max_n))};
  accumulate_bleu(s, candidate, references, max_n);
  return finish_bleu(s, max_n, smoothing);
}

BleuResult corpus_bleu(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                       int max_n, bool smoothing) {
  if (max_n < 1 || max_n > 4) throw ContractError("bleu: max_n must be in 1..4");
  if (candidates.size() != references.size()) throw DimensionError("bleu: candidate and reference counts differ");
  BleuStats s{std::vector<long>(static_cast<std::size_t>(max_n)), std::vector<long>(static_cast<std::size_t>(max_n))};
  for (std::size_t i = 0; i < candidates.size(); ++i) accumulate_bleu(s, candidates[i], references[i], max_n);
  return finish_bleu(s, max_n, smoothing);
}

std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const Tokens& candidate, const Tokens& reference, double beta) {
  if (candidate.empty() || reference.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  const double b2 = beta * beta;
  return (1 + b2) * p * r / (r + b2 * p);
}

MeteorAlignment meteor_align(const Tokens& cand, const Tokens& ref, long node_budget) {
  // Exact search for the lexicographic best (matches, adjacent continuations)
  // by depth-first branch and bound. Continuations are tried first so the
  // first leaf is usually optimal and the bound prunes the rest.
  std::map<std::string, int> ids;
  auto id_of = [&](const std::string& w) { return ids.emplace(w, static_cast<int>(ids.size())).first->second; };
  std::vector<int> c, r;
  for (const auto& w : cand) c.push_back(id_of(w));
  for (const auto& w : ref) r.push_back(id_of(w));
  const std::size_t n = c.size(), types = ids.size();

  std::vector<std::vector<std::size_t>> slots(types);
  for (std::size_t j = 0; j < r.size(); ++j) slots[static_cast<std::size_t>(r[j])].push_back(j);
  // adj[k]: candidate k could continue a chunk started at k - 1
  std::vector<long> adj_suffix(n + 2, 0);
  for (std::size_t k = n; k-- > 1;) {
    bool ok = false;
    for (std::size_t j = 0; j + 1 < r.size() && !ok; ++j) ok = r[j] == c[k - 1] && r[j + 1] == c[k];
    adj_suffix[k] = adj_suffix[k + 1] + (ok ? 1 : 0);
  }
  std::vector<int> cand_left(types, 0), ref_free(types, 0);
  for (int t : c) ++cand_left[static_cast<std::size_t>(t)];
  for (int t : r) ++ref_free[static_cast<std::size_t>(t)];
  long cap = 0;  // sum over types of min(cand_left, ref_free)
  for (std::size_t t = 0; t < types; ++t) cap += std::min(cand_left[t], ref_free[t]);

  std::vector<bool> used(r.size(), false);
  std::pair<long, long> best{-1, -1};
  long nodes = 0;

  auto dfs = [&](auto&& self, std::size_t i, long prev, long m, long cont) -> void {
    if (i == n) {
      best = std::max(best, std::make_pair(m, cont));
      return;
    }
    if (++nodes > node_budget && best.first >= 0) return;
    long ub_cont = adj_suffix[i + 1] + (prev >= 0 ? 1 : 0);
    ub_cont = std::min(ub_cont, cap);
    if (std::make_pair(m + cap, cont + ub_cont) <= best) return;

    const auto t = static_cast<std::size_t>(c[i]);
    auto take = [&](std::size_t j) {
      const long before = std::min(cand_left[t], ref_free[t]);
      used[j] = true;
      --cand_left[t];
      --ref_free[t];
      cap += std::min(cand_left[t], ref_free[t]) - before;
      self(self, i + 1, static_cast<long>(j), m + 1, cont + (prev >= 0 && static_cast<long>(j) == prev + 1));
      cap -= std::min(cand_left[t], ref_free[t]) - before;
      ++cand_left[t];
      ++ref_free[t];
      used[j] = false;
    };
    const auto next = static_cast<std::size_t>(prev + 1);
    if (prev >= 0 && next < r.size() && !used[next] && r[next] == c[i]) take(next);
    for (std::size_t j : slots[t])
      if (!used[j] && !(prev >= 0 && j == next)) take(j);
    // leave cand[i] unmatched
    const long before = std::min(cand_left[t], ref_free[t]);
    --cand_left[t];
    cap += std::min(cand_left[t], ref_free[t]) - before;
    self(self, i + 1, -1, m, cont);
    cap -= std::min(cand_left[t], ref_free[t]) - before;
    ++cand_left[t];
  };
  dfs(dfs, 0, -1, 0, 0);
  return {static_cast<std::size_t>(best.first), static_cast<std::size_t>(best.first - best.second),
          nodes <= node_budget};
}

double meteor_exact(const Tokens& cand, const Tokens& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const auto a = meteor_align(cand, ref);
  if (a.matches == 0) return 0.0;
  const double m = static_cast<double>(a.matches);
  const double p = m / static_cast<double>(cand.size()), r = m / static_cast<double>(ref.size());
  const double fmean = 10 * p * r / (r + 9 * p);
  const double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / m, 3);
  return fmean * (1 - penalty);
}

double meteor_exact(const Tokens& cand, const std::vector<Tokens>& refs) {
  double best = 0;
  for (const auto& r : refs) best = std::max(best, meteor_exact(cand, r));
  return best;
}

CiderResult cider(const std::vector<Tokens>& candidates, const std::vector<std::vector<Tokens>>& references,
                  int max_n) {
  if (candidates.size() != references.size()) throw DimensionError("cider: candidate and reference counts differ");
  if (max_n < 1) throw ContractError("cider: max_n must be >= 1");
  CiderResult out;
  const std::size_t n_samples = candidates.size();
  out.per_sample.assign(n_samples, 0.0);
  out.degenerate = n_samples < 2;
  if (n_samples == 0) return out;
  const double log_n = std::log(static_cast<double>(n_samples));
  for (int n = 1; n <= max_n; ++n) {
    // document frequency over the reference sets
    std::map<Tokens, long> df;
    for (const auto& refs : references) {
      std::set<Tokens> seen;
      for (const auto& r : refs)
        for (const auto& [g, k] : ngrams(r, n)) seen.insert(g);
      for (const auto& g : seen) ++df[g];
    }
    auto vec = [&](const Tokens& t) {
      std::map<Tokens, double> v;
      for (const auto& [g, k] : ngrams(t, n)) {
        auto it = df.find(g);
        const double idf = log_n - std::log(static_cast<double>(std::max(1L, it == df.end() ? 0L : it->second)));
        v[g] = static_cast<double>(k) * idf;
      }
      return v;
    };
    auto norm = [](const std::map<Tokens, double>& v) {
      double s = 0;
      for (const auto& [g, x] : v) s += x * x;
      return std::sqrt(s);
    };
    for (std::size_t i = 0; i < n_samples; ++i) {
      const auto vc = vec(candidates[i]);
      const double nc = norm(vc);
      double acc = 0;
      for (const auto& r : references[i]) {
        const auto vr = vec(r);
        const double nr = norm(vr);
        if (nc == 0 || nr == 0) continue;
        double dot = 0;
        for (const auto& [g, x] : vc) {
          auto it = vr.find(g);
          if (it != vr.end()) dot += x * it->second;
        }
        acc += dot / (nc * nr);
      }
      if (!references[i].empty()) out.per_sample[i] += acc / static_cast<double>(references[i].size());
    }
  }
  double total = 0;
  for (auto& s : out.per_sample) {
    s = 10.0 * s / max_n;
    total += s;
  }
  out.score = total / static_cast<double>(n_samples);
  return out;
}

double iou_bbox(const NormalizedBBox& a, const NormalizedBBox& b) {
  const long area_a = static_cast<long>(a.x2 - a.x1) * (a.y2 - a.y1);
  const long area_b = static_cast<long>(b.x2 - b.x1) * (b.y2 - b.y1);
  if (area_a == 0 || area_b == 0) return a == b ? 1.0 : 0.0;
  const long iw = std::max(0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const long ih = std::max(0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const long inter = iw * ih;
  return static_cast<double>(inter) / static_cast<double>(area_a + area_b - inter);
}

std::vector<double> acc_at(const std::vector<std::optional<NormalizedBBox>>& preds,
                           const std::vector<NormalizedBBox>& gts, const std::vector<double>& thresholds) {
  if (preds.size() != gts.size()) throw DimensionError("acc_at: prediction and ground-truth counts differ");
  std::vector<double> out(thresholds.size(), 0.0);
  if (preds.empty()) return out;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double iou = preds[i] ? iou_bbox(*preds[i], gts[i]) : 0.0;
    for (std::size_t t = 0; t < thresholds.size(); ++t)
      if (iou >= thresholds[t]) out[t] += 1;
  }
  for (auto& v : out) v /= static_cast<double>(preds.size());
  return out;
}

std::map<int, ClassCounts> confusion_counts(const Mask& pred, const Mask& gt, const LabelSet& labels) {
  if (pred.width != gt.width || pred.height != gt.height) {
    throw DimensionError("segmentation masks differ in shape: " + std::to_string(pred.width) + "x" +
                         std::to_string(pred.height) + " vs " + std::to_string(gt.width) + "x" +
                         std::to_string(gt.height));
  }
  std::map<int, ClassCounts> counts;
  for (int id = 0; id < labels.size(); ++id) counts[id];
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const int p = pred.labels[i], g = gt.labels[i];
    if (!labels.contains(p) || !labels.contains(g)) throw LabelSetError("mask label outside the label set");
    if (p == g) {
      ++counts[p].tp;
    } else {
      ++counts[p].fp;
      ++counts[g].fn;
    }
  }
  const long n = static_cast<long>(gt.labels.size());
  for (auto& [id, c] : counts) c.tn = n - c.tp - c.fp - c.fn;
  return counts;
}

SegmentationScores segmentation_scores(const Mask& pred, const Mask& gt, const LabelSet& labels) {
  SegmentationScores s;
  s.counts = confusion_counts(pred, gt, labels);
  auto ratio = [](double a, double b) { return b > 0 ? a / b : 0.0; };
  long correct = 0;
  double iou_sum = 0, p_sum = 0, r_sum = 0, f_sum = 0, fg_iou_sum = 0;
  int fg = 0;
  for (const auto& [id, c] : s.counts) {
    ClassScores cs;
    cs.iou = ratio(c.tp, c.tp + c.fp + c.fn);
    cs.precision = ratio(c.tp, c.tp + c.fp);
    cs.recall = ratio(c.tp, c.tp + c.fn);
    cs.f1 = ratio(2 * cs.precision * cs.recall, cs.precision + cs.recall);
    s.per_class[id] = cs;
    correct += c.tp;
    if (c.tp + c.fp + c.fn == 0) continue;  // absent from both masks
    s.present.push_back(id);
    iou_sum += cs.iou;
    if (id != 0) {
      ++fg;
      p_sum += cs.precision;
      r_sum += cs.recall;
      f_sum += cs.f1;
      fg_iou_sum += cs.iou;
    }
  }
  s.miou = s.present.empty() ? 0.0 : iou_sum / static_cast<double>(s.present.size());
  s.oa = ratio(static_cast<double>(correct), static_cast<double>(gt.labels.size()));
  if (fg > 0) {
    s.precision = p_sum / fg;
    s.recall = r_sum / fg;
    s.f1 = f_sum / fg;
    s.foreground_iou = fg_iou_sum / fg;
  }
  return s;
}

std::string normalize_answer(std::string_view text) {
  std::size_t b = 0, e = text.size();
  auto space = [](char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; };
  while (b < e && space(text[b])) ++b;
  while (e > b && (space(text[e - 1]) || text[e - 1] == '.')) --e;
  std::string out(text.substr(b, e - b));
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

double classification_accuracy(const std::vector<std::string>& preds, const std::vector<std::string>& gts,
                                std::vector<bool>* per_sample) {
  if (preds.size() != gts.size()) throw DimensionError("classification: prediction and label counts differ");
  if (per_sample) per_sample->assign(preds.size(), false);
  if (preds.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const bool ok = normalize_answer(preds[i]) == normalize_answer(gts[i]);
    hits += ok ? 1 : 0;
    if (per_sample) (*per_sample)[i] = ok;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

void MetricReport::set(const std::string& name, double v) {
  for (auto& [k, x] : values)
    if (k == name) {
      x = v;
      return;
    }
  values.emplace_back(name, v);
}

double MetricReport::get(const std::string& name) const {
  for (const auto& [k, x] : values)
    if (k == name) return x;
  throw ContractError("report has no metric '" + name + "'");
}

bool MetricReport::has(const std::string& name) const {
  return std::any_of(values.begin(), values.end(), [&](const auto& kv) { return kv.first == name; });
}

void MetricReport::set_per_sample(const std::string& name, std::vector<double> v) {
  for (auto& [k, x] : per_sample)
    if (k == name) {
      x = std::move(v);
      return;
    }
  per_sample.emplace_back(name, std::move(v));
}

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["task"] = task;
  j["sample_count"] = sample_count;
  j["parse_failures"] = parse_failures;
  j["parse_failure_rate"] = sample_count ? static_cast<double>(parse_failures) / static_cast<double>(sample_count) : 0.0;
  nlohmann::ordered_json v = nlohmann::ordered_json::object();
  for (const auto& [k, x] : values) v[k] = x;
  j["metrics"] = v;
  j["config"] = config;
  nlohmann::ordered_json samples = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    nlohmann::ordered_json s;
    s["id"] = sample_ids[i];
    for (const auto& [k, xs] : per_sample)
      if (i < xs.size()) s[k] = xs[i];
    samples.push_back(std::move(s));
  }
  j["per_sample"] = samples;
  return j;
}

}  // namespace granmoe
