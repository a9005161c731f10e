#include "xecg/heads.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <memory>
#include <numeric>

#include "xecg/optim.hpp"

namespace xecg {

const char* to_string(HeadKind k) {
  switch (k) {
    case HeadKind::kMultilabel: return "multilabel";
    case HeadKind::kMulticlass: return "multiclass";
    case HeadKind::kRegression: return "regression";
    case HeadKind::kSegmentation: return "segmentation";
    case HeadKind::kDetection: return "detection";
    case HeadKind::kCox: return "cox";
  }
  return "?";
}

HeadKind head_kind_from_string(const std::string& s) {
  for (HeadKind k : {HeadKind::kMultilabel, HeadKind::kMulticlass, HeadKind::kRegression, HeadKind::kSegmentation,
                     HeadKind::kDetection, HeadKind::kCox})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown head kind '" + s + "'");
}

bool is_patch_level(HeadKind k) { return k == HeadKind::kSegmentation || k == HeadKind::kDetection; }

TaskHead init_head(HeadKind kind, std::size_t embed_dim, std::size_t out_dim, Rng& rng) {
  if (out_dim == 0 || embed_dim == 0) throw ConfigError("init_head: zero-sized head");
  if ((kind == HeadKind::kRegression || kind == HeadKind::kCox || kind == HeadKind::kSegmentation) && out_dim != 1)
    throw ConfigError(std::string("init_head: ") + to_string(kind) + " head has one output");
  if (kind == HeadKind::kMulticlass && out_dim < 2) throw ConfigError("init_head: multiclass needs >= 2 classes");
  TaskHead h;
  h.kind = kind;
  h.out_dim = out_dim;
  Tensor w({embed_dim, out_dim});
  for (double& v : w.values()) v = rng.normal(0.0, 0.01);
  h.params.add("head.W", std::move(w));
  h.params.add("head.b", Tensor({out_dim}, 0.0));
  return h;
}

void WindowPolicy::validate() const {
  if (!(window_len_s >= 0.0) || !(overlap_s >= 0.0)) throw ConfigError("window: negative length or overlap");
  if (window_len_s > 0.0 && overlap_s >= window_len_s) throw ConfigError("window: overlap must be below window_len");
  if (window_len_s == 0.0 && overlap_s > 0.0) throw ConfigError("window: overlap without a window length");
}

const char* to_string(AdaptMode m) { return m == AdaptMode::kLinearProbe ? "linear_probe" : "finetune"; }

void AdaptPlan::validate() const {
  if (!(lr_head >= 0.0) || !(lr_encoder >= 0.0)) throw ConfigError("adapt: learning rates must be >= 0");
  if (!(layerwise_decay > 0.0 && layerwise_decay <= 1.0)) throw ConfigError("adapt: layerwise_lr_decay in (0, 1]");
  if (!(weight_decay >= 0.0)) throw ConfigError("adapt: weight_decay must be >= 0");
  if (epochs == 0 || batch_size == 0) throw ConfigError("adapt: epochs and batch_size must be positive");
  window.validate();
}

AdaptPlan adapt_plan_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "learning_rate_head", "learning_rate_encoder", "layerwise_lr_decay", "drop_path", "batch_size",
      "window_len",         "patch_representation",  "weight_decay",       "epochs",    "mode",
      "overlap",            "warmup_epochs",         "minute_average",     "cox_strict"};
  if (!j.is_object()) throw ConfigError("adapt plan must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("adapt plan: unknown key '" + k + "'");
  AdaptPlan p;
  try {
    if (j.contains("mode")) {
      const auto m = j.at("mode").get<std::string>();
      if (m == "linear_probe" || m == "probe") p.mode = AdaptMode::kLinearProbe;
      else if (m == "finetune") p.mode = AdaptMode::kFinetune;
      else throw ConfigError("adapt plan: unknown mode '" + m + "'");
    }
    p.lr_head = j.value("learning_rate_head", p.lr_head);
    p.lr_encoder = j.value("learning_rate_encoder", p.lr_encoder);
    p.layerwise_decay = j.value("layerwise_lr_decay", p.layerwise_decay);
    p.drop_path = j.value("drop_path", p.drop_path);
    p.batch_size = j.value("batch_size", p.batch_size);
    p.weight_decay = j.value("weight_decay", p.weight_decay);
    p.epochs = j.value("epochs", p.epochs);
    p.warmup_epochs = j.value("warmup_epochs", p.warmup_epochs);
    if (j.contains("window_len") && !j.at("window_len").is_null()) p.window.window_len_s = j.at("window_len").get<double>();
    p.window.overlap_s = j.value("overlap", p.window.overlap_s);
    p.window.minute_average = j.value("minute_average", p.window.minute_average);
    p.cox_strict = j.value("cox_strict", p.cox_strict);
    if (j.contains("patch_representation")) p.pool = pool_mode_from_string(j.at("patch_representation").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("adapt plan: ") + e.what());
  }
  if (p.drop_path != 0.0) spdlog::warn("adapt: drop_path={} is accepted but has no effect", p.drop_path);
  p.validate();
  return p;
}

nlohmann::json to_json(const AdaptPlan& p) {
  return {{"mode", to_string(p.mode)},
          {"learning_rate_head", p.lr_head},
          {"learning_rate_encoder", p.lr_encoder},
          {"layerwise_lr_decay", p.layerwise_decay},
          {"drop_path", p.drop_path},
          {"batch_size", p.batch_size},
          {"window_len", p.window.window_len_s},
          {"overlap", p.window.overlap_s},
          {"minute_average", p.window.minute_average},
          {"patch_representation", to_string(p.pool)},
          {"weight_decay", p.weight_decay},
          {"epochs", p.epochs},
          {"warmup_epochs", p.warmup_epochs},
          {"cox_strict", p.cox_strict}};
}

// ---- heads ---------------------------------------------------------------------------

Tensor classify(const Tensor& pooled, const TaskHead& head) {
  Tensor out = matmul(pooled, head.params.at("head.W"));
  const Tensor& b = head.params.at("head.b");
  const std::size_t k = b.size();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % k];
  return out;
}

Var classify(Var pooled, const BoundParams& head) {
  return ops::add(ops::matmul(pooled, head["head.W"]), head["head.b"]);
}

Tensor detection_logits(const Tensor& reps, const TaskHead& head) {
  Tensor out = classify(reps, head);
  return out.reshaped({out.size()});
}

namespace {
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }
double logit(double p) {
  p = std::clamp(p, 1e-12, 1.0 - 1e-12);
  return std::log(p / (1.0 - p));
}
}  // namespace

std::vector<std::size_t> extract_peaks(std::span<const double> logits, double fs, double threshold,
                                       double refractory_ms) {
  const std::size_t n = logits.size();
  std::vector<double> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = sigmoid(logits[i]);
  std::vector<std::size_t> cand;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(p[i] > threshold)) continue;
    // plateaus resolve to their last sample
    const bool left = i == 0 || p[i] >= p[i - 1];
    const bool right = i + 1 == n || p[i] > p[i + 1];
    if (left && right) cand.push_back(i);
  }
  std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  const double min_gap = refractory_ms * fs / 1000.0;
  std::vector<std::size_t> kept;
  for (std::size_t c : cand) {
    bool ok = true;
    for (std::size_t k : kept)
      if (std::fabs(static_cast<double>(c) - static_cast<double>(k)) < min_gap) {
        ok = false;
        break;
      }
    if (ok) kept.push_back(c);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

std::vector<double> rpeak_targets(std::size_t length, std::span<const std::size_t> peaks, std::size_t radius) {
  std::vector<double> t(length, 0.0);
  for (std::size_t pk : peaks) {
    if (pk >= length) continue;
    const std::size_t lo = pk >= radius ? pk - radius : 0;
    const std::size_t hi = std::min(length - 1, pk + radius);
    for (std::size_t i = lo; i <= hi; ++i) t[i] = 1.0;
  }
  return t;
}

std::size_t patches_per_minute(std::size_t patch_size, double fs) {
  const double ppm = 60.0 * fs / static_cast<double>(patch_size);
  if (std::fabs(ppm - std::round(ppm)) > 1e-9 || ppm < 1.0)
    throw ConfigError("a minute is not a whole number of patches at this rate and patch size");
  return static_cast<std::size_t>(std::round(ppm));
}

std::vector<double> minute_average(std::span<const double> patch_probs, std::size_t ppm) {
  if (ppm == 0) throw ContractError("minute_average: zero patches per minute");
  const std::size_t n_min = patch_probs.size() / ppm;
  if (patch_probs.size() % ppm != 0)
    spdlog::warn("minute_average: dropping a partial minute of {} patches", patch_probs.size() % ppm);
  std::vector<double> out(n_min, 0.0);
  for (std::size_t m = 0; m < n_min; ++m) {
    double s = 0.0;
    for (std::size_t i = 0; i < ppm; ++i) s += patch_probs[m * ppm + i];
    out[m] = s / static_cast<double>(ppm);
  }
  return out;
}

std::vector<double> segment_minutes(const Tensor& reps, const TaskHead& head, std::size_t patch_size, double fs) {
  const Tensor z = classify(reps, head);
  std::vector<double> probs(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) probs[i] = sigmoid(z[i]);
  return minute_average(probs, patches_per_minute(patch_size, fs));
}

namespace {

struct CoxEval {
  double loss = 0.0;
  std::vector<double> grad;
};

// Groups tied times; the risk sums and the gradient coefficients are suffix
// and prefix sums over the groups.
CoxEval cox_eval(std::span<const double> phi, std::span<const double> time, std::span<const int> event, bool strict) {
  const std::size_t n = phi.size();
  if (time.size() != n || event.size() != n) throw ShapeError("cox_loss: phi, time and event sizes differ");
  if (n == 0 || std::none_of(event.begin(), event.end(), [](int e) { return e != 0; }))
    throw ContractError("cox_loss: no events");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return time[a] < time[b]; });
  std::vector<std::size_t> group(n);
  std::vector<double> gsum;
  const double m = *std::max_element(phi.begin(), phi.end());
  std::vector<double> w(n);
  for (std::size_t r = 0; r < n; ++r) {
    const std::size_t i = order[r];
    if (r == 0 || time[i] != time[order[r - 1]]) gsum.push_back(0.0);
    group[i] = gsum.size() - 1;
    w[i] = std::exp(phi[i] - m);
    gsum.back() += w[i];
  }
  const std::size_t g_count = gsum.size();
  std::vector<double> s_ge(g_count + 1, 0.0);
  for (std::size_t g = g_count; g-- > 0;) s_ge[g] = s_ge[g + 1] + gsum[g];
  std::vector<double> coef(g_count, 0.0);
  CoxEval out;
  out.grad.assign(n, 0.0);
  std::size_t used = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!event[i]) continue;
    const std::size_t g = group[i];
    const double s = strict ? s_ge[g + 1] : s_ge[g];
    if (s <= 0.0) continue;  // strict risk set empty
    out.loss += -(phi[i] - m) + std::log(s);
    coef[g] += 1.0 / s;
    out.grad[i] -= 1.0;
    ++used;
  }
  if (used == 0) throw ContractError("cox_loss: no event has a non-empty risk set");
  // subject k is at risk for events in groups g <= group(k) (g < group(k) when strict)
  std::vector<double> pre(g_count + 1, 0.0);
  for (std::size_t g = 0; g < g_count; ++g) pre[g + 1] = pre[g] + coef[g];
  for (std::size_t k = 0; k < n; ++k) out.grad[k] += w[k] * (strict ? pre[group[k]] : pre[group[k] + 1]);
  return out;
}

}  // namespace

Var cox_loss(Var phi, std::span<const double> time, std::span<const int> event, bool strict) {
  CoxEval ev = cox_eval(phi.value().values(), time, event, strict);
  Buffer g(ev.grad.begin(), ev.grad.end());
  return phi.tape()->record(Tensor::scalar(ev.loss), {phi}, [phi, g = std::move(g)](Tape& tp, std::size_t self) {
    const double up = tp.grad_buffer(self)[0];
    double* gp = tp.grad_slot(phi.id());
    for (std::size_t i = 0; i < g.size(); ++i) gp[i] += up * g[i];
  });
}

double cox_loss(const Tensor& phi, std::span<const double> time, std::span<const int> event, bool strict) {
  return cox_eval(phi.values(), time, event, strict).loss;
}

// ---- metrics -------------------------------------------------------------------------

const char* to_string(MetricId m) {
  switch (m) {
    case MetricId::kAuroc: return "auroc";
    case MetricId::kMacroF1: return "macro_f1";
    case MetricId::kOneMinusSmape: return "one_minus_smape";
    case MetricId::kRpeakF1: return "rpeak_f1";
    case MetricId::kCIndex: return "c_index";
  }
  return "?";
}

MetricId metric_from_string(const std::string& s) {
  for (MetricId m : {MetricId::kAuroc, MetricId::kMacroF1, MetricId::kOneMinusSmape, MetricId::kRpeakF1,
                     MetricId::kCIndex})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown metric '" + s + "'");
}

MetricId default_metric(HeadKind k) {
  switch (k) {
    case HeadKind::kMultilabel:
    case HeadKind::kMulticlass:
    case HeadKind::kSegmentation: return MetricId::kAuroc;
    case HeadKind::kRegression: return MetricId::kOneMinusSmape;
    case HeadKind::kDetection: return MetricId::kRpeakF1;
    case HeadKind::kCox: return MetricId::kCIndex;
  }
  return MetricId::kAuroc;
}

namespace {

std::vector<double> softmax_row(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - m);
  for (double& v : p) v /= s;
  return p;
}

void minute_pairs(const Predictions& pred, std::span<const TaskSample> samples, std::vector<double>& s,
                  std::vector<int>& y) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& mp = pred.minute_probs.at(i);
    const std::size_t n = std::min(mp.size(), samples[i].y.size());
    for (std::size_t m = 0; m < n; ++m) {
      s.push_back(mp[m]);
      y.push_back(samples[i].y[m] > 0.5 ? 1 : 0);
    }
  }
}

}  // namespace

double compute_metric(MetricId metric, HeadKind kind, const Predictions& pred, std::span<const TaskSample> samples,
                      double tol_total_ms) {
  const std::size_t n = samples.size();
  if (n == 0) throw MetricError("compute_metric: no samples");
  auto bad = [&] {
    return MetricError(std::string("metric ") + to_string(metric) + " does not apply to " + to_string(kind) + " heads");
  };
  switch (metric) {
    case MetricId::kAuroc: {
      if (kind == HeadKind::kSegmentation) {
        std::vector<double> s;
        std::vector<int> y;
        minute_pairs(pred, samples, s, y);
        return auroc(s, y);
      }
      if (kind != HeadKind::kMultilabel && kind != HeadKind::kMulticlass) throw bad();
      const std::size_t c = pred.scores.at(0).size();
      std::vector<double> s;
      std::vector<int> y;
      for (std::size_t i = 0; i < n; ++i) {
        const auto row = kind == HeadKind::kMulticlass ? softmax_row(pred.scores[i]) : pred.scores[i];
        s.insert(s.end(), row.begin(), row.end());
        for (std::size_t k = 0; k < c; ++k) {
          if (kind == HeadKind::kMulticlass) y.push_back(static_cast<std::size_t>(samples[i].y.at(0)) == k ? 1 : 0);
          else y.push_back(samples[i].y.at(k) > 0.5 ? 1 : 0);
        }
      }
      return macro_auroc(s, y, c);
    }
    case MetricId::kMacroF1: {
      if (kind == HeadKind::kMulticlass) {
        std::vector<int> p, y;
        for (std::size_t i = 0; i < n; ++i) {
          const auto& z = pred.scores[i];
          p.push_back(static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin()));
          y.push_back(static_cast<int>(samples[i].y.at(0)));
        }
        return confusion_suite(p, y, pred.scores[0].size()).f1;
      }
      if (kind == HeadKind::kMultilabel) {
        const std::size_t c = pred.scores.at(0).size();
        double total = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
          std::vector<int> p, y;
          for (std::size_t i = 0; i < n; ++i) {
            p.push_back(pred.scores[i][k] > 0.0 ? 1 : 0);
            y.push_back(samples[i].y.at(k) > 0.5 ? 1 : 0);
          }
          total += confusion_suite(p, y, 2).f1;
        }
        return total / static_cast<double>(c);
      }
      if (kind == HeadKind::kSegmentation) {
        std::vector<double> s;
        std::vector<int> y, p;
        minute_pairs(pred, samples, s, y);
        for (double v : s) p.push_back(v > 0.5 ? 1 : 0);
        return confusion_suite(p, y, 2).f1;
      }
      throw bad();
    }
    case MetricId::kOneMinusSmape: {
      if (kind != HeadKind::kRegression) throw bad();
      std::vector<double> p, y;
      for (std::size_t i = 0; i < n; ++i) {
        p.push_back(pred.scores[i].at(0));
        y.push_back(samples[i].y.at(0));
      }
      return 1.0 - smape(p, y);
    }
    case MetricId::kRpeakF1: {
      if (kind != HeadKind::kDetection) throw bad();
      // pooled over records
      std::size_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const PeakMatch m = rpeak_f1(pred.peaks.at(i), samples[i].peaks, samples[i].record.fs, tol_total_ms);
        tp += m.tp;
        fp += m.fp;
        fn += m.fn;
      }
      const double den = static_cast<double>(2 * tp + fp + fn);
      return den > 0.0 ? 2.0 * static_cast<double>(tp) / den : 1.0;
    }
    case MetricId::kCIndex: {
      if (kind != HeadKind::kCox) throw bad();
      std::vector<double> r, t;
      std::vector<int> e;
      for (std::size_t i = 0; i < n; ++i) {
        r.push_back(pred.scores[i].at(0));
        t.push_back(samples[i].time);
        e.push_back(samples[i].event);
      }
      return concordance_index(r, t, e);
    }
  }
  throw bad();
}

// ---- windows and batching ------------------------------------------------------------

namespace {

struct Window {
  std::size_t sample = 0;
  std::size_t start = 0;      // in samples
  std::size_t n_patches = 0;
};

struct WindowSet {
  std::vector<Window> windows;
  std::vector<std::size_t> usable;  // per sample, samples covered by windows
};

std::size_t to_multiple(double seconds, double fs, std::size_t unit) {
  const auto len = static_cast<std::size_t>(std::llround(seconds * fs));
  return len / unit * unit;
}

WindowSet make_windows(const EncoderConfig& cfg, HeadKind kind, const WindowPolicy& pol,
                       std::span<const TaskSample> samples) {
  const std::size_t p = cfg.patch_size;
  const bool seg = kind == HeadKind::kSegmentation;
  const std::size_t unit = seg ? patches_per_minute(p, cfg.model_rate_hz) * p : p;
  std::size_t win = 0, step = 0;
  if (pol.window_len_s > 0.0) {
    win = to_multiple(pol.window_len_s, cfg.model_rate_hz, unit);
    if (win == 0) throw ConfigError("window_len shorter than one " + std::string(seg ? "minute" : "patch"));
    step = win - to_multiple(pol.overlap_s, cfg.model_rate_hz, unit);
    if (step == 0) throw ConfigError("window overlap leaves no stride");
  }
  WindowSet ws;
  ws.usable.assign(samples.size(), 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::size_t len = samples[i].record.length();
    const std::size_t end = len / unit * unit;
    ws.usable[i] = end;
    if (end == 0) {
      spdlog::warn("record '{}' is shorter than one {}; skipped", samples[i].record.record_id,
                   seg ? "minute" : "patch");
      continue;
    }
    if (seg && end != len) spdlog::warn("record '{}': partial trailing minute dropped", samples[i].record.record_id);
    if (win == 0 || win >= end) {
      ws.windows.push_back({i, 0, end / p});
      continue;
    }
    std::size_t s = 0;
    for (; s + win <= end; s += step) ws.windows.push_back({i, s, win / p});
    if (ws.windows.back().start + win < end) ws.windows.push_back({i, (end - win) / unit * unit, win / p});
  }
  return ws;
}

Tensor slice_rows(const Tensor& m, std::size_t row0, std::size_t rows) {
  const std::size_t d = m.dim(1);
  Tensor out({rows, d});
  std::copy_n(m.data() + row0 * d, rows * d, out.data());
  return out;
}

// Patch matrix per sample, built once.
std::vector<Tensor> sample_patches(const EncoderConfig& cfg, std::span<const TaskSample> samples) {
  std::vector<Tensor> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    if (s.record.length() < cfg.patch_size) out.emplace_back(Shape{1, cfg.patch_width()});
    else out.push_back(record_patches(cfg, s.record));
  }
  return out;
}

// Batches of window indices; windows in a batch share a length whenever
// the batch goes through the sequence model.
std::vector<std::vector<std::size_t>> make_batches(const std::vector<Window>& w, std::size_t batch, bool by_length,
                                                   Rng* rng) {
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < w.size(); ++i) groups[by_length ? w[i].n_patches : 0].push_back(i);
  std::vector<std::vector<std::size_t>> out;
  for (auto& [key, idx] : groups) {
    if (rng) {
      const auto perm = rng->permutation(idx.size());
      std::vector<std::size_t> shuffled(idx.size());
      for (std::size_t k = 0; k < idx.size(); ++k) shuffled[k] = idx[perm[k]];
      idx = std::move(shuffled);
    }
    for (std::size_t s = 0; s < idx.size(); s += batch)
      out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                       idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), s + batch)));
  }
  if (rng) {
    const auto perm = rng->permutation(out.size());
    std::vector<std::vector<std::size_t>> shuffled(out.size());
    for (std::size_t k = 0; k < out.size(); ++k) shuffled[k] = std::move(out[perm[k]]);
    out = std::move(shuffled);
  }
  return out;
}

Tensor window_features_fast(const EncoderConfig& cfg, const ParamSet& enc, const std::vector<Tensor>& patches,
                            const std::vector<Window>& w, const std::vector<std::size_t>& batch, Tensor* reps_out) {
  std::vector<Tensor> mats;
  mats.reserve(batch.size());
  for (std::size_t b : batch)
    mats.push_back(slice_rows(patches[w[b].sample], w[b].start / cfg.patch_size, w[b].n_patches));
  Tensor x = embed_fast(cfg, enc, stack_time_major(mats));
  const SeqBatch sb{w[batch[0]].n_patches, batch.size()};
  run_blocks_fast(cfg, enc, x, sb);
  if (reps_out) *reps_out = x;
  return x;
}

struct Targets {
  double mean = 0.0, sd = 1.0;
};

Predictions predict_impl(const EncoderConfig& cfg, const ParamSet& enc, const TaskHead& head,
                         std::span<const TaskSample> samples, const AdaptPlan& plan, Targets tgt) {
  const WindowSet ws = make_windows(cfg, head.kind, plan.window, samples);
  const auto patches = sample_patches(cfg, samples);
  const std::size_t n = samples.size();
  const std::size_t p = cfg.patch_size;
  const bool patch_kind = is_patch_level(head.kind);
  Predictions out;
  std::vector<std::vector<double>> acc(n), cnt(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t len = patch_kind ? (head.kind == HeadKind::kDetection ? ws.usable[i] : ws.usable[i] / p)
                                       : head.out_dim;
    acc[i].assign(len, 0.0);
    cnt[i].assign(patch_kind ? len : 1, 0.0);
  }
  for (const auto& batch : make_batches(ws.windows, 32, true, nullptr)) {
    const SeqBatch sb{ws.windows[batch[0]].n_patches, batch.size()};
    Tensor reps;
    window_features_fast(cfg, enc, patches, ws.windows, batch, &reps);
    if (!patch_kind) {
      const Tensor z = classify(pool_fast(cfg, enc, reps, sb, plan.pool), head);
      for (std::size_t b = 0; b < batch.size(); ++b) {
        const std::size_t s = ws.windows[batch[b]].sample;
        for (std::size_t k = 0; k < head.out_dim; ++k) acc[s][k] += z.at(b, k);
        cnt[s][0] += 1.0;
      }
      continue;
    }
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const Window& w = ws.windows[batch[b]];
      const Tensor z = classify(unstack_sample(reps, batch.size(), b), head);
      const std::size_t off = head.kind == HeadKind::kDetection ? w.start : w.start / p;
      for (std::size_t k = 0; k < z.size(); ++k) {
        acc[w.sample][off + k] += sigmoid(z[k]);
        cnt[w.sample][off + k] += 1.0;
      }
    }
  }
  out.scores.resize(n);
  if (head.kind == HeadKind::kDetection) out.peaks.resize(n);
  if (head.kind == HeadKind::kSegmentation) out.minute_probs.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!patch_kind) {
      auto& row = out.scores[i];
      row.assign(head.out_dim, 0.0);
      if (cnt[i][0] > 0.0)
        for (std::size_t k = 0; k < head.out_dim; ++k) row[k] = acc[i][k] / cnt[i][0];
      if (head.kind == HeadKind::kRegression) row[0] = row[0] * tgt.sd + tgt.mean;
      continue;
    }
    std::vector<double> prob(acc[i].size());
    for (std::size_t k = 0; k < prob.size(); ++k) prob[k] = cnt[i][k] > 0.0 ? acc[i][k] / cnt[i][k] : 0.0;
    if (head.kind == HeadKind::kDetection) {
      std::vector<double> z(prob.size());
      for (std::size_t k = 0; k < prob.size(); ++k) z[k] = logit(prob[k]);
      out.peaks[i] = extract_peaks(z, cfg.model_rate_hz);
    } else {
      out.minute_probs[i] = minute_average(prob, patches_per_minute(p, cfg.model_rate_hz));
    }
  }
  return out;
}

// Loss of one batch given features on the tape: pooled [B x E] or time-major [N*B x E].
// Returns an invalid Var when the batch carries no signal (cox batch without events).
Var head_loss(const TaskHead& head, const BoundParams& hp, Var feats, const std::vector<Window>& w,
              const std::vector<std::size_t>& batch, std::span<const TaskSample> samples, std::size_t patch_size,
              double fs, Targets tgt, bool cox_strict) {
  const std::size_t bsz = batch.size();
  Tape& tape = *feats.tape();
  switch (head.kind) {
    case HeadKind::kMultilabel: {
      Tensor y({bsz, head.out_dim});
      for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t k = 0; k < head.out_dim; ++k) y.at(b, k) = samples[w[batch[b]].sample].y.at(k);
      return ops::bce_with_logits(classify(feats, hp), y);
    }
    case HeadKind::kMulticlass: {
      std::vector<int> y(bsz);
      for (std::size_t b = 0; b < bsz; ++b) y[b] = static_cast<int>(samples[w[batch[b]].sample].y.at(0));
      return ops::softmax_cross_entropy(classify(feats, hp), y);
    }
    case HeadKind::kRegression: {
      Tensor y({bsz, 1});
      for (std::size_t b = 0; b < bsz; ++b) y[b] = (samples[w[batch[b]].sample].y.at(0) - tgt.mean) / tgt.sd;
      return ops::mean_all(ops::square(ops::sub(classify(feats, hp), tape.constant(y))));
    }
    case HeadKind::kCox: {
      std::vector<double> t(bsz);
      std::vector<int> e(bsz);
      std::size_t events = 0;
      for (std::size_t b = 0; b < bsz; ++b) {
        t[b] = samples[w[batch[b]].sample].time;
        e[b] = samples[w[batch[b]].sample].event;
        events += e[b] ? 1 : 0;
      }
      if (events == 0) return {};
      try {
        return ops::scale(cox_loss(classify(feats, hp), t, e, cox_strict), 1.0 / static_cast<double>(events));
      } catch (const ContractError&) {
        return {};
      }
    }
    case HeadKind::kDetection: {
      const std::size_t n = w[batch[0]].n_patches;
      Var z = classify(feats, hp);  // [N*B x P]
      z = ops::reshape(ops::permute(ops::reshape(z, {n, bsz, patch_size}), {1, 0, 2}), {bsz, n * patch_size});
      Tensor y({bsz, n * patch_size});
      for (std::size_t b = 0; b < bsz; ++b) {
        const Window& win = w[batch[b]];
        std::vector<std::size_t> local;
        for (std::size_t pk : samples[win.sample].peaks)
          if (pk >= win.start && pk < win.start + n * patch_size) local.push_back(pk - win.start);
        const auto tr = rpeak_targets(n * patch_size, local);
        std::copy(tr.begin(), tr.end(), y.data() + b * n * patch_size);
      }
      return ops::bce_with_logits(z, y);
    }
    case HeadKind::kSegmentation: {
      const std::size_t n = w[batch[0]].n_patches;
      const std::size_t ppm = patches_per_minute(patch_size, fs);
      Var z = ops::transpose(ops::reshape(classify(feats, hp), {n, bsz}));  // [B x N]
      Tensor y({bsz, n});
      for (std::size_t b = 0; b < bsz; ++b) {
        const Window& win = w[batch[b]];
        const auto& lab = samples[win.sample].y;
        const std::size_t m0 = win.start / patch_size / ppm;
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t m = m0 + k / ppm;
          y.at(b, k) = m < lab.size() ? lab[m] : 0.0;
        }
      }
      return ops::bce_with_logits(z, y);
    }
  }
  throw ContractError("head_loss: unknown head kind");
}

}  // namespace

Predictions predict(const EncoderConfig& cfg, const ParamSet& encoder, const TaskHead& head,
                    std::span<const TaskSample> samples, const AdaptPlan& plan) {
  return predict_impl(cfg, encoder, head, samples, plan, {});
}

Predictions predict(const EncoderConfig& cfg, const AdaptResult& model, std::span<const TaskSample> samples,
                    const AdaptPlan& plan) {
  return predict_impl(cfg, model.encoder, model.head, samples, plan, {model.target_mean, model.target_sd});
}

AdaptResult adapt(const EncoderConfig& cfg, const ParamSet& encoder, TaskHead head, std::span<const TaskSample> train,
                  std::span<const TaskSample> val, const AdaptPlan& plan, MetricId metric, std::uint64_t seed) {
  plan.validate();
  if (train.empty()) throw ContractError("adapt: empty training set");
  const bool finetune = plan.mode == AdaptMode::kFinetune;
  const bool patch_kind = is_patch_level(head.kind);
  const std::size_t p = cfg.patch_size;

  AdaptResult res;
  res.encoder = encoder;
  if (head.kind == HeadKind::kRegression) {
    double s = 0.0, ss = 0.0;
    for (const auto& t : train) s += t.y.at(0);
    res.target_mean = s / static_cast<double>(train.size());
    for (const auto& t : train) ss += (t.y.at(0) - res.target_mean) * (t.y.at(0) - res.target_mean);
    res.target_sd = train.size() > 1 ? std::sqrt(ss / static_cast<double>(train.size() - 1)) : 1.0;
    if (!(res.target_sd > 0.0)) res.target_sd = 1.0;
  }
  const Targets tgt{res.target_mean, res.target_sd};

  const WindowSet ws = make_windows(cfg, head.kind, plan.window, train);
  if (ws.windows.empty()) throw ContractError("adapt: no training window fits the records");
  const auto patches = sample_patches(cfg, train);

  // Frozen features for the probe: pooled [E] or reps [N x E] per window.
  std::vector<Tensor> cached;
  if (!finetune) {
    cached.resize(ws.windows.size());
    for (const auto& batch : make_batches(ws.windows, 32, true, nullptr)) {
      const SeqBatch sb{ws.windows[batch[0]].n_patches, batch.size()};
      Tensor reps;
      window_features_fast(cfg, encoder, patches, ws.windows, batch, &reps);
      if (patch_kind) {
        for (std::size_t b = 0; b < batch.size(); ++b) cached[batch[b]] = unstack_sample(reps, batch.size(), b);
      } else {
        const Tensor pooled = pool_fast(cfg, encoder, reps, sb, plan.pool);
        for (std::size_t b = 0; b < batch.size(); ++b) cached[batch[b]] = slice_rows(pooled, b, 1);
      }
    }
  }

  Rng rng(seed);
  const bool by_length = finetune || patch_kind;
  const std::size_t per_epoch = make_batches(ws.windows, plan.batch_size, by_length, nullptr).size();
  const std::size_t total = per_epoch * plan.epochs;
  const std::size_t warmup = std::min(total, per_epoch * plan.warmup_epochs);

  ParamSet work = encoder;  // finetuned copy; res.encoder holds the best epoch
  AdamW opt_head(head.params);
  AdamW opt_enc(encoder);
  const std::vector<double> head_scales(head.params.size(), 1.0);
  const auto enc_scales = layer_lr_scales(encoder, cfg.n_blocks(), plan.layerwise_decay);

  res.head = head;
  res.best_val = -std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < plan.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t loss_n = 0;
    for (const auto& batch : make_batches(ws.windows, plan.batch_size, by_length, &rng)) {
      const double c = cosine_lr(1.0, step, warmup, total);
      ++step;
      Tape tape;
      const BoundParams hp(tape, head.params);
      Var feats;
      std::unique_ptr<BoundParams> ep;
      if (finetune) {
        ep = std::make_unique<BoundParams>(tape, work);
        std::vector<Tensor> mats;
        for (std::size_t b : batch)
          mats.push_back(slice_rows(patches[ws.windows[b].sample], ws.windows[b].start / p, ws.windows[b].n_patches));
        const SeqBatch sb{ws.windows[batch[0]].n_patches, batch.size()};
        Var x = run_blocks(cfg, *ep, embed(cfg, *ep, tape.constant(stack_time_major(mats))), sb);
        feats = patch_kind ? x : pool(cfg, *ep, x, sb, plan.pool);
      } else {
        std::vector<Tensor> f;
        for (std::size_t b : batch) f.push_back(cached[b]);
        feats = tape.constant(stack_time_major(f));
      }
      Var loss = head_loss(head, hp, feats, ws.windows, batch, train, p, cfg.model_rate_hz, tgt, plan.cox_strict);
      if (!loss.valid()) continue;
      const double lv = loss.value().item();
      if (!std::isfinite(lv)) {
        spdlog::error("adapt: non-finite loss at epoch {} step {}", epoch, step);
        throw NumericError("adapt: non-finite loss");
      }
      loss_sum += lv;
      ++loss_n;
      tape.backward(loss);
      std::vector<Tensor> hg;
      for (std::size_t i = 0; i < hp.size(); ++i) hg.push_back(tape.grad(hp.var(i)));
      opt_head.step(head.params, hg, plan.lr_head * c, head_scales, plan.weight_decay);
      if (finetune) {
        std::vector<Tensor> eg;
        for (std::size_t i = 0; i < ep->size(); ++i) eg.push_back(tape.grad(ep->var(i)));
        opt_enc.step(work, eg, plan.lr_encoder * c, enc_scales, plan.weight_decay);
      }
    }
    res.train_loss.push_back(loss_n ? loss_sum / static_cast<double>(loss_n) : 0.0);

    const ParamSet& enc_now = finetune ? work : encoder;
    double v = static_cast<double>(epoch);  // without validation data the last epoch wins
    if (!val.empty()) {
      try {
        v = compute_metric(metric, head.kind, predict_impl(cfg, enc_now, head, val, plan, tgt), val);
      } catch (const MetricError& e) {
        spdlog::warn("adapt: validation metric undefined ({}); keeping the latest epoch", e.what());
        v = static_cast<double>(epoch);
      }
    }
    res.val_history.push_back(v);
    spdlog::debug("adapt epoch {} loss {:.5f} val {:.5f}", epoch, res.train_loss.back(), v);
    if (v > res.best_val || epoch == 0) {
      res.best_val = v;
      res.best_epoch = epoch;
      res.head = head;
      if (finetune) res.encoder = work;
    }
  }
  return res;
}

}  // namespace xecg
