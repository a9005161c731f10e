// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
//   xecg_acceptance [--only 1,4,5] [--work DIR]
#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "metrics_oracles.hpp"
#include "oracles.hpp"
#include "xecg/bench.hpp"
#include "xecg/ssl.hpp"

using namespace xecg;
namespace fs = std::filesystem;
namespace oracle = xecg::testing;
using oracle::gradcheck;
using oracle::random_tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

fs::path g_work;

// ---- 1: gradient fidelity --------------------------------------------------------------

Var projected(Var v) {
  Tensor w(v.shape());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::sin(1.0 + 0.7 * static_cast<double>(i));
  return ops::sum_all(ops::mul(v, v.tape()->constant(w)));
}

Outcome criterion1() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 g(11);
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  auto check = [&](const std::string& name, const oracle::ScalarFn& f, std::vector<Tensor> in) {
    const double e = gradcheck(f, std::move(in));
    ++checks;
    if (!(e <= worst)) {
      worst = e;
      worst_name = name;
    }
  };
  using V = std::vector<Var>;
  check("add", [](Tape&, V& v) { return projected(ops::add(v[0], v[1])); }, {random_tensor({3, 4}, g), random_tensor({4}, g)});
  check("sub", [](Tape&, V& v) { return projected(ops::sub(v[0], v[1])); }, {random_tensor({3, 4}, g), random_tensor({3, 4}, g)});
  check("mul", [](Tape&, V& v) { return projected(ops::mul(v[0], v[1])); }, {random_tensor({2, 3, 4}, g), random_tensor({3, 4}, g)});
  check("div", [](Tape&, V& v) { return projected(ops::div(v[0], v[1])); },
        {random_tensor({3, 4}, g), random_tensor({3, 4}, g, 0.5, 2.0)});
  check("scale", [](Tape&, V& v) { return projected(ops::scale(v[0], -1.7)); }, {random_tensor({4}, g)});
  check("matmul", [](Tape&, V& v) { return projected(ops::matmul(v[0], v[1])); }, {random_tensor({2, 3, 4}, g), random_tensor({4, 5}, g)});
  check("bmm", [](Tape&, V& v) { return projected(ops::bmm(v[0], v[1])); }, {random_tensor({2, 3, 4}, g), random_tensor({2, 4, 2}, g)});
  check("scale_rows", [](Tape&, V& v) { return projected(ops::scale_rows(v[0], v[1])); },
        {random_tensor({3, 2, 2}, g), random_tensor({3}, g)});
  check("transpose", [](Tape&, V& v) { return projected(ops::transpose(v[0])); }, {random_tensor({3, 4}, g)});
  check("permute", [](Tape&, V& v) { return projected(ops::permute(v[0], {2, 0, 1})); }, {random_tensor({2, 3, 4}, g)});
  check("expand", [](Tape&, V& v) { return projected(ops::expand(v[0], {3, 4, 2})); }, {random_tensor({3, 1, 2}, g)});
  check("exp", [](Tape&, V& v) { return projected(ops::exp(v[0])); }, {random_tensor({5}, g)});
  check("log", [](Tape&, V& v) { return projected(ops::log(v[0])); }, {random_tensor({5}, g, 0.5, 3.0)});
  check("tanh", [](Tape&, V& v) { return projected(ops::tanh(v[0])); }, {random_tensor({5}, g)});
  check("sigmoid", [](Tape&, V& v) { return projected(ops::sigmoid(v[0])); }, {random_tensor({5}, g, -4, 4)});
  check("abs", [](Tape&, V& v) { return projected(ops::abs(v[0])); }, {random_tensor({5}, g, 0.1, 1.0)});
  check("maximum", [](Tape&, V& v) { return projected(ops::maximum(v[0], v[1])); }, {random_tensor({6}, g), random_tensor({6}, g)});
  check("softmax", [](Tape&, V& v) { return projected(ops::softmax(v[0], 1)); }, {random_tensor({3, 4, 2}, g)});
  check("max", [](Tape&, V& v) { return projected(ops::max(v[0], 0)); }, {random_tensor({4, 3}, g)});
  check("sum", [](Tape&, V& v) { return projected(ops::sum(v[0], 1)); }, {random_tensor({2, 3, 4}, g)});
  check("mean", [](Tape&, V& v) { return projected(ops::mean(v[0], 2)); }, {random_tensor({2, 3, 4}, g)});
  check("l2_normalize", [](Tape&, V& v) { return projected(ops::l2_normalize(v[0], 1)); }, {random_tensor({3, 4}, g)});
  check("concat", [](Tape&, V& v) {
    std::vector<Var> parts{v[0], v[1]};
    return projected(ops::concat(parts, 1));
  }, {random_tensor({2, 3}, g), random_tensor({2, 2}, g)});
  check("slice", [](Tape&, V& v) { return projected(ops::slice(v[0], 1, 1, 2)); }, {random_tensor({3, 4}, g)});
  check("reverse", [](Tape&, V& v) { return projected(ops::reverse(v[0], 0)); }, {random_tensor({4, 2}, g)});
  check("layer_norm", [](Tape&, V& v) { return projected(ops::layer_norm(v[0], v[1], v[2])); },
        {random_tensor({3, 5}, g), random_tensor({5}, g), random_tensor({5}, g)});
  check("logdet_psd", [](Tape&, V& v) { return ops::logdet_psd(ops::scale(ops::add(v[0], ops::transpose(v[0])), 0.5)); },
        {oracle::random_spd(5, g)});
  check("bce", [](Tape&, V& v) { return ops::bce_with_logits(v[0], Tensor({4}, {0.0, 1.0, 1.0, 0.3})); },
        {random_tensor({4}, g, -3, 3)});
  check("softmax_xent", [](Tape&, V& v) {
    const int labels[] = {0, 2, 1};
    return ops::softmax_cross_entropy(v[0], labels);
  }, {random_tensor({3, 3}, g)});

  // cells, blocks and the full stack: every parameter plus the input
  EncoderConfig cfg;
  cfg.embed_dim = 8;
  cfg.n_heads = 2;
  cfg.in_channels = 1;
  cfg.patch_size = 4;
  auto with_params = [&](const std::string& name, const ParamSet& p, const Tensor& input,
                         const std::function<Var(const BoundParams&, Var)>& f) {
    std::vector<Tensor> all;
    for (std::size_t i = 0; i < p.size(); ++i) all.push_back(p.value(i));
    all.push_back(input);
    check(name, [&](Tape&, V& v) {
      BoundParams bp(p, std::vector<Var>(v.begin(), v.end() - 1));
      return f(bp, v.back());
    }, all);
  };
  for (const char* kind : {"s", "m"}) {
    EncoderConfig c = cfg;
    c.block_pattern = kind;
    Rng rng(4);
    const ParamSet p = init_encoder(c, rng);
    const Tensor x = random_tensor({8, 8}, g, -2, 2);
    for (bool rev : {false, true}) {
      with_params(std::string(kind) + (rev ? " cell reverse" : " cell"), p, x, [&](const BoundParams& bp, Var xv) {
        return projected(cell_scan(c, bp, 0, xv, {4, 2}, rev));
      });
      with_params(std::string(kind) + (rev ? " block reverse" : " block"), p, x, [&](const BoundParams& bp, Var xv) {
        return projected(block_forward(c, bp, 0, xv, {4, 2}, rev));
      });
    }
  }
  {
    Rng rng(5);
    const ParamSet p = init_encoder(cfg, rng);  // default nine-block pattern
    const Tensor patches = random_tensor({8, 4}, g);
    for (PoolMode mode : {PoolMode::kAttn, PoolMode::kAvg, PoolMode::kMax})
      with_params(std::string("encoder ") + to_string(mode), p, patches, [&](const BoundParams& bp, Var x) {
        const SeqBatch sb{4, 2};
        return projected(pool(cfg, bp, run_blocks(cfg, bp, embed(cfg, bp, x), sb), sb, mode));
      });
  }
  // the three pretraining losses
  const Tensor t = random_tensor({6, 5}, g);
  const std::vector<std::size_t> masked = {0, 2, 3};
  check("loss_patch", [&](Tape& tp, V& v) { return loss_patch(v[0], tp.constant(t), masked); }, {random_tensor({6, 5}, g)});
  const Tensor tg = random_tensor({2, 5}, g);
  check("loss_view", [&](Tape& tp, V& v) { return loss_view(tp.constant(tg), v[0]); }, {random_tensor({6, 5}, g)});
  check("loss_cr", [](Tape&, V& v) { return loss_cr(ops::l2_normalize(v[0], 1), 0.5); }, {random_tensor({6, 4}, g)});

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst < 1e-4 && secs < 120.0,
          fmt("%zu checks, worst rel. error %.2e (%s), %.1f s", checks, worst, worst_name.c_str(), secs)};
}

// ---- 2: loss identities ----------------------------------------------------------------

Tensor random_rotation(std::size_t e, std::mt19937_64& g) {
  Tensor q = random_tensor({e, e}, g);
  for (std::size_t i = 0; i < e; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < e; ++c) d += q.at(i, c) * q.at(j, c);
      for (std::size_t c = 0; c < e; ++c) q.at(i, c) -= d * q.at(j, c);
    }
    double n = 0.0;
    for (std::size_t c = 0; c < e; ++c) n += q.at(i, c) * q.at(i, c);
    for (std::size_t c = 0; c < e; ++c) q.at(i, c) /= std::sqrt(n);
  }
  return q;
}

Outcome criterion2() {
  std::mt19937_64 g(21);
  const double eps = 0.5;
  bool ok = true;
  std::ostringstream d;

  const Tensor s = random_tensor({6, 5}, g);
  const std::vector<std::size_t> m = {1, 4};
  const double lp = loss_patch(s, s, m);
  ok &= lp == 0.0;

  double rot_err = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor t = random_tensor({2, 8}, g), st = random_tensor({6, 8}, g);
    const Tensor q = random_rotation(8, g);
    rot_err = std::max(rot_err, std::abs(loss_view(matmul(t, q), matmul(st, q)) - loss_view(t, st)));
  }
  ok &= rot_err <= 1e-9;

  Tensor collapsed({7, 4});
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 4; ++c) collapsed.at(r, c) = 0.5;
  const double cr_collapsed = loss_cr(collapsed, eps);
  ok &= cr_collapsed == 0.0;
  const double cr_ortho = loss_cr(Tensor::identity(4), eps);
  ok &= cr_ortho < 0.0;

  // R = 1/2 sum log(1 + E/eps * lambda_i) over eigenvalues of the 1/B covariance
  double eig_err = 0.0;
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t b = 5 + rep % 6, e = 3 + rep % 5;
    Tensor z = random_tensor({b, e}, g);
    Tensor mean({e});
    for (std::size_t r = 0; r < b; ++r)
      for (std::size_t c = 0; c < e; ++c) mean[c] += z.at(r, c) / static_cast<double>(b);
    Tensor cov({e, e});
    for (std::size_t a = 0; a < e; ++a)
      for (std::size_t c = 0; c < e; ++c)
        for (std::size_t r = 0; r < b; ++r)
          cov.at(a, c) += (z.at(r, a) - mean[a]) * (z.at(r, c) - mean[c]) / static_cast<double>(b);
    double ref = 0.0;
    for (double lam : oracle::jacobi_eigenvalues(cov))
      ref += 0.5 * std::log(1.0 + static_cast<double>(e) / eps * lam);
    eig_err = std::max(eig_err, std::abs(coding_rate(z, eps) - ref));
  }
  ok &= eig_err <= 1e-8;
  d << fmt("L_patch(matched) %g, rotation drift %.1e, L_cr collapsed %g, orthonormal %.4f, eigen oracle %.1e", lp,
           rot_err, cr_collapsed, cr_ortho, eig_err);
  return {ok, d.str()};
}

// ---- 3: schedules ----------------------------------------------------------------------

std::vector<std::vector<EcgRecord>> pretrain_corpus(std::size_t patients, double seconds) {
  std::vector<std::vector<EcgRecord>> out;
  Rng g(1);
  for (std::size_t p = 0; p < patients; ++p) {
    SynthSpec s;
    s.duration_s = seconds;
    s.rhythm = static_cast<Rhythm>(p % 3);
    s.rr_interval_s = g.uniform(0.6, 1.2);
    s.age_years = g.uniform(30, 80);
    out.push_back({synth_ecg(s, 1000 + p, "P" + std::to_string(p), "R" + std::to_string(p)).record});
  }
  return out;
}

Outcome criterion3() {
  bool ok = true;
  const double m0 = momentum_schedule(0, 200, 0.99), m1 = momentum_schedule(200, 200, 0.99);
  ok &= std::abs(m0 - 0.99) <= 1e-15 && m1 == 1.0;

  std::mt19937_64 g(31);
  ParamSet teacher, student;
  teacher.add("w", random_tensor({3, 4}, g));
  student.add("w", random_tensor({3, 4}, g));
  ParamSet keep = teacher, copy = teacher;
  ema_update(keep, student, 1.0);
  ema_update(copy, student, 0.0);
  const bool ema_ok = params_hash(keep) == params_hash(teacher) && params_hash(copy) == params_hash(student);
  ok &= ema_ok;

  // forced large gradients through a real pretraining step
  EncoderConfig cfg;
  cfg.embed_dim = 8;
  cfg.n_heads = 2;
  cfg.block_pattern = "sm";
  SslSchedules s;
  s.total_steps = 10;
  s.lr = 1e-3;
  s.loss_scale = 1e6;
  Rng rng(2);
  TeacherStudentState st = init_ssl_state(cfg, s, rng);
  const auto corpus = pretrain_corpus(4, 4.0);
  Rng vr(3);
  const ViewBatch vb = render_batch(corpus, cfg.patch_size, AugmentConfig{}, vr);
  const StepReport r = pretrain_step(st, s, vb, rng);
  const double clip_err = std::abs(r.clip.post_norm - 3.0);
  ok &= r.clip.pre_norm > 3.0 && clip_err <= 1e-9;
  return {ok, fmt("lambda(0) %.17g, lambda(N) %.17g, ema identities %s, clipped %.3g -> 3 (err %.1e)", m0, m1,
                  ema_ok ? "exact" : "broken", r.clip.pre_norm, clip_err)};
}

// ---- 4: smoke pretraining (shared with 5 and 6) ----------------------------------------

struct Pretrained {
  PretrainResult result;
  fs::path dir;
  double seconds = 0.0;
};

// Desk-scale preset: lr 1e-2 with 10% warmup and lambda_base 0.9 (see README).
PretrainConfig smoke_config() {
  PretrainConfig c;
  c.encoder.embed_dim = 32;
  c.schedules.lr = 1e-2;
  c.schedules.warmup_steps = 20;
  c.schedules.total_steps = 200;
  c.schedules.lambda_base = 0.9;
  c.schedules.p_mask = 0.3;
  c.schedules.eps = 0.5;
  c.batch_size = 32;
  c.seed = 3;
  return c;
}

const Pretrained& pretrained() {
  static std::optional<Pretrained> cache;
  if (!cache) {
    Pretrained p;
    p.dir = g_work / "pretrain";
    fs::create_directories(p.dir);
    const auto corpus = pretrain_corpus(50, 10.0);
    const auto t0 = std::chrono::steady_clock::now();
    p.result = pretrain(smoke_config(), corpus, p.dir);
    p.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    cache = std::move(p);
  }
  return *cache;
}

Outcome criterion4() {
  const Pretrained& p = pretrained();
  const auto& steps = p.result.steps;
  if (steps.size() != 200) return {false, fmt("ran %zu steps", steps.size())};
  // exponential moving average of the total loss, smoothing 0.9, seeded with step 1
  double ema = steps[0].loss.total, early = 0.0;
  for (std::size_t i = 1; i < steps.size(); ++i) {
    ema = 0.9 * ema + 0.1 * steps[i].loss.total;
    if (i == 9) early = ema;
  }
  std::size_t dead = 0;
  const std::size_t n_params = steps[0].grad_norms.size();
  for (std::size_t k = 0; k < n_params; ++k) {
    bool moved = false;
    for (const auto& s : steps) moved = moved || s.grad_norms[k] > 0.0;
    dead += !moved;
  }
  const bool ok = ema < 0.8 * early && dead == 0 && n_params > 0;
  return {ok, fmt("EMA steps 1-10 %.4f, step 200 %.4f (ratio %.3f), %zu/%zu tensors with zero gradient, %.0f s on 1 core",
                  early, ema, ema / early, dead, n_params, p.seconds)};
}

// ---- 5: transfer signal ----------------------------------------------------------------

const fs::path& suite_dir() {
  static fs::path dir;
  if (dir.empty()) {
    dir = g_work / "suite";
    fs::remove_all(dir);
    SynthSizes sz;
    sz.train = 180;
    sz.val = 30;
    sz.test = 90;
    synth_suite(0, sz, dir);
  }
  return dir;
}

TaskSpec load_task(const std::string& id) {
  const fs::path f = suite_dir() / id / "task.json";
  std::ifstream in(f);
  return task_spec_from_json(nlohmann::json::parse(in), f.parent_path());
}

Outcome criterion5() {
  const Pretrained& p = pretrained();
  RunManifest m;
  m.tasks = {load_task("rhythm")};
  m.modes = {ModeChoice::kLinearProbe};
  m.model = "pretrained";
  m.checkpoint = p.dir / "student.xckp";
  m.out_dir = g_work / "c5_pretrained";
  fs::remove_all(m.out_dir);
  const SuiteReport a = run_suite(m);
  m.model = "random";
  m.checkpoint.clear();
  m.encoder = p.result.state.cfg;
  m.out_dir = g_work / "c5_random";
  fs::remove_all(m.out_dir);
  const SuiteReport b = run_suite(m);
  if (a.failures || b.failures) return {false, "probe runs failed"};
  const TaskScore& ta = a.scores.at("pretrained/linear_probe").at("rhythm");
  const TaskScore& tb = b.scores.at("random/linear_probe").at("rhythm");
  const WelchResult w = welch_t(ta.values, tb.values);
  const bool ok = ta.mean() >= 0.90 && ta.mean() - tb.mean() >= 0.05 && w.p < 0.05;
  return {ok, fmt("test AUROC pretrained %.4f +- %.4f vs random %.4f +- %.4f over %zu seeds, Welch p %.2e", ta.mean(),
                  ta.sd(), tb.mean(), tb.sd(), ta.values.size(), w.p)};
}

// ---- 6: detection ----------------------------------------------------------------------

Outcome criterion6() {
  // matching against an optimal assignment on well-separated instances
  std::mt19937_64 g(61);
  std::size_t mismatches = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const double fs = 250.0, tol = 20.0;
    std::vector<std::size_t> truth, pred;
    std::size_t pos = 10;
    for (int k = 0; k < 40; ++k) {
      pos += 20 + g() % 200;
      truth.push_back(pos);
      if (g() % 5 != 0) pred.push_back(pos + g() % 7 - 3);
      if (g() % 6 == 0) pred.push_back(pos + 5 + g() % 10);
    }
    std::sort(pred.begin(), pred.end());
    const PeakMatch pm = rpeak_f1(pred, truth, fs, tol);
    const std::size_t best = oracle::hungarian_matches(pred, truth, fs, tol);
    const double f1 = 2.0 * static_cast<double>(best) / static_cast<double>(pred.size() + truth.size());
    mismatches += pm.tp != best || std::abs(pm.f1 - f1) > 1e-12;
  }

  RunManifest m;
  m.tasks = {load_task("rpeak")};
  m.modes = {ModeChoice::kFinetune};
  m.checkpoint = pretrained().dir / "student.xckp";
  m.out_dir = g_work / "c6";
  fs::remove_all(m.out_dir);
  const SuiteReport r = run_suite(m);
  if (r.failures) return {false, "finetune runs failed"};
  const TaskScore& ts = r.scores.at("xecg/finetune").at("rpeak");
  const double lo = *std::min_element(ts.values.begin(), ts.values.end());
  const bool ok = mismatches == 0 && ts.mean() >= 0.95;
  return {ok, fmt("F1@+-10 ms on clean test records %.4f +- %.4f (min %.4f, %zu seeds); Hungarian oracle mismatches %zu/100",
                  ts.mean(), ts.sd(), lo, ts.values.size(), mismatches)};
}

// ---- 7: metric oracles -----------------------------------------------------------------

Outcome criterion7() {
  std::mt19937_64 g(71);
  double e_auc = 0, e_conf = 0, e_smape = 0, e_c = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 2 + g() % 19;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(g() % 7) / 7.0;
      y[i] = static_cast<int>(g() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    e_auc = std::max(e_auc, std::abs(auroc(s, y) - oracle::auroc_pairs(s, y)));
  }
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 1 + g() % 25, k = 2 + g() % 3;
    std::vector<int> p(n), l(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(g() % k);
      l[i] = static_cast<int>(g() % k);
    }
    const ConfusionMetrics a = confusion_suite(p, l, k), b = oracle::confusion_counts(p, l, k);
    for (double d : {a.accuracy - b.accuracy, a.f1 - b.f1, a.sensitivity - b.sensitivity, a.ppv - b.ppv,
                     a.specificity - b.specificity})
      e_conf = std::max(e_conf, std::abs(d));
  }
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 1 + g() % 10;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = u(g);
      b[i] = u(g);
    }
    e_smape = std::max(e_smape, std::abs(smape(a, b) - oracle::smape_loop(a, b)));
  }
  std::size_t c_done = 0;
  for (int rep = 0; c_done < 1000; ++rep) {
    const std::size_t n = 2 + g() % 15;
    std::vector<double> r(n), t(n);
    std::vector<int> e(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = static_cast<double>(g() % 5);
      t[i] = 1.0 + static_cast<double>(g() % 6);
      e[i] = static_cast<int>(g() % 3 != 0);
    }
    const double ref = oracle::cindex_pairs(r, t, e);
    if (std::isnan(ref)) continue;
    e_c = std::max(e_c, std::abs(concordance_index(r, t, e) - ref));
    ++c_done;
  }

  // simulated hazard ratio 2
  std::exponential_distribution<double> ex(1.0);
  const std::size_t n = 2000;
  Tensor x({n, 1});
  std::vector<double> t(n);
  std::vector<int> ev(n);
  for (std::size_t i = 0; i < n; ++i) {
    x.at(i, 0) = static_cast<double>(g() % 2);
    const double ti = ex(g) / (0.2 * (x.at(i, 0) > 0 ? 2.0 : 1.0)), ci = ex(g) / 0.05;
    t[i] = std::min(ti, ci);
    ev[i] = ti <= ci;
  }
  const double hr = cox_fit(x, t, ev).hazard_ratio[0];

  // product-limit by hand: (1 - 1/5)(1 - 1/4)(1 - 1/2); ties at one time; all censored
  const auto km = kaplan_meier(std::vector<double>{2, 1, 4, 2, 3}, std::vector<int>{1, 1, 0, 0, 1});
  const auto km_tie = kaplan_meier(std::vector<double>{1, 1, 2, 3}, std::vector<int>{1, 1, 1, 0});
  const bool km_ok = km.size() == 3 && std::abs(km[0].survival - 0.8) <= 1e-12 &&
                     std::abs(km[1].survival - 0.6) <= 1e-12 && std::abs(km[2].survival - 0.3) <= 1e-12 &&
                     km_tie.size() == 2 && std::abs(km_tie[0].survival - 0.5) <= 1e-12 &&
                     std::abs(km_tie[1].survival - 0.25) <= 1e-12 &&
                     kaplan_meier(std::vector<double>{1, 2}, std::vector<int>{0, 0}).empty();

  const double worst = std::max({e_auc, e_conf, e_smape, e_c});
  const bool ok = worst <= 1e-12 && hr >= 1.8 && hr <= 2.2 && km_ok;
  return {ok, fmt("max oracle gap auroc %.1e, confusion %.1e, smape %.1e, c-index %.1e; cox HR %.3f; KM hand cases %s", e_auc,
                  e_conf, e_smape, e_c, hr, km_ok ? "exact" : "wrong")};
}

// ---- 8: cox loss -----------------------------------------------------------------------

Outcome criterion8() {
  const double single = cox_loss(Tensor({1}, {0.7}), std::vector<double>{3.0}, std::vector<int>{1});
  const double two = cox_loss(Tensor({2}, {0.0, 0.0}), std::vector<double>{1.0, 2.0}, std::vector<int>{1, 0});
  std::mt19937_64 g(81);
  double drift = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t n = 3 + g() % 20;
    Tensor phi = random_tensor({n}, g, -2, 2), shifted = phi;
    const double c = std::uniform_real_distribution<double>(-100, 100)(g);
    for (auto& v : shifted.values()) v += c;
    std::vector<double> t(n);
    std::vector<int> e(n);
    for (std::size_t i = 0; i < n; ++i) {
      t[i] = 1.0 + static_cast<double>(g() % 8);
      e[i] = g() % 3 != 0;
    }
    e[0] = 1;
    drift = std::max(drift, std::abs(cox_loss(phi, t, e) - cox_loss(shifted, t, e)));
  }
  const bool ok = single == 0.0 && std::abs(two - std::log(2.0)) <= 1e-12 && drift <= 1e-9;
  return {ok, fmt("singleton %g, two-subject %.17g (ln 2 %+.1e), translation drift %.1e", single, two, two - std::log(2.0), drift)};
}

// ---- 9: scaling ------------------------------------------------------------------------

Outcome criterion9() {
  EncoderConfig cfg;
  cfg.embed_dim = 64;
  const auto rows = scaling_bench({256, 512, 1024, 2048, 4096, 8192}, cfg, 5, 0);
  write_scaling_csv(rows, g_work / "scaling.csv");
  std::vector<double> xn, xt, an, at;
  std::vector<std::size_t> mem;
  for (const auto& r : rows) {
    if (!r.ok) continue;
    if (r.model == "xlstm") {
      xn.push_back(static_cast<double>(r.n));
      xt.push_back(r.encode_ms);
      mem.push_back(r.peak_bytes);
    } else {
      an.push_back(static_cast<double>(r.n));
      at.push_back(r.encode_ms);
    }
  }
  if (xn.size() < 2 || an.size() < 2) return {false, "too few successful lengths"};
  const double sx = loglog_slope(xn, xt), sa = loglog_slope(an, at);
  double growth = 0.0;
  for (std::size_t i = 1; i < mem.size(); ++i)
    growth = std::max(growth, static_cast<double>(mem[i]) / static_cast<double>(mem[i - 1]));
  const bool ok = sx >= 0.8 && sx <= 1.3 && sa >= 1.7 && sa <= 2.3 && growth <= 1.5;
  return {ok, fmt("time slope recurrent %.3f, attention %.3f; recurrent peak memory x%.3f per doubling (bound 1.5)", sx, sa,
                  growth)};
}

// ---- 10: pipeline exactness ------------------------------------------------------------

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) {
      std::ifstream in(e.path(), std::ios::binary);
      std::ostringstream s;
      s << in.rdbuf();
      out[fs::relative(e.path(), root).string()] = s.str();
    }
  return out;
}

Outcome criterion10() {
  std::ostringstream d;
  bool ok = true;

  // Twelve records against the three exclusion rules: NaN anywhere; all samples zero;
  // some lead with variance > 10 mV^2 and |x| > 15 mV.
  struct Case {
    const char* what;
    EcgRecord rec;
    bool keep;
  };
  auto base = [](std::size_t leads) {
    Tensor s({leads, 200});
    for (std::size_t c = 0; c < leads; ++c)
      for (std::size_t i = 0; i < 200; ++i) s.at(c, i) = 0.5 * std::sin(0.1 * static_cast<double>(i + 7 * c));
    std::vector<std::size_t> slots(leads);
    for (std::size_t c = 0; c < leads; ++c) slots[c] = leads == 1 ? kLeadII : c;
    return make_record(std::move(s), 100.0, "p", "r", slots);
  };
  // +-a square wave has variance a^2; one spike sets the peak
  auto square = [](EcgRecord r, std::size_t lead, double a, double spike) {
    for (std::size_t i = 0; i < r.length(); ++i) r.samples.at(lead, i) = (i % 2 ? a : -a);
    if (spike != 0.0) r.samples.at(lead, 100) = spike;
    return r;
  };
  std::vector<Case> cases;
  cases.push_back({"clean 12-lead", base(12), true});
  {
    auto r = base(12);
    r.samples.at(5, 17) = std::nan("");
    cases.push_back({"one NaN", r, false});
  }
  {
    auto r = base(1);
    r.samples.at(0, 199) = std::nan("");
    cases.push_back({"NaN in last sample, single lead", r, false});
  }
  {
    auto r = base(12);
    for (auto& v : r.samples.values()) v = 0.0;
    cases.push_back({"all zero", r, false});
  }
  {
    auto r = base(12);
    for (std::size_t i = 0; i < 200; ++i) r.samples.at(3, i) = 0.0;
    cases.push_back({"one flat lead", r, true});
  }
  cases.push_back({"variance 16, peak 4", square(base(12), 2, 4.0, 0.0), true});
  {
    auto r = base(12);
    r.samples.at(2, 50) = 40.0;  // variance about 8
    cases.push_back({"peak 40, low variance", r, true});
  }
  cases.push_back({"variance 16 and peak 16 in one lead", square(base(12), 2, 4.0, 16.0), false});
  cases.push_back({"negative spike -16 counts by magnitude", square(base(12), 7, 4.0, -16.0), false});
  cases.push_back({"variance and peak in different leads", square(square(base(12), 1, 4.0, 0.0), 9, 0.1, 16.0), true});
  cases.push_back({"peak exactly 15", square(base(12), 4, 4.0, 15.0), true});
  cases.push_back({"noisy single lead", square(base(1), 0, 5.0, 20.0), false});
  std::size_t wrong = 0;
  std::string first_wrong;
  for (const auto& c : cases)
    if (quality_filter(c.rec).keep != c.keep) {
      if (!wrong) first_wrong = c.what;
      ++wrong;
    }
  ok &= wrong == 0 && cases.size() == 12;
  d << fmt("quality filter %zu/%zu", cases.size() - wrong, cases.size());
  if (wrong) d << " (first wrong: " << first_wrong << ")";

  // patch arithmetic
  std::size_t bad_patch = 0;
  for (std::size_t len = 1; len <= 3000; ++len) {
    const PatchPlan pp = plan_patches(len, 25);
    bad_patch += pp.n_patches != len / 25 || pp.truncated != len % 25;
  }
  Tensor three_min({1, 18000});
  for (std::size_t i = 0; i < 18000; ++i) three_min.at(0, i) = static_cast<double>(i % 97);
  const EcgRecord three = make_record(three_min, 100.0, "p", "r", {kLeadII});
  const auto patches = patchify(three, 25);
  bad_patch += patches.size() != 720 || patches_per_minute(25, 100.0) != 240;
  for (std::size_t k = 0; k < patches.size(); k += 37)
    for (std::size_t j = 0; j < 25; ++j) bad_patch += patches[k].at(0, j) != three_min.at(0, k * 25 + j);
  ok &= bad_patch == 0;
  d << fmt("; patch arithmetic %s", bad_patch ? "wrong" : "exact");

  // codec: decode(encode(x)) stored as float32, and re-encoding gives identical bytes
  std::mt19937_64 g(101);
  std::normal_distribution<double> nd;
  std::size_t bad_codec = 0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t leads = 1 + g() % 12, len = 1 + g() % 300;
    Tensor s({leads, len});
    for (auto& v : s.values()) v = static_cast<float>(nd(g));
    std::vector<std::size_t> slots(leads);
    for (std::size_t c = 0; c < leads; ++c) slots[c] = leads == 1 ? kLeadII : c;
    const EcgRecord r = make_record(s, 100.0 + static_cast<double>(rep), "pt" + std::to_string(rep), "rec", slots);
    const auto bytes = encode_record(r);
    const EcgRecord back = decode_record(bytes);
    bool same = encode_record(back) == bytes && back.samples.shape() == s.shape() && back.fs == r.fs &&
                back.patient_id == r.patient_id && back.lead_present == r.lead_present;
    for (std::size_t i = 0; same && i < s.size(); ++i)
      same = std::bit_cast<std::uint64_t>(back.samples[i]) == std::bit_cast<std::uint64_t>(s[i]);
    bad_codec += !same;
  }
  ok &= bad_codec == 0;
  d << fmt("; codec %zu/200 bitwise", 200 - bad_codec);

  // full five-task suite twice with fixed seeds
  SynthSizes sz;
  sz.train = 12;
  sz.val = 6;
  sz.test = 12;
  sz.rpeak_train = 2;
  sz.rpeak_val = 1;
  sz.rpeak_test = 2;
  sz.rpeak_records = 2;
  sz.record_s = 5.0;
  sz.rpeak_s = 5.0;
  sz.apnea_minutes = 1;
  const fs::path s1 = g_work / "c10_suite1", s2 = g_work / "c10_suite2";
  fs::remove_all(s1);
  fs::remove_all(s2);
  synth_suite(9, sz, s1);
  synth_suite(9, sz, s2);
  const bool corpus_same = tree_bytes(s1) == tree_bytes(s2);
  auto run = [&](const fs::path& suite, const std::string& out) {
    std::ifstream in(suite / "suite.json");
    nlohmann::json j = nlohmann::json::parse(in);
    j["seeds"] = {0, 1};
    j["encoder"] = {{"embed_dim", 8}, {"n_heads", 2}, {"block_pattern", "sm"}};
    j["out"] = out;
    RunManifest m = run_manifest_from_json(j, suite);
    for (auto& t : m.tasks) t.plan.epochs = std::min<std::size_t>(t.plan.epochs, 3);
    fs::remove_all(m.out_dir);
    return run_suite(m);
  };
  const SuiteReport r1 = run(s1, "run"), r2 = run(s2, "run");
  bool rerun_same = r1.rows.size() == r2.rows.size() && r1.rows.size() == 10 && r1.failures == 0;
  for (std::size_t i = 0; rerun_same && i < r1.rows.size(); ++i)
    rerun_same = std::bit_cast<std::uint64_t>(r1.rows[i].value) == std::bit_cast<std::uint64_t>(r2.rows[i].value) &&
                 r1.rows[i].task == r2.rows[i].task && r1.rows[i].seed == r2.rows[i].seed;
  for (const auto& [model, score] : r1.bench_scores)
    rerun_same = rerun_same && std::bit_cast<std::uint64_t>(score) == std::bit_cast<std::uint64_t>(r2.bench_scores.at(model));
  ok &= corpus_same && rerun_same;
  d << fmt("; suite corpus %s, rerun of %zu rows %s", corpus_same ? "byte-identical" : "differs", r1.rows.size(),
           rerun_same ? "bitwise identical" : "differs");
  return {ok, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xecg acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "xecg_acceptance").string();
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::err);
  g_work = work;
  fs::create_directories(g_work);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", criterion1},  {"loss identities", criterion2}, {"schedule exactness", criterion3},
      {"ssl smoke training", criterion4}, {"transfer signal", criterion5}, {"detection end-to-end", criterion6},
      {"metric oracles", criterion7},     {"cox loss analytics", criterion8}, {"scaling", criterion9},
      {"pipeline exactness", criterion10}};
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d %s  %s: %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str(),
                secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  return failed ? 1 : 0;
}
