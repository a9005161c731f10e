#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "xecg/heads.hpp"
#include "xecg/optim.hpp"

using namespace xecg;
using xecg::testing::gradcheck;
using xecg::testing::random_tensor;

namespace {

// O(n^2) partial likelihood straight from the risk-set definition.
double cox_brute(const std::vector<double>& phi, const std::vector<double>& t, const std::vector<int>& e, bool strict) {
  double l = 0.0;
  for (std::size_t i = 0; i < phi.size(); ++i) {
    if (!e[i]) continue;
    double s = 0.0;
    bool any = false;
    for (std::size_t j = 0; j < phi.size(); ++j)
      if (strict ? t[j] > t[i] : t[j] >= t[i]) {
        s += std::exp(phi[j]);
        any = true;
      }
    if (!any) continue;
    l += -(phi[i] - std::log(s));
  }
  return l;
}

EncoderConfig tiny_cfg() {
  EncoderConfig c;
  c.embed_dim = 16;
  c.block_pattern = "sm";
  c.n_heads = 2;
  c.in_channels = 1;
  return c;
}

std::vector<TaskSample> rpeak_samples(std::size_t n, double seconds, std::uint64_t seed) {
  std::vector<TaskSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    SynthSpec s;
    s.duration_s = seconds;
    s.rr_interval_s = 0.7 + 0.05 * static_cast<double>(i);
    s.twelve_lead = false;
    auto o = synth_ecg(s, seed + i, "P" + std::to_string(i));
    TaskSample t;
    t.record = o.record;
    t.peaks = o.truth.r_peaks;
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

TEST_CASE("binary cross-entropy head: zero logit, positive label") {
  Tape tape;
  TaskHead h;
  h.kind = HeadKind::kMultilabel;
  h.out_dim = 1;
  h.params.add("head.W", Tensor({4, 1}, 0.0));
  h.params.add("head.b", Tensor({1}, 0.0));
  const BoundParams hp(tape, h.params);
  Var z = classify(tape.constant(Tensor({1, 4}, 0.3)), hp);
  Var l = ops::bce_with_logits(z, Tensor({1, 1}, 1.0));
  CHECK(l.value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  tape.backward(l);
  // dL/db = sigmoid(0) - 1
  CHECK(tape.grad(hp["head.b"])[0] == doctest::Approx(-0.5).epsilon(1e-14));
}

TEST_CASE("cox loss: singleton, two subjects, ties and brute force") {
  {
    const std::vector<double> t{1.0};
    const std::vector<int> e{1};
    CHECK(cox_loss(Tensor({1}, {0.7}), t, e) == doctest::Approx(0.0).epsilon(1e-15));
  }
  {
    const std::vector<double> t{1.0, 2.0};
    const std::vector<int> e{1, 0};
    CHECK(std::fabs(cox_loss(Tensor({2}, {0.0, 0.0}), t, e) - std::log(2.0)) < 1e-12);
  }
  std::mt19937_64 g(5);
  std::uniform_int_distribution<int> coarse(0, 5);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 2 + rep % 17;
    std::vector<double> phi(n), t(n);
    std::vector<int> e(n);
    Tensor tp = random_tensor({n}, g, -3.0, 3.0);
    for (std::size_t i = 0; i < n; ++i) {
      phi[i] = tp[i];
      t[i] = coarse(g);  // many ties
      e[i] = coarse(g) % 2;
    }
    e[0] = 1;
    for (bool strict : {false, true}) {
      double ref = cox_brute(phi, t, e, strict);
      bool usable = false;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          if (e[i] && (strict ? t[j] > t[i] : t[j] >= t[i])) usable = true;
      if (!usable) {
        CHECK_THROWS_AS(cox_loss(tp, t, e, strict), ContractError);
        continue;
      }
      CHECK(std::fabs(cox_loss(tp, t, e, strict) - ref) <= 1e-10 * std::max(1.0, std::fabs(ref)));
      // adding a constant to every risk score changes nothing
      Tensor shifted = tp;
      for (double& v : shifted.values()) v += 123.0;
      CHECK(std::fabs(cox_loss(shifted, t, e, strict) - ref) <= 1e-9 * std::max(1.0, std::fabs(ref)));
    }
  }
}

TEST_CASE("cox loss gradient and monotonicity") {
  const std::vector<double> t{1.0, 2.0, 2.0, 3.5, 4.0, 6.0};
  const std::vector<int> e{1, 0, 1, 1, 0, 1};
  std::mt19937_64 g(9);
  for (bool strict : {false, true}) {
    const double err = gradcheck([&](Tape&, std::vector<Var>& v) { return cox_loss(v[0], t, e, strict); },
                                 {random_tensor({6}, g)});
    CHECK(err < 1e-7);
  }
  // raising the risk of the earliest event lowers the loss
  Tensor phi({6}, 0.0);
  double prev = cox_loss(phi, t, e);
  for (int k = 1; k <= 5; ++k) {
    phi[0] = 0.5 * k;
    const double cur = cox_loss(phi, t, e);
    CHECK(cur < prev);
    prev = cur;
  }
  const std::vector<int> none(6, 0);
  CHECK_THROWS_AS(cox_loss(phi, t, none), ContractError);
}

TEST_CASE("peak extraction and suppression") {
  std::vector<double> z(300, -8.0);
  z[100] = 4.0;
  CHECK(extract_peaks(z, 100.0) == std::vector<std::size_t>{100});
  // two maxima 100 ms apart: the weaker one goes
  z[110] = 3.0;
  CHECK(extract_peaks(z, 100.0) == std::vector<std::size_t>{100});
  // exactly one refractory period apart: both stay
  z[110] = -8.0;
  z[120] = 3.0;
  CHECK(extract_peaks(z, 100.0) == std::vector<std::size_t>{100, 120});
  // below threshold
  z[200] = -0.1;
  CHECK(extract_peaks(z, 100.0).size() == 2);
  const auto tr = rpeak_targets(10, std::vector<std::size_t>{0, 5}, 1);
  CHECK(tr == std::vector<double>{1, 1, 0, 0, 1, 1, 1, 0, 0, 0});
}

TEST_CASE("minute averaging") {
  CHECK(patches_per_minute(25, 100.0) == 240);
  CHECK_THROWS_AS(patches_per_minute(7, 100.0), ConfigError);
  std::vector<double> p(720);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = i % 2 ? 1.0 : 0.0;
  const auto m = minute_average(p, 240);
  REQUIRE(m.size() == 3);
  for (double v : m) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  p.resize(730, 1.0);
  CHECK(minute_average(p, 240).size() == 3);
}

TEST_CASE("adapt plan json") {
  const auto j = nlohmann::json::parse(R"({"mode":"finetune","learning_rate_head":0.01,
    "learning_rate_encoder":0.001,"layerwise_lr_decay":0.75,"drop_path":0.0,"batch_size":8,
    "window_len":20,"patch_representation":"avg","weight_decay":0.0,"epochs":30})");
  const AdaptPlan p = adapt_plan_from_json(j);
  CHECK(p.mode == AdaptMode::kFinetune);
  CHECK(p.batch_size == 8);
  CHECK(p.window.window_len_s == 20.0);
  CHECK(adapt_plan_from_json(to_json(p)).lr_encoder == 0.001);
  CHECK_THROWS_AS(adapt_plan_from_json(nlohmann::json{{"learning_rate", 0.1}}), ConfigError);
  CHECK_THROWS_AS(adapt_plan_from_json(nlohmann::json{{"window_len", 5}, {"overlap", 5}}), ConfigError);
}

TEST_CASE("layer-wise learning rates for finetuning") {
  EncoderConfig c = tiny_cfg();
  Rng rng(1);
  const ParamSet enc = init_encoder(c, rng);
  const auto s = layer_lr_scales(enc, c.n_blocks(), 0.75);
  for (std::size_t i = 0; i < enc.size(); ++i) {
    const auto& n = enc.name(i);
    if (n.rfind("block0.", 0) == 0) CHECK(s[i] == doctest::Approx(0.5625));
    if (n.rfind("block1.", 0) == 0) CHECK(s[i] == doctest::Approx(0.75));
    if (n.rfind("pool.", 0) == 0) CHECK(s[i] == doctest::Approx(1.0));
  }
}

TEST_CASE("linear probe leaves the encoder untouched, finetuning does not") {
  EncoderConfig c = tiny_cfg();
  Rng rng(3);
  const ParamSet enc = init_encoder(c, rng);
  const auto before = params_hash(enc);
  const auto train = rpeak_samples(3, 6.0, 10);
  AdaptPlan plan;
  plan.epochs = 2;
  plan.batch_size = 2;
  plan.window.window_len_s = 3.0;
  plan.lr_head = 0.05;
  const TaskHead h0 = init_head(HeadKind::kDetection, c.embed_dim, c.patch_size, rng);
  const AdaptResult probe = adapt(c, enc, h0, train, train, plan, MetricId::kRpeakF1, 1);
  CHECK(params_hash(enc) == before);
  CHECK(params_hash(probe.encoder) == before);
  CHECK(params_hash(probe.head.params) != params_hash(h0.params));
  CHECK(probe.val_history.size() == 2);

  plan.mode = AdaptMode::kFinetune;
  plan.lr_encoder = 1e-3;
  const AdaptResult ft = adapt(c, enc, h0, train, {}, plan, MetricId::kRpeakF1, 1);
  CHECK(params_hash(ft.encoder) != before);
  // deterministic for a fixed seed
  const AdaptResult ft2 = adapt(c, enc, h0, train, {}, plan, MetricId::kRpeakF1, 1);
  CHECK(params_hash(ft2.encoder) == params_hash(ft.encoder));
  CHECK_THROWS_AS(adapt(c, enc, h0, {}, {}, plan, MetricId::kRpeakF1, 1), ContractError);
}

TEST_CASE("probe learns a separable pooled task; regression targets map back") {
  EncoderConfig c = tiny_cfg();
  Rng rng(4);
  const ParamSet enc = init_encoder(c, rng);
  std::vector<TaskSample> data;
  for (int i = 0; i < 24; ++i) {
    SynthSpec s;
    s.duration_s = 5.0;
    s.twelve_lead = false;
    s.rr_interval_s = i % 2 ? 0.5 : 1.2;
    TaskSample t;
    t.record = synth_ecg(s, 100 + i).record;
    t.y = {static_cast<double>(i % 2)};
    data.push_back(std::move(t));
  }
  AdaptPlan plan;
  plan.epochs = 40;
  plan.batch_size = 8;
  plan.lr_head = 0.05;
  plan.weight_decay = 0.0;
  const AdaptResult r =
      adapt(c, enc, init_head(HeadKind::kMultilabel, c.embed_dim, 1, rng), data, data, plan, MetricId::kAuroc, 2);
  CHECK(r.best_val > 0.9);

  for (auto& d : data) d.y[0] = d.y[0] * 40.0 + 60.0;  // heart-rate-like targets
  const AdaptResult reg =
      adapt(c, enc, init_head(HeadKind::kRegression, c.embed_dim, 1, rng), data, data, plan, MetricId::kOneMinusSmape, 2);
  CHECK(reg.target_mean == doctest::Approx(80.0));
  const Predictions pr = predict(c, reg, data, plan);
  double mean_pred = 0.0;
  for (const auto& s : pr.scores) mean_pred += s[0] / static_cast<double>(pr.scores.size());
  CHECK(mean_pred == doctest::Approx(80.0).epsilon(0.1));
}

TEST_CASE("segmentation windows stay minute aligned") {
  EncoderConfig c = tiny_cfg();
  Rng rng(6);
  const ParamSet enc = init_encoder(c, rng);
  SynthSpec s;
  s.duration_s = 200.0;  // 3 whole minutes plus 20 s
  s.twelve_lead = false;
  s.apnea_minutes = {true, false, true};
  TaskSample t;
  t.record = synth_ecg(s, 7).record;
  t.y = {1, 0, 1};
  const std::vector<TaskSample> data{t};
  AdaptPlan plan;
  plan.window.window_len_s = 120.0;
  plan.window.overlap_s = 60.0;
  const TaskHead h = init_head(HeadKind::kSegmentation, c.embed_dim, 1, rng);
  const Predictions p = predict(c, enc, h, data, plan);
  REQUIRE(p.minute_probs.size() == 1);
  CHECK(p.minute_probs[0].size() == 3);
  plan.window.window_len_s = 90.0;  // not a whole number of minutes
  CHECK_THROWS_AS(predict(c, enc, h, data, plan), ConfigError);
}
