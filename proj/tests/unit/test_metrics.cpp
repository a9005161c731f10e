#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "metrics_oracles.hpp"
#include "xecg/metrics.hpp"

using namespace xecg;
namespace oracle = xecg::testing;

TEST_CASE("auroc") {
  CHECK(auroc(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}) == 1.0);
  CHECK(auroc(std::vector<double>{0.3, 0.3, 0.3}, std::vector<int>{0, 1, 1}) == 0.5);
  CHECK_THROWS_AS(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), MetricError);

  std::mt19937_64 g(1);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 2 + g() % 19;
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(g() % 7) / 7.0;  // plenty of ties
      y[i] = static_cast<int>(g() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    CHECK(std::abs(auroc(s, y) - oracle::auroc_pairs(s, y)) <= 1e-12);
    // strictly increasing transform
    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3.0 * s[i]) - 5.0;
    CHECK(auroc(t, y) == auroc(s, y));
  }
}

TEST_CASE("macro auroc and average precision") {
  // class 2 has a single label value and is skipped
  const std::vector<double> s = {0.9, 0.1, 0.5, 0.2, 0.8, 0.5, 0.7, 0.3, 0.5};
  const std::vector<int> y = {1, 0, 1, 0, 1, 1, 1, 0, 1};
  const std::vector<double> c0 = {0.9, 0.2, 0.7}, c1 = {0.1, 0.8, 0.3};
  const std::vector<int> y0 = {1, 0, 1}, y1 = {0, 1, 0};
  CHECK(macro_auroc(s, y, 3) == doctest::Approx((auroc(c0, y0) + auroc(c1, y1)) / 2.0));

  CHECK(average_precision(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 1, 0}) == doctest::Approx(1.0));
  // ranking: pos, neg, pos -> (1/1 + 2/3) / 2
  CHECK(average_precision(std::vector<double>{0.9, 0.8, 0.7}, std::vector<int>{1, 0, 1}) ==
        doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
}

TEST_CASE("confusion suite") {
  const std::vector<int> y = {0, 1, 2, 1, 0};
  const ConfusionMetrics perfect = confusion_suite(y, y, 3);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.sensitivity == 1.0);
  CHECK(perfect.ppv == 1.0);
  CHECK(perfect.specificity == 1.0);

  const ConfusionMetrics neg = confusion_suite(std::vector<int>{0, 0, 0, 0}, std::vector<int>{0, 1, 0, 1}, 2);
  CHECK(neg.sensitivity == 0.0);
  CHECK(neg.specificity == 1.0);
  CHECK(neg.accuracy == 0.5);

  std::mt19937_64 g(2);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 1 + g() % 25, k = 2 + g() % 3;
    std::vector<int> p(n), l(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(g() % k);
      l[i] = static_cast<int>(g() % k);
    }
    const ConfusionMetrics a = confusion_suite(p, l, k);
    const ConfusionMetrics b = oracle::confusion_counts(p, l, k);
    CHECK(std::abs(a.accuracy - b.accuracy) <= 1e-12);
    CHECK(std::abs(a.f1 - b.f1) <= 1e-12);
    CHECK(std::abs(a.sensitivity - b.sensitivity) <= 1e-12);
    CHECK(std::abs(a.ppv - b.ppv) <= 1e-12);
    CHECK(std::abs(a.specificity - b.specificity) <= 1e-12);
  }
}

TEST_CASE("smape") {
  CHECK(smape(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}) == 0.0);
  CHECK(smape(std::vector<double>{10}, std::vector<double>{30}) == 0.5);
  CHECK(smape(std::vector<double>{0, 1}, std::vector<double>{0, 1}) == 0.0);
  std::mt19937_64 g(3);
  std::uniform_real_distribution<double> u(-50.0, 50.0);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 1 + g() % 10;
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = u(g);
      b[i] = u(g);
    }
    const double v = smape(a, b);
    CHECK(std::abs(v - oracle::smape_loop(a, b)) <= 1e-12);
    CHECK(v == smape(b, a));
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("concordance index") {
  const std::vector<double> t = {1, 2, 3, 4};
  const std::vector<int> e = {1, 1, 1, 1};
  CHECK(concordance_index(std::vector<double>{4, 3, 2, 1}, t, e) == 1.0);
  CHECK(concordance_index(std::vector<double>{1, 1, 1, 1}, t, e) == 0.5);
  CHECK_THROWS_AS(concordance_index(std::vector<double>{1, 2}, std::vector<double>{1, 2}, std::vector<int>{0, 0}),
                  MetricError);

  std::mt19937_64 g(4);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 2 + g() % 15;
    std::vector<double> r(n), tt(n);
    std::vector<int> ev(n);
    for (std::size_t i = 0; i < n; ++i) {
      r[i] = static_cast<double>(g() % 5);
      tt[i] = 1.0 + static_cast<double>(g() % 6);
      ev[i] = static_cast<int>(g() % 3 != 0);
    }
    const double ref = oracle::cindex_pairs(r, tt, ev);
    if (std::isnan(ref)) {
      CHECK_THROWS_AS(concordance_index(r, tt, ev), MetricError);
      continue;
    }
    CHECK(std::abs(concordance_index(r, tt, ev) - ref) <= 1e-12);
  }

  // no ties: C(-phi) = 1 - C(phi)
  std::vector<double> r(30), tt(30);
  std::vector<int> ev(30);
  for (std::size_t i = 0; i < 30; ++i) {
    r[i] = std::sin(1.7 * static_cast<double>(i));
    tt[i] = 1.0 + static_cast<double>(i) * 0.37 + std::cos(static_cast<double>(i));
    ev[i] = i % 3 != 0;
  }
  std::vector<double> neg(r);
  for (double& v : neg) v = -v;
  CHECK(concordance_index(neg, tt, ev) == doctest::Approx(1.0 - concordance_index(r, tt, ev)).epsilon(1e-14));
}

TEST_CASE("r-peak F1") {
  const std::vector<std::size_t> peaks = {100, 200, 300};
  CHECK(rpeak_f1(peaks, peaks, 100.0).f1 == 1.0);
  // 15 ms off at 1 kHz with a 20 ms total window: no match
  const PeakMatch off = rpeak_f1(std::vector<std::size_t>{115}, std::vector<std::size_t>{100}, 1000.0, 20.0);
  CHECK(off.tp == 0);
  CHECK(off.f1 == 0.0);
  CHECK(rpeak_f1(std::vector<std::size_t>{110}, std::vector<std::size_t>{100}, 1000.0, 20.0).tp == 1);
  CHECK(rpeak_f1(std::vector<std::size_t>{}, std::vector<std::size_t>{}, 100.0).f1 == 1.0);

  std::mt19937_64 g(5);
  for (int rep = 0; rep < 100; ++rep) {
    // truths at least 2 * tol apart, predictions jittered around a subset plus spurious ones
    const double fs = 250.0, tol = 20.0;
    std::vector<std::size_t> truth, pred;
    std::size_t pos = 10;
    for (int k = 0; k < 50; ++k) {
      pos += 20 + g() % 200;  // >= 80 ms apart
      truth.push_back(pos);
      if (g() % 5 != 0) pred.push_back(pos + g() % 7 - 3);
      if (g() % 6 == 0) pred.push_back(pos + 5 + g() % 10);
    }
    std::sort(pred.begin(), pred.end());
    const PeakMatch greedy = rpeak_f1(pred, truth, fs, tol);
    const std::size_t best = oracle::hungarian_matches(pred, truth, fs, tol);
    CHECK(greedy.tp == best);
    CHECK(rpeak_f1(pred, truth, fs, tol, true).tp == best);
    CHECK(rpeak_f1(pred, truth, fs, 150.0).f1 >= greedy.f1);
  }
}

TEST_CASE("kaplan meier") {
  const auto none = kaplan_meier(std::vector<double>{1, 2, 3}, std::vector<int>{0, 0, 0});
  CHECK(none.empty());
  CHECK(km_survival_at(none, 5.0) == 1.0);

  const auto both = kaplan_meier(std::vector<double>{1, 1}, std::vector<int>{1, 1});
  REQUIRE(both.size() == 1);
  CHECK(both[0].survival == 0.0);

  // hand product-limit: (1 - 1/5)(1 - 1/4)(1 - 1/2)
  const auto km = kaplan_meier(std::vector<double>{2, 1, 4, 2, 3}, std::vector<int>{1, 1, 0, 0, 1});
  REQUIRE(km.size() == 3);
  CHECK(std::abs(km[0].survival - 0.8) <= 1e-12);
  CHECK(std::abs(km[1].survival - 0.6) <= 1e-12);
  CHECK(std::abs(km[2].survival - 0.3) <= 1e-12);
  CHECK(km[1].at_risk == 4);
  CHECK(km_survival_at(km, 0.5) == 1.0);
  CHECK(km_survival_at(km, 2.5) == km[1].survival);
  for (std::size_t i = 1; i < km.size(); ++i) CHECK(km[i].survival <= km[i - 1].survival);
}

TEST_CASE("cox fit") {
  SUBCASE("hazard ratio 2 is recovered") {
    std::mt19937_64 g(6);
    std::exponential_distribution<double> ex(1.0);
    const std::size_t n = 2000;
    Tensor x({n, 1});
    std::vector<double> t(n);
    std::vector<int> e(n);
    for (std::size_t i = 0; i < n; ++i) {
      x.at(i, 0) = static_cast<double>(g() % 2);
      const double ti = ex(g) / (0.2 * (x.at(i, 0) > 0 ? 2.0 : 1.0));
      const double ci = ex(g) / 0.05;
      t[i] = std::min(ti, ci);
      e[i] = ti <= ci;
    }
    const CoxFit f = cox_fit(x, t, e);
    CHECK(f.hazard_ratio[0] >= 1.8);
    CHECK(f.hazard_ratio[0] <= 2.2);
    CHECK(f.se[0] > 0.0);
  }
  SUBCASE("sign on constructed data") {
    Tensor x({8, 1}, {1, 1, 1, 1, 0, 0, 0, 0});
    const std::vector<double> t = {1, 2, 3, 4.5, 4, 6, 7, 8};
    const std::vector<int> e = {1, 1, 1, 1, 1, 0, 0, 0};
    CHECK(cox_fit(x, t, e).beta[0] > 0.0);
  }
  SUBCASE("zero column is singular") {
    Tensor x({6, 2}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0});
    const std::vector<double> t = {1, 2, 3, 4, 5, 6};
    const std::vector<int> e = {1, 1, 0, 1, 1, 0};
    CHECK_THROWS_AS(cox_fit(x, t, e), FitError);
  }
  SUBCASE("null effect within 3 SE") {
    std::mt19937_64 g(7);
    std::exponential_distribution<double> ex(1.0);
    int inside = 0;
    for (int sim = 0; sim < 100; ++sim) {
      Tensor x({200, 1});
      std::vector<double> t(200);
      std::vector<int> e(200);
      for (std::size_t i = 0; i < 200; ++i) {
        x.at(i, 0) = std::normal_distribution<double>(0.0, 1.0)(g);
        const double ti = ex(g), ci = 2.0 * ex(g);
        t[i] = std::min(ti, ci);
        e[i] = ti <= ci;
      }
      const CoxFit f = cox_fit(x, t, e);
      inside += std::abs(f.beta[0]) < 3.0 * f.se[0];
    }
    CHECK(inside >= 95);
  }
}

TEST_CASE("risk groups") {
  std::vector<double> phi(100);
  for (std::size_t i = 0; i < 100; ++i) phi[i] = static_cast<double>(i + 1);
  const auto grp = risk_groups(phi);
  for (std::size_t i = 0; i < 100; ++i) {
    const RiskGroup want = i < 25 ? RiskGroup::kLow : (i >= 75 ? RiskGroup::kHigh : RiskGroup::kBaseline);
    CHECK(grp[i] == want);
  }
  for (RiskGroup r : risk_groups(std::vector<double>(8, 3.0))) CHECK(r == RiskGroup::kLow);

  std::mt19937_64 g(8);
  std::vector<double> rnd(10000);
  for (double& v : rnd) v = std::normal_distribution<double>(0.0, 1.0)(g);
  const auto rg = risk_groups(rnd);
  const auto low = std::count(rg.begin(), rg.end(), RiskGroup::kLow);
  const auto high = std::count(rg.begin(), rg.end(), RiskGroup::kHigh);
  CHECK(low == 2500);
  CHECK(high == 2500);
}

TEST_CASE("welch t") {
  const std::vector<double> a = {1, 2, 3, 4, 5};
  const WelchResult same = welch_t(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);
  std::vector<double> b(a);
  for (double& v : b) v += 10.0;
  const WelchResult far = welch_t(a, b);
  CHECK(far.p < 0.001);
  CHECK(far.df == doctest::Approx(8.0).epsilon(1e-12));
  CHECK(std::abs(far.p - oracle::t_two_sided_p(far.t, far.df)) < 1e-8);

  const std::vector<double> c = {2.1, 2.9, 3.3, 4.8, 1.7, 2.2}, d = {3.5, 4.1, 2.9, 5.5};
  const WelchResult w = welch_t(c, d);
  CHECK(w.p == welch_t(d, c).p);
  CHECK(std::abs(w.p - oracle::t_two_sided_p(w.t, w.df)) < 1e-8);

  CHECK(welch_t(std::vector<double>{1, 1}, std::vector<double>{1, 1}).p == 1.0);
  CHECK(welch_t(std::vector<double>{1, 1}, std::vector<double>{2, 2}).p == 0.0);
  CHECK_THROWS_AS(welch_t(std::vector<double>{1}, a), MetricError);
}

TEST_CASE("bench score and ranks") {
  CHECK(bench_score(std::vector<double>{0.8, 0.9}) == doctest::Approx(0.85));
  std::map<std::string, std::map<std::string, std::vector<double>>> s;
  s["best"]["a"] = {1.0, 1.0};
  s["best"]["b"] = {1.0, 1.0};
  s["other"]["a"] = {0.5, 0.6};
  s["other"]["b"] = {0.7, 0.9};
  const RankTable t = rank_table(s);
  CHECK(t.score[0] == 1.0);
  CHECK(t.mean_rank[0] == 1.0);
  CHECK(t.mean_rank[1] == 2.0);

  // per-task monotone rescaling keeps ranks
  auto s2 = s;
  for (auto& [m, tasks] : s2)
    for (double& v : tasks["a"]) v = v * v;
  CHECK(rank_table(s2).ranks == t.ranks);

  s["third"]["a"] = {0.1, 0.2};
  CHECK_THROWS_AS(rank_table(s), ScoringError);
}
