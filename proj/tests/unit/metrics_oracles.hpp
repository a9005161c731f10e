// Brute-force references for the metric tests. Deliberately naive.
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "xecg/metrics.hpp"

namespace xecg::testing {

inline double auroc_pairs(const std::vector<double>& s, const std::vector<int>& y) {
  double win = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        win += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return win / pairs;
}

inline ConfusionMetrics confusion_counts(const std::vector<int>& p, const std::vector<int>& l, std::size_t k) {
  std::vector<std::vector<double>> cm(k, std::vector<double>(k, 0.0));
  for (std::size_t i = 0; i < p.size(); ++i) cm[static_cast<std::size_t>(l[i])][static_cast<std::size_t>(p[i])] += 1.0;
  auto safe = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
  auto one = [&](std::size_t c) {
    double tp = cm[c][c], fp = 0.0, fn = 0.0, tn = 0.0;
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t q = 0; q < k; ++q) {
        if (r == c && q == c) continue;
        if (q == c) fp += cm[r][q];
        else if (r == c) fn += cm[r][q];
        else tn += cm[r][q];
      }
    ConfusionMetrics m;
    m.sensitivity = safe(tp, tp + fn);
    m.ppv = safe(tp, tp + fp);
    m.specificity = safe(tn, tn + fp);
    m.f1 = safe(2 * tp, 2 * tp + fp + fn);
    return std::make_pair(m, tp + fp + fn > 0.0);
  };
  ConfusionMetrics out;
  if (k == 2) {
    out = one(1).first;
  } else {
    double used = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const auto [m, present] = one(c);
      if (!present) continue;
      out.sensitivity += m.sensitivity;
      out.ppv += m.ppv;
      out.specificity += m.specificity;
      out.f1 += m.f1;
      used += 1.0;
    }
    if (used > 0.0) {
      out.sensitivity /= used;
      out.ppv /= used;
      out.specificity /= used;
      out.f1 /= used;
    }
  }
  double diag = 0.0;
  for (std::size_t c = 0; c < k; ++c) diag += cm[c][c];
  out.accuracy = diag / static_cast<double>(p.size());
  return out;
}

inline double smape_loop(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::fabs(a[i]) + std::fabs(b[i]);
    s += d == 0.0 ? 0.0 : std::fabs(a[i] - b[i]) / d;
  }
  return s / static_cast<double>(a.size());
}

// NaN when no pair is comparable.
inline double cindex_pairs(const std::vector<double>& r, const std::vector<double>& t, const std::vector<int>& e) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < r.size(); ++j)
      if (e[i] && t[i] < t[j]) {
        den += 1.0;
        num += r[i] > r[j] ? 1.0 : (r[i] == r[j] ? 0.5 : 0.0);
      }
  return den > 0.0 ? num / den : std::numeric_limits<double>::quiet_NaN();
}

// Maximum number of tolerance-respecting pairs via the Hungarian algorithm on
// a 0/1 cost matrix (0 = within tolerance), padded to square.
inline std::size_t hungarian_matches(const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth,
                                     double fs, double tol_total_ms) {
  const std::size_t n = std::max(pred.size(), truth.size());
  if (n == 0) return 0;
  auto cost = [&](std::size_t i, std::size_t j) {
    if (i >= pred.size() || j >= truth.size()) return 1.0;
    const double d = std::fabs(static_cast<double>(pred[i]) - static_cast<double>(truth[j])) * 1000.0 / fs;
    return d <= tol_total_ms / 2.0 ? 0.0 : 1.0;
  };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1), v(n + 1);
  std::vector<std::size_t> p(n + 1), way(n + 1);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  std::size_t matches = 0;
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0 && cost(p[j] - 1, j - 1) == 0.0) ++matches;
  return matches;
}

// Two-sided p of Student's t by composite Simpson integration of the density.
inline double t_two_sided_p(double t, double df) {
  const double c = std::exp(std::lgamma((df + 1) / 2) - std::lgamma(df / 2)) / std::sqrt(df * M_PI);
  auto pdf = [&](double x) { return c * std::pow(1.0 + x * x / df, -(df + 1) / 2); };
  const double a = 0.0, b = std::fabs(t);
  const int n = 200000;
  const double h = (b - a) / n;
  double s = pdf(a) + pdf(b);
  for (int i = 1; i < n; ++i) s += pdf(a + i * h) * (i % 2 ? 4.0 : 2.0);
  const double inner = s * h / 3.0;  // P(0 < T < |t|)
  return 1.0 - 2.0 * inner;
}

}  // namespace xecg::testing
