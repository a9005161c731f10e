#include "xecg/metrics.hpp"

#include <Eigen/Dense>
#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace xecg {

namespace {

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ShapeError(std::string(what) + ": length mismatch");
}

// Sum of mid-ranks (1-based) for the positives.
double positive_rank_sum(std::span<const double> scores, std::span<const int> labels) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double sum = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[idx[k]]) sum += mid;
    i = j;
  }
  return sum;
}

std::vector<double> column(std::span<const double> m, std::size_t n_cols, std::size_t c) {
  std::vector<double> out(m.size() / n_cols);
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = m[r * n_cols + c];
  return out;
}

std::vector<int> column(std::span<const int> m, std::size_t n_cols, std::size_t c) {
  std::vector<int> out(m.size() / n_cols);
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = m[r * n_cols + c];
  return out;
}

template <typename F>
double macro_over_classes(std::span<const double> scores, std::span<const int> labels, std::size_t n_classes,
                          F metric, const char* name) {
  if (n_classes == 0 || scores.size() != labels.size() || scores.size() % n_classes != 0)
    throw ShapeError(std::string(name) + ": expected matching [n x classes] inputs");
  double sum = 0.0;
  std::size_t used = 0;
  for (std::size_t c = 0; c < n_classes; ++c) {
    const auto y = column(labels, n_classes, c);
    const auto pos = static_cast<std::size_t>(std::count_if(y.begin(), y.end(), [](int v) { return v != 0; }));
    if (pos == 0 || pos == y.size()) continue;
    sum += metric(column(scores, n_classes, c), y);
    ++used;
  }
  if (used == 0) throw MetricError(std::string(name) + ": no class has both labels");
  return sum / static_cast<double>(used);
}

double ratio(double num, double den) { return den > 0.0 ? num / den : 0.0; }

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  require_same(scores.size(), labels.size(), "auroc");
  const auto pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](int v) { return v != 0; }));
  const double neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0.0 || neg == 0.0) throw MetricError("auroc: both classes are required");
  const double u = positive_rank_sum(scores, labels) - pos * (pos + 1.0) / 2.0;
  return u / (pos * neg);
}

double macro_auroc(std::span<const double> scores, std::span<const int> labels, std::size_t n_classes) {
  return macro_over_classes(
      scores, labels, n_classes, [](const std::vector<double>& s, const std::vector<int>& y) { return auroc(s, y); },
      "macro_auroc");
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  require_same(scores.size(), labels.size(), "average_precision");
  const auto pos = static_cast<double>(std::count_if(labels.begin(), labels.end(), [](int v) { return v != 0; }));
  if (pos == 0.0) throw MetricError("average_precision: no positives");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0.0, tp = 0.0, seen = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    double group_tp = 0.0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) group_tp += labels[idx[j++]] != 0 ? 1.0 : 0.0;
    tp += group_tp;
    seen += static_cast<double>(j - i);
    ap += (group_tp / pos) * (tp / seen);
    i = j;
  }
  return ap;
}

double macro_average_precision(std::span<const double> scores, std::span<const int> labels, std::size_t n_classes) {
  return macro_over_classes(
      scores, labels, n_classes,
      [](const std::vector<double>& s, const std::vector<int>& y) { return average_precision(s, y); },
      "macro_average_precision");
}

ConfusionMetrics confusion_suite(std::span<const int> pred, std::span<const int> label, std::size_t n_classes) {
  require_same(pred.size(), label.size(), "confusion_suite");
  if (n_classes < 2) throw ShapeError("confusion_suite: need at least 2 classes");
  const std::size_t n = pred.size();
  std::vector<double> tp(n_classes), fp(n_classes), fn(n_classes);
  double correct = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (pred[i] < 0 || label[i] < 0 || static_cast<std::size_t>(pred[i]) >= n_classes ||
        static_cast<std::size_t>(label[i]) >= n_classes)
      throw DomainError("confusion_suite: class index out of range");
    if (pred[i] == label[i]) {
      tp[static_cast<std::size_t>(pred[i])] += 1.0;
      correct += 1.0;
    } else {
      fp[static_cast<std::size_t>(pred[i])] += 1.0;
      fn[static_cast<std::size_t>(label[i])] += 1.0;
    }
  }
  auto per_class = [&](std::size_t c) {
    const double tn = static_cast<double>(n) - tp[c] - fp[c] - fn[c];
    ConfusionMetrics m;
    m.sensitivity = ratio(tp[c], tp[c] + fn[c]);
    m.ppv = ratio(tp[c], tp[c] + fp[c]);
    m.specificity = ratio(tn, tn + fp[c]);
    m.f1 = ratio(2.0 * tp[c], 2.0 * tp[c] + fp[c] + fn[c]);
    return m;
  };
  ConfusionMetrics out;
  if (n_classes == 2) {
    out = per_class(1);
  } else {
    std::size_t used = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
      if (tp[c] + fp[c] + fn[c] == 0.0) continue;
      const ConfusionMetrics m = per_class(c);
      out.sensitivity += m.sensitivity;
      out.ppv += m.ppv;
      out.specificity += m.specificity;
      out.f1 += m.f1;
      ++used;
    }
    if (used > 0) {
      const double u = static_cast<double>(used);
      out.sensitivity /= u;
      out.ppv /= u;
      out.specificity /= u;
      out.f1 /= u;
    }
  }
  out.accuracy = n > 0 ? correct / static_cast<double>(n) : 0.0;
  return out;
}

double smape(std::span<const double> pred, std::span<const double> truth) {
  require_same(pred.size(), truth.size(), "smape");
  if (pred.empty()) throw MetricError("smape: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double den = std::abs(pred[i]) + std::abs(truth[i]);
    if (den > 0.0) s += std::abs(pred[i] - truth[i]) / den;
  }
  return s / static_cast<double>(pred.size());
}

double concordance_index(std::span<const double> risk, std::span<const double> time, std::span<const int> event) {
  require_same(risk.size(), time.size(), "concordance_index");
  require_same(risk.size(), event.size(), "concordance_index");
  const std::size_t n = risk.size();
  // Fenwick tree over risk ranks, filled with subjects of strictly later time.
  std::vector<double> sorted_risk(risk.begin(), risk.end());
  std::sort(sorted_risk.begin(), sorted_risk.end());
  sorted_risk.erase(std::unique(sorted_risk.begin(), sorted_risk.end()), sorted_risk.end());
  const std::size_t m = sorted_risk.size();
  std::vector<std::size_t> tree(m + 1, 0);
  auto rank_of = [&](double r) {
    return static_cast<std::size_t>(std::lower_bound(sorted_risk.begin(), sorted_risk.end(), r) - sorted_risk.begin());
  };
  auto add = [&](std::size_t pos) {
    for (std::size_t i = pos + 1; i <= m; i += i & (~i + 1)) ++tree[i];
  };
  auto below = [&](std::size_t pos) {  // count of ranks < pos
    std::size_t s = 0;
    for (std::size_t i = pos; i > 0; i -= i & (~i + 1)) s += tree[i];
    return s;
  };
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return time[a] > time[b]; });
  double concordant = 0.0, comparable = 0.0;
  std::size_t inserted = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && time[idx[j]] == time[idx[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      const std::size_t s = idx[k];
      if (!event[s]) continue;
      const std::size_t r = rank_of(risk[s]);
      const std::size_t lt = below(r), le = below(r + 1);
      concordant += static_cast<double>(lt) + 0.5 * static_cast<double>(le - lt);
      comparable += static_cast<double>(inserted);
    }
    for (std::size_t k = i; k < j; ++k) add(rank_of(risk[idx[k]]));
    inserted += j - i;
    i = j;
  }
  if (comparable == 0.0) throw MetricError("concordance_index: no comparable pairs");
  return concordant / comparable;
}

namespace {

// Maximum-cardinality matching on the tolerance graph (augmenting paths).
std::size_t max_matching(const std::vector<std::vector<std::size_t>>& adj, std::size_t n_right) {
  std::vector<std::ptrdiff_t> match_r(n_right, -1);
  std::vector<char> seen;
  std::function<bool(std::size_t)> augment = [&](std::size_t u) {
    for (std::size_t v : adj[u]) {
      if (seen[v]) continue;
      seen[v] = 1;
      if (match_r[v] < 0 || augment(static_cast<std::size_t>(match_r[v]))) {
        match_r[v] = static_cast<std::ptrdiff_t>(u);
        return true;
      }
    }
    return false;
  };
  std::size_t count = 0;
  for (std::size_t u = 0; u < adj.size(); ++u) {
    seen.assign(n_right, 0);
    if (augment(u)) ++count;
  }
  return count;
}

}  // namespace

PeakMatch rpeak_f1(std::span<const std::size_t> pred, std::span<const std::size_t> truth, double fs,
                   double tol_total_ms, bool optimal) {
  if (!(fs > 0.0)) throw DomainError("rpeak_f1: sampling rate must be positive");
  if (!std::is_sorted(pred.begin(), pred.end()) || !std::is_sorted(truth.begin(), truth.end()))
    throw DomainError("rpeak_f1: peak indices must be sorted");
  const double half = tol_total_ms / 2.0;
  auto dt_ms = [&](std::size_t a, std::size_t b) {
    return static_cast<double>(a > b ? a - b : b - a) * 1000.0 / fs;
  };
  struct Pair {
    double dt;
    std::size_t p, t;
  };
  std::vector<Pair> pairs;
  std::vector<std::vector<std::size_t>> adj(pred.size());
  std::size_t lo = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    while (lo < truth.size() && truth[lo] < pred[i] && dt_ms(truth[lo], pred[i]) > half) ++lo;
    for (std::size_t j = lo; j < truth.size(); ++j) {
      const double d = dt_ms(pred[i], truth[j]);
      if (truth[j] > pred[i] && d > half) break;
      if (d <= half) {
        pairs.push_back({d, i, j});
        adj[i].push_back(j);
      }
    }
  }
  std::size_t tp = 0;
  if (optimal) {
    tp = max_matching(adj, truth.size());
  } else {
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      return a.dt != b.dt ? a.dt < b.dt : (a.p != b.p ? a.p < b.p : a.t < b.t);
    });
    std::vector<char> used_p(pred.size(), 0), used_t(truth.size(), 0);
    for (const Pair& q : pairs) {
      if (used_p[q.p] || used_t[q.t]) continue;
      used_p[q.p] = used_t[q.t] = 1;
      ++tp;
    }
  }
  PeakMatch m;
  m.tp = tp;
  m.fp = pred.size() - tp;
  m.fn = truth.size() - tp;
  const double den = 2.0 * static_cast<double>(tp) + static_cast<double>(m.fp + m.fn);
  m.f1 = den > 0.0 ? 2.0 * static_cast<double>(tp) / den : 1.0;
  return m;
}

std::vector<KmPoint> kaplan_meier(std::span<const double> time, std::span<const int> event) {
  require_same(time.size(), event.size(), "kaplan_meier");
  std::vector<std::size_t> idx(time.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return time[a] < time[b]; });
  std::vector<KmPoint> out;
  double s = 1.0;
  std::size_t at_risk = time.size();
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i, d = 0;
    while (j < idx.size() && time[idx[j]] == time[idx[i]]) d += event[idx[j++]] ? 1 : 0;
    if (d > 0) {
      s *= 1.0 - static_cast<double>(d) / static_cast<double>(at_risk);
      out.push_back({time[idx[i]], s, at_risk, d});
    }
    at_risk -= j - i;
    i = j;
  }
  return out;
}

double km_survival_at(std::span<const KmPoint> curve, double t) {
  double s = 1.0;
  for (const auto& p : curve) {
    if (p.time > t) break;
    s = p.survival;
  }
  return s;
}

namespace {

struct CoxEval {
  double loglik = 0.0;
  Eigen::VectorXd grad;
  Eigen::MatrixXd info;
};

CoxEval cox_eval(const Eigen::MatrixXd& x, std::span<const double> time, std::span<const int> event,
                 const std::vector<std::size_t>& order_desc, const Eigen::VectorXd& beta) {
  const std::size_t n = static_cast<std::size_t>(x.rows());
  const auto p = x.cols();
  Eigen::VectorXd eta = x * beta;
  const double shift = eta.maxCoeff();
  CoxEval e;
  e.grad = Eigen::VectorXd::Zero(p);
  e.info = Eigen::MatrixXd::Zero(p, p);
  double s0 = 0.0;
  Eigen::VectorXd s1 = Eigen::VectorXd::Zero(p);
  Eigen::MatrixXd s2 = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && time[order_desc[j]] == time[order_desc[i]]) {
      const auto r = static_cast<Eigen::Index>(order_desc[j]);
      const double w = std::exp(eta(r) - shift);
      s0 += w;
      s1 += w * x.row(r).transpose();
      s2 += w * x.row(r).transpose() * x.row(r);
      ++j;
    }
    const Eigen::VectorXd mean = s1 / s0;
    const Eigen::MatrixXd cov = s2 / s0 - mean * mean.transpose();
    for (std::size_t k = i; k < j; ++k) {
      const auto r = static_cast<Eigen::Index>(order_desc[k]);
      if (!event[order_desc[k]]) continue;
      e.loglik += eta(r) - shift - std::log(s0);
      e.grad += x.row(r).transpose() - mean;
      e.info += cov;
    }
    i = j;
  }
  return e;
}

}  // namespace

CoxFit cox_fit(const Tensor& xt, std::span<const double> time, std::span<const int> event, std::size_t max_iter,
               double tol) {
  if (xt.rank() != 2) throw ShapeError("cox_fit: covariates must be [n x p]");
  const std::size_t n = xt.dim(0), p = xt.dim(1);
  require_same(n, time.size(), "cox_fit");
  require_same(n, event.size(), "cox_fit");
  if (std::none_of(event.begin(), event.end(), [](int v) { return v != 0; }))
    throw FitError("cox_fit: no events");
  Eigen::MatrixXd x(n, p);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < p; ++c) x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = xt.at(r, c);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return time[a] > time[b]; });

  std::ostringstream trace;
  Eigen::VectorXd beta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p));
  CoxEval cur = cox_eval(x, time, event, order, beta);
  auto factor = [&](const Eigen::MatrixXd& info, std::size_t it) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
    const Eigen::VectorXd d = ldlt.vectorD();
    const double scale = std::max(1.0, info.diagonal().cwiseAbs().maxCoeff());
    if (ldlt.info() != Eigen::Success || d.minCoeff() <= 1e-10 * scale) {
      trace << "iter " << it << ": singular information (min pivot " << d.minCoeff() << ")\n";
      throw FitError("cox_fit: singular information matrix\n" + trace.str());
    }
    return ldlt;
  };
  CoxFit fit;
  bool converged = false;
  for (std::size_t it = 1; it <= max_iter; ++it) {
    const auto ldlt = factor(cur.info, it);
    Eigen::VectorXd step = ldlt.solve(cur.grad);
    double frac = 1.0;
    Eigen::VectorXd next = beta + step;
    CoxEval ev = cox_eval(x, time, event, order, next);
    // step halving keeps the likelihood from going down
    for (int h = 0; h < 30 && !(ev.loglik >= cur.loglik - 1e-12); ++h) {
      frac *= 0.5;
      next = beta + frac * step;
      ev = cox_eval(x, time, event, order, next);
    }
    const double change = (next - beta).cwiseAbs().maxCoeff();
    trace << "iter " << it << ": loglik " << ev.loglik << " max|dbeta| " << change << "\n";
    beta = next;
    cur = std::move(ev);
    fit.iterations = it;
    if (change < tol) {
      converged = true;
      break;
    }
  }
  if (!converged) throw FitError("cox_fit: no convergence\n" + trace.str());
  const auto ldlt = factor(cur.info, fit.iterations);
  const Eigen::MatrixXd cov = ldlt.solve(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(p)));
  for (std::size_t c = 0; c < p; ++c) {
    const auto k = static_cast<Eigen::Index>(c);
    fit.beta.push_back(beta(k));
    fit.hazard_ratio.push_back(std::exp(beta(k)));
    fit.se.push_back(std::sqrt(cov(k, k)));
  }
  fit.log_likelihood = cur.loglik;
  return fit;
}

const char* to_string(RiskGroup g) {
  switch (g) {
    case RiskGroup::kLow: return "low";
    case RiskGroup::kBaseline: return "baseline";
    case RiskGroup::kHigh: return "high";
  }
  return "?";
}

double quantile(std::span<const double> values, double q) {
  if (values.empty()) throw MetricError("quantile: empty input");
  if (!(q >= 0.0 && q <= 1.0)) throw DomainError("quantile: q must be in [0, 1]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double h = static_cast<double>(v.size() - 1) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

std::vector<RiskGroup> risk_groups(std::span<const double> phi, double q_low, double q_high) {
  if (phi.size() < 4) throw MetricError("risk_groups: need at least 4 subjects");
  const double lo = quantile(phi, q_low), hi = quantile(phi, q_high);
  std::vector<RiskGroup> out;
  out.reserve(phi.size());
  for (double v : phi) out.push_back(v <= lo ? RiskGroup::kLow : (v >= hi ? RiskGroup::kHigh : RiskGroup::kBaseline));
  return out;
}

WelchResult welch_t(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw MetricError("welch_t: each sample needs at least 2 values");
  auto moments = [](std::span<const double> x) {
    const double n = static_cast<double>(x.size());
    const double m = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::make_pair(m, ss / (n - 1.0));
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double qa = va / na, qb = vb / nb;
  WelchResult r;
  if (qa + qb == 0.0) {
    r.df = na + nb - 2.0;
    r.t = ma == mb ? 0.0 : std::copysign(INFINITY, ma - mb);
    r.p = ma == mb ? 1.0 : 0.0;
    return r;
  }
  r.t = (ma - mb) / std::sqrt(qa + qb);
  r.df = (qa + qb) * (qa + qb) / (qa * qa / (na - 1.0) + qb * qb / (nb - 1.0));
  const boost::math::students_t dist(r.df);
  r.p = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t))));
  return r;
}

double TaskScore::mean() const {
  if (values.empty()) throw MetricError("TaskScore: no values");
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double TaskScore::sd() const {
  if (values.size() < 2) return 0.0;
  const double m = mean();
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size() - 1));
}

double bench_score(std::span<const double> task_metrics) {
  if (task_metrics.empty()) throw ScoringError("bench_score: no tasks");
  return std::accumulate(task_metrics.begin(), task_metrics.end(), 0.0) / static_cast<double>(task_metrics.size());
}

RankTable rank_table(const std::map<std::string, std::map<std::string, std::vector<double>>>& scores) {
  RankTable t;
  if (scores.empty()) throw ScoringError("rank_table: no models");
  for (const auto& [model, tasks] : scores) {
    t.models.push_back(model);
    for (const auto& [task, v] : tasks)
      if (std::find(t.tasks.begin(), t.tasks.end(), task) == t.tasks.end()) t.tasks.push_back(task);
  }
  std::sort(t.tasks.begin(), t.tasks.end());
  const std::size_t nm = t.models.size(), nt = t.tasks.size();
  std::vector<std::vector<TaskScore>> cell(nm, std::vector<TaskScore>(nt));
  for (std::size_t i = 0; i < nm; ++i) {
    const auto& tasks = scores.at(t.models[i]);
    for (std::size_t k = 0; k < nt; ++k) {
      const auto it = tasks.find(t.tasks[k]);
      if (it == tasks.end() || it->second.empty())
        throw ScoringError("rank_table: model " + t.models[i] + " has no result for task " + t.tasks[k]);
      cell[i][k] = {t.tasks[k], "", it->second};
    }
  }
  t.ranks.assign(nm, std::vector<double>(nt));
  t.p_values.assign(nt, std::vector<std::vector<double>>(nm, std::vector<double>(nm, 1.0)));
  for (std::size_t k = 0; k < nt; ++k) {
    for (std::size_t i = 0; i < nm; ++i) {
      const double mi = cell[i][k].mean();
      double better = 0.0, tied = 0.0;
      for (std::size_t j = 0; j < nm; ++j) {
        const double mj = cell[j][k].mean();
        if (mj > mi) better += 1.0;
        else if (j != i && mj == mi) tied += 1.0;
      }
      t.ranks[i][k] = 1.0 + better + 0.5 * tied;
      for (std::size_t j = 0; j < nm; ++j) {
        if (i == j) continue;
        const auto& a = cell[i][k].values;
        const auto& b = cell[j][k].values;
        t.p_values[k][i][j] = a.size() >= 2 && b.size() >= 2 ? welch_t(a, b).p : std::nan("");
      }
    }
  }
  for (std::size_t i = 0; i < nm; ++i) {
    std::vector<double> means;
    for (std::size_t k = 0; k < nt; ++k) means.push_back(cell[i][k].mean());
    t.score.push_back(bench_score(means));
    t.mean_rank.push_back(std::accumulate(t.ranks[i].begin(), t.ranks[i].end(), 0.0) / static_cast<double>(nt));
  }
  return t;
}

}  // namespace xecg
