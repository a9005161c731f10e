#pragma once

#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xecg/tensor.hpp"

namespace xecg {

/// A metric is undefined for the given input (single class, no comparable pairs, ...).
struct MetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Cox fit failed: singular information or no convergence. what() carries the iteration trace.
struct FitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Bench scoring input is incomplete.
struct ScoringError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Mann-Whitney AUROC with ties counted 1/2. labels are 0/1.
double auroc(std::span<const double> scores, std::span<const int> labels);
/// Unweighted mean over classes that have both labels. scores/labels are row-major [n x classes].
double macro_auroc(std::span<const double> scores, std::span<const int> labels, std::size_t n_classes);
/// Average precision (step-wise area under the precision-recall curve).
double average_precision(std::span<const double> scores, std::span<const int> labels);
double macro_average_precision(std::span<const double> scores, std::span<const int> labels, std::size_t n_classes);

struct ConfusionMetrics {
  double accuracy = 0.0;
  double f1 = 0.0;
  double sensitivity = 0.0;
  double ppv = 0.0;
  double specificity = 0.0;
};
/// Two classes: metrics of the positive class 1. More: macro over one-vs-rest,
/// skipping classes absent from both predictions and labels. Empty ratios count 0.
ConfusionMetrics confusion_suite(std::span<const int> pred, std::span<const int> label, std::size_t n_classes);

/// mean |x - y| / (|x| + |y|), a 0/0 term counts 0.
double smape(std::span<const double> pred, std::span<const double> truth);

/// Harrell's C: pairs with t_i < t_j and event_i; concordant when risk_i > risk_j, ties 1/2.
double concordance_index(std::span<const double> risk, std::span<const double> time, std::span<const int> event);

struct PeakMatch {
  std::size_t tp = 0, fp = 0, fn = 0;
  double f1 = 0.0;
};
/// One-to-one matching of sorted peak indices; a pair matches when |dt| <= tol_total_ms / 2.
/// Greedy by increasing |dt| unless `optimal`, which maximises the number of matches.
/// With no peaks on either side F1 is 1.
PeakMatch rpeak_f1(std::span<const std::size_t> pred, std::span<const std::size_t> truth, double fs,
                   double tol_total_ms = 20.0, bool optimal = false);

struct KmPoint {
  double time = 0.0;
  double survival = 1.0;
  std::size_t at_risk = 0;
  std::size_t events = 0;
};
/// Product-limit estimate at each distinct event time.
std::vector<KmPoint> kaplan_meier(std::span<const double> time, std::span<const int> event);
/// S(t) from a curve (1 before the first event time).
double km_survival_at(std::span<const KmPoint> curve, double t);

struct CoxFit {
  std::vector<double> beta;
  std::vector<double> hazard_ratio;
  std::vector<double> se;
  double log_likelihood = 0.0;
  std::size_t iterations = 0;
};
/// Newton-Raphson on the Breslow partial likelihood. X is [n x p].
CoxFit cox_fit(const Tensor& x, std::span<const double> time, std::span<const int> event, std::size_t max_iter = 50,
               double tol = 1e-8);

enum class RiskGroup { kLow, kBaseline, kHigh };
const char* to_string(RiskGroup g);
/// Quantile by linear interpolation of order statistics (R type 7).
double quantile(std::span<const double> values, double q);
/// phi <= Q(q_low) -> low, else phi >= Q(q_high) -> high, else baseline.
std::vector<RiskGroup> risk_groups(std::span<const double> phi, double q_low = 0.25, double q_high = 0.75);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
};
WelchResult welch_t(std::span<const double> a, std::span<const double> b);

struct TaskScore {
  std::string task;
  std::string metric;
  std::vector<double> values;
  double mean() const;
  double sd() const;  // sample sd, 0 for one value
};

/// Unweighted mean of per-task normalised metrics.
double bench_score(std::span<const double> task_metrics);

struct RankTable {
  std::vector<std::string> models;
  std::vector<std::string> tasks;
  std::vector<std::vector<double>> ranks;  // [model][task], 1 = best, ties share the mean rank
  std::vector<double> mean_rank;
  std::vector<double> score;
  /// p[task][i][j]: Welch p-value between models i and j on that task (1 on the diagonal).
  std::vector<std::vector<std::vector<double>>> p_values;
};
/// scores[model][task] holds per-seed values. Throws ScoringError if a model lacks a task.
RankTable rank_table(const std::map<std::string, std::map<std::string, std::vector<double>>>& scores);

}  // namespace xecg
