#pragma once

#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xecg/encoder.hpp"
#include "xecg/metrics.hpp"

namespace xecg {

enum class HeadKind { kMultilabel, kMulticlass, kRegression, kSegmentation, kDetection, kCox };
const char* to_string(HeadKind k);
HeadKind head_kind_from_string(const std::string& s);
/// Kinds whose head reads every patch representation instead of a pooled vector.
bool is_patch_level(HeadKind k);

/// Linear head. Parameters "head.W" [E x out] and "head.b" [out].
struct TaskHead {
  HeadKind kind = HeadKind::kMultilabel;
  std::size_t out_dim = 1;
  ParamSet params;
};
/// W ~ N(0, 0.01^2), b = 0. Detection heads must use out_dim = patch size,
/// segmentation, regression and cox heads out_dim = 1.
TaskHead init_head(HeadKind kind, std::size_t embed_dim, std::size_t out_dim, Rng& rng);

struct WindowPolicy {
  double window_len_s = 0.0;  // 0: the whole record
  double overlap_s = 0.0;
  bool minute_average = false;
  void validate() const;
};

enum class AdaptMode { kLinearProbe, kFinetune };
const char* to_string(AdaptMode m);

struct AdaptPlan {
  AdaptMode mode = AdaptMode::kLinearProbe;
  double lr_head = 1e-3;
  double lr_encoder = 1e-4;
  double layerwise_decay = 0.75;
  double weight_decay = 0.1;
  double drop_path = 0.0;  // accepted for config compatibility, not used
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  std::size_t warmup_epochs = 1;
  PoolMode pool = PoolMode::kAvg;
  WindowPolicy window;
  bool cox_strict = false;
  void validate() const;
};

/// Keys: learning_rate_head, learning_rate_encoder, layerwise_lr_decay, drop_path,
/// batch_size, window_len, patch_representation, weight_decay, epochs; optional
/// mode ("linear_probe" | "finetune"), overlap, warmup_epochs, minute_average, cox_strict.
AdaptPlan adapt_plan_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AdaptPlan& p);

/// One labelled record. y: multilabel 0/1 per class, multiclass {class},
/// regression {value}, segmentation one 0/1 per minute. peaks for detection,
/// time/event for cox.
struct TaskSample {
  EcgRecord record;
  std::vector<double> y;
  std::vector<std::size_t> peaks;
  double time = 0.0;
  int event = 0;
};

// ---- heads ---------------------------------------------------------------------------

/// Affine map of pooled rows [B x E] -> [B x out].
Tensor classify(const Tensor& pooled, const TaskHead& head);
Var classify(Var pooled, const BoundParams& head);

/// Per-sample logit trace [N * P] from patch representations [N x E].
Tensor detection_logits(const Tensor& reps, const TaskHead& head);
/// Local maxima of sigmoid(logits) above `threshold`, then non-maximum
/// suppression: accepted peaks are at least refractory_ms apart.
std::vector<std::size_t> extract_peaks(std::span<const double> logits, double fs, double threshold = 0.5,
                                       double refractory_ms = 200.0);
/// Binary trace of `length` with 1 within `radius` samples of each peak.
std::vector<double> rpeak_targets(std::size_t length, std::span<const std::size_t> peaks, std::size_t radius = 1);

/// Mean of patch probabilities over each whole minute; a partial trailing minute is dropped.
std::vector<double> minute_average(std::span<const double> patch_probs, std::size_t patches_per_minute);
/// Per-minute probabilities from patch representations [N x E].
std::vector<double> segment_minutes(const Tensor& reps, const TaskHead& head, std::size_t patch_size, double fs);
std::size_t patches_per_minute(std::size_t patch_size, double fs);

/// Negative log partial likelihood, sum over events of
/// -(phi_i - log sum_{j in R(t_i)} exp(phi_j)), R(t_i) = {j : t_j >= t_i}.
/// strict uses t_j > t_i and skips events with an empty risk set.
Var cox_loss(Var phi, std::span<const double> time, std::span<const int> event, bool strict = false);
double cox_loss(const Tensor& phi, std::span<const double> time, std::span<const int> event, bool strict = false);

// ---- adaptation ----------------------------------------------------------------------

enum class MetricId { kAuroc, kMacroF1, kOneMinusSmape, kRpeakF1, kCIndex };
const char* to_string(MetricId m);
MetricId metric_from_string(const std::string& s);
MetricId default_metric(HeadKind k);

struct Predictions {
  std::vector<std::vector<double>> scores;          // per sample: logits / value / risk
  std::vector<std::vector<std::size_t>> peaks;      // detection
  std::vector<std::vector<double>> minute_probs;    // segmentation
};

/// Inference over whole records with the plan's window policy; overlapping
/// windows are averaged in logit space (pooled kinds) or probability space (traces).
Predictions predict(const EncoderConfig& cfg, const ParamSet& encoder, const TaskHead& head,
                    std::span<const TaskSample> samples, const AdaptPlan& plan);

/// Higher is better for every metric (SMAPE is reported as 1 - SMAPE).
double compute_metric(MetricId metric, HeadKind kind, const Predictions& pred, std::span<const TaskSample> samples,
                      double tol_total_ms = 20.0);

struct AdaptResult {
  ParamSet encoder;
  TaskHead head;
  double best_val = 0.0;
  std::size_t best_epoch = 0;
  std::vector<double> val_history;
  std::vector<double> train_loss;
  double target_mean = 0.0;  // regression targets are standardised during training
  double target_sd = 1.0;
};

/// Trains the head (and in finetune mode the encoder) with AdamW, one warmup
/// epoch then cosine decay to zero, and keeps the epoch with the best
/// validation metric. A linear probe never touches the encoder parameters.
AdaptResult adapt(const EncoderConfig& cfg, const ParamSet& encoder, TaskHead head, std::span<const TaskSample> train,
                  std::span<const TaskSample> val, const AdaptPlan& plan, MetricId metric, std::uint64_t seed);

/// Predictions of an adapted model, with regression outputs mapped back to target units.
Predictions predict(const EncoderConfig& cfg, const AdaptResult& model, std::span<const TaskSample> samples,
                    const AdaptPlan& plan);

}  // namespace xecg
