#pragma once

#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xecg/augment.hpp"
#include "xecg/encoder.hpp"
#include "xecg/optim.hpp"

namespace xecg {

struct SslSchedules {
  double lambda_base = 0.99;
  double lr = 1e-4;  // peak, reached after warmup
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 100;
  double wd_start = 0.04;
  double wd_end = 0.4;
  double clip_norm = 3.0;
  double layer_decay = 0.9;
  double p_mask = 0.3;
  double eps = 0.5;  // coding-rate precision
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Multiplies the total loss before backward only. Reported losses are unscaled.
  double loss_scale = 1.0;

  /// Throws ConfigError.
  void validate() const;
};

nlohmann::json to_json(const SslSchedules& s);
SslSchedules ssl_schedules_from_json(const nlohmann::json& j);

struct LossBreakdown {
  double l_patch = 0.0;
  double l_view = 0.0;
  double l_cr = 0.0;
  double total = 0.0;
  std::string str() const;
};

struct TeacherStudentState {
  EncoderConfig cfg;
  ParamSet student;
  ParamSet teacher;  // same layout as student, never differentiated
  ParamSet token;    // "mask_token" [E]
  AdamW opt_student;
  AdamW opt_token;
  std::size_t step = 0;
};

/// Student from init_encoder, teacher an exact copy, mask token N(0, 0.02).
TeacherStudentState init_ssl_state(const EncoderConfig& cfg, const SslSchedules& s, Rng& rng);

/// lambda_base + (t/N)(1 - lambda_base). Throws ConfigError for N = 0 or t > N.
double momentum_schedule(std::size_t t, std::size_t total, double lambda_base);
/// teacher <- lambda * teacher + (1 - lambda) * student, elementwise.
void ema_update(ParamSet& teacher, const ParamSet& student, double lambda);

struct MaskedSeq {
  Var seq;
  std::vector<std::size_t> index;  // masked rows, ascending
};
/// Replaces each row independently with probability p by the token [E].
MaskedSeq mask_patches(Var seq, double p, Var token, Rng& rng);

/// Mean over rows in `masked` of ||normalize(s_i) - normalize(t_i)||^2. Empty mask gives 0.
Var loss_patch(Var student, Var teacher, std::span<const std::size_t> masked);
/// Sum over teacher rows i and student rows j != i of ||normalize(t_i) - normalize(s_j)||^2.
Var loss_view(Var teacher, Var student);
/// Sum_ij W_ij ||t_i - s_j||^2 for rows that are already unit length.
Var weighted_pair_distance(Var teacher_unit, Var student_unit, const Tensor& weights);
/// 0.5 logdet(I + (E/eps) Cov(Z)), population covariance. Needs B >= 2.
Var coding_rate(Var z, double eps);
/// eps * sqrt(B / (E min(E, B)))
double coding_rate_gamma(double eps, std::size_t batch, std::size_t dim);
/// -gamma * coding_rate(Z).
Var loss_cr(Var z, double eps);

double loss_patch(const Tensor& student, const Tensor& teacher, std::span<const std::size_t> masked);
double loss_view(const Tensor& teacher, const Tensor& student);
double coding_rate(const Tensor& z, double eps);
/// 0.5 logdet(I + (E/eps) gamma) for a given covariance.
double coding_rate_of_cov(const Tensor& gamma, double eps);
double loss_cr(const Tensor& z, double eps);

/// Rendered views per patient: views[b] holds n_global globals followed by locals.
struct ViewBatch {
  std::vector<std::vector<EcgRecord>> views;
  std::size_t n_global = 2;
};

/// Draws crop windows per patient, renders them at the model layout and swaps
/// baselines across the batch within each view slot.
ViewBatch render_batch(std::span<const std::vector<EcgRecord>> patients, std::size_t patch_size,
                       const AugmentConfig& aug, Rng& rng);

struct StepReport {
  LossBreakdown loss;
  double lr = 0.0;
  double wd = 0.0;
  double lambda = 0.0;
  ClipResult clip;
  std::size_t n_masked = 0;
  std::vector<double> grad_norms;  // per student parameter, before clipping
};

/// One optimisation step. Throws NumericError on a non-finite loss.
StepReport pretrain_step(TeacherStudentState& state, const SslSchedules& s, const ViewBatch& batch, Rng& rng);

class LossLog {
 public:
  explicit LossLog(const std::filesystem::path& path);
  void append(std::size_t step, const StepReport& r);

 private:
  std::ofstream out_;
};

struct PretrainConfig {
  EncoderConfig encoder;
  AugmentConfig augment;
  SslSchedules schedules;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  std::string corpus;
  std::size_t checkpoint_every = 0;  // 0: only the final checkpoint
};

nlohmann::json to_json(const PretrainConfig& c);
PretrainConfig pretrain_config_from_json(const nlohmann::json& j);

struct PretrainResult {
  TeacherStudentState state;
  std::vector<StepReport> steps;
};

/// Runs schedules.total_steps steps. Batches are drawn without replacement
/// from a reshuffled patient order. When out_dir is non-empty a loss CSV and
/// checkpoints (student.xckp, teacher.xckp) are written there.
PretrainResult pretrain(const PretrainConfig& cfg, std::span<const std::vector<EcgRecord>> patients,
                        const std::filesystem::path& out_dir = {});

/// Groups records by patient_id, preserving first-seen order.
std::vector<std::vector<EcgRecord>> group_by_patient(std::span<const EcgRecord> records);

}  // namespace xecg
