#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "xecg/rng.hpp"
#include "xecg/signal.hpp"

namespace xecg {

struct AugmentConfig {
  double p_drop = 0.2;
  std::size_t protected_lead = kLeadII;
  double cutoff_hz = 0.5;
  double jitter_a = 0.6;
  double jitter_sigma = 1.0;
  double p_jitter = 0.1;
  double scale_r = 0.2;
  double p_scale = 0.1;
  bool swap_baseline = true;
  std::size_t n_global = 2;
  std::size_t n_local = 4;
  double global_frac = 0.8;
  double local_frac = 0.4;

  /// Throws std::invalid_argument naming the offending key. `model_rate_hz` bounds the cutoff.
  void validate(double model_rate_hz = 100.0) const;
};

nlohmann::json to_json(const AugmentConfig& c);
AugmentConfig augment_config_from_json(const nlohmann::json& j);

/// Second-order Butterworth low-pass (bilinear transform, pre-warped), as biquad coefficients.
struct Biquad {
  double b0, b1, b2, a1, a2;
};
Biquad butterworth_lowpass(double cutoff_hz, double fs);

/// Zero-phase low-pass of one channel: forward then backward pass with
/// mirror padding and steady-state initial conditions.
std::vector<double> lowpass_butterworth(std::span<const double> signal, double cutoff_hz, double fs);

/// Zeroes each lead except the protected one with probability p_drop. The
/// lead mask is left unchanged.
EcgRecord lead_dropout(const EcgRecord& record, const AugmentConfig& cfg, Rng& rng);

/// Swaps low-frequency baselines across the batch with a uniform permutation.
std::vector<EcgRecord> baseline_swap(std::span<const EcgRecord> batch, const AugmentConfig& cfg, Rng& rng);
/// Same, with an explicit permutation: output i receives the baseline of record perm[i].
std::vector<EcgRecord> baseline_swap(std::span<const EcgRecord> batch, const AugmentConfig& cfg,
                                     std::span<const std::size_t> perm);

/// s'(t) = s(t) * (1 + A * n(t)), n ~ N(0, sigma^2), applied with probability p_jitter.
EcgRecord jitter(const EcgRecord& record, const AugmentConfig& cfg, Rng& rng);
/// Whole-record scaling by alpha ~ U(1 - R/2, 1 + R/2), applied with probability p_scale.
EcgRecord amp_scale(const EcgRecord& record, const AugmentConfig& cfg, Rng& rng);

struct CropWindow {
  std::size_t source = 0;  // index into the patient's record list
  std::size_t start = 0;
  std::size_t length = 0;
};

struct ViewSet {
  std::string patient_id;
  std::vector<CropWindow> globals;
  std::vector<CropWindow> locals;
};

/// Draws global and local crop windows for one patient. Each window picks a
/// source record uniformly, then a uniform start; lengths are the configured
/// fraction of that record, rounded down to whole patches.
ViewSet make_views(std::span<const EcgRecord> patient_records, std::size_t patch_size, const AugmentConfig& cfg,
                   Rng& rng);

/// Crops a window and applies the per-view augmentations (lead dropout, jitter, scaling).
EcgRecord render_view(std::span<const EcgRecord> patient_records, const CropWindow& w, const AugmentConfig& cfg,
                      Rng& rng);

}  // namespace xecg
