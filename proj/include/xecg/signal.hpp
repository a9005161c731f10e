#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "xecg/rng.hpp"
#include "xecg/tensor.hpp"

namespace xecg {

inline constexpr std::size_t kLeadSlots = 12;
inline constexpr std::size_t kLeadII = 1;
/// Slot names of the fixed 12-lead layout.
inline constexpr std::array<const char*, kLeadSlots> kLeadNames = {"I",  "II", "III", "aVR", "aVL", "aVF",
                                                                   "V1", "V2", "V3",  "V4",  "V5",  "V6"};

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LengthError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct LayoutError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct SignalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using LeadMask = std::array<bool, kLeadSlots>;

/// Multi-lead sampled signal. Row i of `samples` is the i-th present slot of
/// `lead_present`; after pad_leads() there are 12 rows, one per slot.
struct EcgRecord {
  Tensor samples{{1, 1}};  // [n_leads x L], millivolts
  double fs = 100.0;
  std::string patient_id;
  std::string record_id;
  LeadMask lead_present{};
  nlohmann::json labels;  // optional annotation block, null when absent

  std::size_t n_leads() const { return samples.dim(0); }
  std::size_t length() const { return samples.dim(1); }
  double duration_s() const { return static_cast<double>(length()) / fs; }
  /// Throws SignalError when the record breaks its invariants.
  void validate() const;
};

/// Record built from an explicit lead list (slot indices) and row data.
EcgRecord make_record(Tensor samples, double fs, std::string patient_id, std::string record_id,
                      const std::vector<std::size_t>& slots);
/// Single-channel signal (ECG lead or PPG) placed in the lead-II slot.
EcgRecord single_lead_record(std::vector<double> signal, double fs, std::string patient_id, std::string record_id);

// ---- canonical file format ----------------------------------------------------------

void write_record(const std::filesystem::path& path, const EcgRecord& record);
EcgRecord read_record(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_record(const EcgRecord& record);
EcgRecord decode_record(const std::vector<std::uint8_t>& bytes);

/// Sidecar labels: one JSON object keyed by record_id.
void write_labels(const std::filesystem::path& path, const std::map<std::string, nlohmann::json>& labels);
std::map<std::string, nlohmann::json> read_labels(const std::filesystem::path& path);

// ---- preprocessing -----------------------------------------------------------------

/// Linear-interpolation resampling to `target_hz`; length becomes round(L * target / fs).
EcgRecord resample(const EcgRecord& record, double target_hz);

enum class QualityReason { kNone, kHasNan, kAllZero, kNoisy };
struct QualityVerdict {
  bool keep = true;
  QualityReason reason = QualityReason::kNone;
};
const char* to_string(QualityReason r);

struct QualityThresholds {
  double max_variance = 10.0;     // mV^2
  double max_amplitude_mv = 15.0;
};
/// Exclusion rules in priority order: NaN, all-zero, then (variance AND amplitude) on any present lead.
QualityVerdict quality_filter(const EcgRecord& record, const QualityThresholds& th = {});

struct PatchPlan {
  std::size_t patch_size = 25;
  double model_rate_hz = 100.0;
  std::size_t n_patches = 0;
  std::size_t truncated = 0;
};
PatchPlan plan_patches(std::size_t length, std::size_t patch_size, double model_rate_hz = 100.0);

/// Non-overlapping [C x P] patches in temporal order; the tail shorter than P is dropped.
std::vector<Tensor> patchify(const EcgRecord& record, std::size_t patch_size);
/// Same patches flattened lead-major into rows of a [N x C*P] matrix.
Tensor patch_matrix(const EcgRecord& record, std::size_t patch_size);
/// Patch matrix for samples [start, start + n_patches * P).
Tensor patch_matrix(const EcgRecord& record, std::size_t patch_size, std::size_t start, std::size_t n_patches);

/// Expands to the 12-slot layout, zero-filling absent leads.
EcgRecord pad_leads(const EcgRecord& record);

/// Copy of samples [start, start + length).
EcgRecord crop(const EcgRecord& record, std::size_t start, std::size_t length);

// ---- synthetic generator -----------------------------------------------------------

enum class Rhythm { kRegular = 0, kIrregular = 1, kBigeminy = 2 };
inline constexpr std::size_t kRhythmClasses = 3;
const char* to_string(Rhythm r);

struct SurvivalParams {
  double base_hazard = 0.1;   // events per year at the reference morphology
  double log_hr_per_unit = 1.5;  // log hazard ratio per unit of the risk feature
  double followup_years = 10.0;  // administrative censoring horizon
};

struct SynthSpec {
  double duration_s = 10.0;
  double rr_interval_s = 1.0;
  Rhythm rhythm = Rhythm::kRegular;
  double age_years = 50.0;
  /// Per-minute apnea flags; minutes beyond the vector are non-apnea.
  std::vector<bool> apnea_minutes;
  SurvivalParams survival;
  double fs = 100.0;
  double noise_std_mv = 0.02;
  double baseline_mv = 0.05;       // 0.2 Hz wander amplitude in normal minutes
  double apnea_baseline_mv = 0.6;  // wander amplitude in apnea minutes
  bool twelve_lead = true;         // false: lead II only
};

struct SynthGroundTruth {
  std::vector<std::size_t> r_peaks;
  Rhythm rhythm = Rhythm::kRegular;
  std::vector<bool> apnea_mask;
  double age_years = 0.0;
  double event_time_years = 1.0;
  bool event = false;
  /// Morphology feature driving the hazard (QRS amplitude deviation).
  double risk_feature = 0.0;
};

struct SynthOutput {
  EcgRecord record;
  SynthGroundTruth truth;
  Tensor clean;  // noise-free, wander-free trace of the same shape as record.samples
};

SynthOutput synth_ecg(const SynthSpec& spec, std::uint64_t seed, std::string patient_id = "P0",
                      std::string record_id = "R0");

nlohmann::json to_json(const SynthGroundTruth& t);
SynthGroundTruth truth_from_json(const nlohmann::json& j);

}  // namespace xecg
