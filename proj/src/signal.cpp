#include "xecg/signal.hpp"

#include <spdlog/spdlog.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace xecg {

void EcgRecord::validate() const {
  if (samples.rank() != 2) throw SignalError("record samples must be [n_leads x L]");
  if (length() < 1) throw SignalError("record must contain at least one sample");
  if (!(fs > 0.0)) throw SignalError("sampling rate must be positive");
  const auto present = static_cast<std::size_t>(std::count(lead_present.begin(), lead_present.end(), true));
  if (present == 0) throw SignalError("record has no present lead");
  if (n_leads() != present && n_leads() != kLeadSlots)
    throw SignalError("record has " + std::to_string(n_leads()) + " rows but " + std::to_string(present) +
                      " present leads");
}

EcgRecord make_record(Tensor samples, double fs, std::string patient_id, std::string record_id,
                      const std::vector<std::size_t>& slots) {
  if (samples.rank() != 2 || samples.dim(0) != slots.size())
    throw LayoutError("make_record: one sample row per declared slot required");
  EcgRecord r;
  r.samples = std::move(samples);
  r.fs = fs;
  r.patient_id = std::move(patient_id);
  r.record_id = std::move(record_id);
  std::size_t last = 0;
  for (std::size_t k = 0; k < slots.size(); ++k) {
    if (slots[k] >= kLeadSlots) throw LayoutError("lead slot " + std::to_string(slots[k]) + " out of range");
    if (k > 0 && slots[k] <= last) throw LayoutError("lead slots must be strictly increasing");
    last = slots[k];
    r.lead_present[slots[k]] = true;
  }
  r.validate();
  return r;
}

EcgRecord single_lead_record(std::vector<double> signal, double fs, std::string patient_id, std::string record_id) {
  const std::size_t n = signal.size();
  return make_record(Tensor({1, n}, std::span<const double>(signal)), fs, std::move(patient_id),
                     std::move(record_id), {kLeadII});
}

// ---- codec ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'X', 'E', 'C', 'G'};
constexpr std::uint16_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "codec assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
    bytes.insert(bytes.end(), p, p + sizeof(T));
  }
  void put_str(const std::string& s) {
    if (s.size() > 255) throw FormatError("identifier longer than 255 bytes: " + s.substr(0, 32) + "...");
    put<std::uint8_t>(static_cast<std::uint8_t>(s.size()));
    bytes.insert(bytes.end(), s.begin(), s.end());
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_str() {
    const auto n = get<std::uint8_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw LengthError("record payload truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                        " more)");
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_record(const EcgRecord& record) {
  record.validate();
  Writer w;
  for (char c : kMagic) w.put<char>(c);
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint16_t>(static_cast<std::uint16_t>(record.n_leads()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(record.length()));
  w.put<float>(static_cast<float>(record.fs));
  std::uint16_t mask = 0;
  for (std::size_t i = 0; i < kLeadSlots; ++i)
    if (record.lead_present[i]) mask |= static_cast<std::uint16_t>(1u << i);
  w.put<std::uint16_t>(mask);
  w.put_str(record.patient_id);
  w.put_str(record.record_id);
  w.bytes.reserve(w.bytes.size() + record.samples.size() * sizeof(float));
  for (double v : record.samples.values()) w.put<float>(static_cast<float>(v));
  return std::move(w.bytes);
}

EcgRecord decode_record(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  char magic[4];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad magic: not an XECG record");
  const auto version = r.get<std::uint16_t>();
  if (version != kVersion) throw FormatError("unsupported record version " + std::to_string(version));
  const auto n_leads = r.get<std::uint16_t>();
  const auto n_samples = r.get<std::uint32_t>();
  const auto fs = r.get<float>();
  const auto mask = r.get<std::uint16_t>();
  EcgRecord rec;
  rec.patient_id = r.get_str();
  rec.record_id = r.get_str();
  if (n_leads == 0 || n_samples == 0) throw FormatError("record header declares an empty signal");
  if (mask >> kLeadSlots) throw FormatError("lead mask sets bits beyond the 12-slot layout");
  for (std::size_t i = 0; i < kLeadSlots; ++i) rec.lead_present[i] = (mask >> i) & 1u;
  rec.fs = fs;
  const std::size_t count = static_cast<std::size_t>(n_leads) * n_samples;
  r.need(count * sizeof(float));
  Tensor samples({n_leads, n_samples});
  for (std::size_t i = 0; i < count; ++i) samples[i] = r.get<float>();
  rec.samples = std::move(samples);
  rec.validate();
  return rec;
}

void write_record(const std::filesystem::path& path, const EcgRecord& record) {
  const auto bytes = encode_record(record);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

EcgRecord read_record(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_record(bytes);
}

void write_labels(const std::filesystem::path& path, const std::map<std::string, nlohmann::json>& labels) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [id, j] : labels) doc[id] = j;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << doc.dump(1) << '\n';
}

std::map<std::string, nlohmann::json> read_labels(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto doc = nlohmann::json::parse(in);
  std::map<std::string, nlohmann::json> out;
  for (auto it = doc.begin(); it != doc.end(); ++it) out[it.key()] = it.value();
  return out;
}

// ---- preprocessing -------------------------------------------------------------------

EcgRecord resample(const EcgRecord& record, double target_hz) {
  if (!(record.fs > 0.0) || !(target_hz > 0.0)) throw SignalError("resample: rates must be positive");
  if (record.fs == target_hz) return record;
  const std::size_t len = record.length();
  if (len < 2) throw SignalError("resample: insufficient samples (need >= 2 to interpolate)");
  const auto out_len = static_cast<std::size_t>(std::llround(static_cast<double>(len) * target_hz / record.fs));
  if (out_len == 0) throw SignalError("resample: target rate yields an empty signal");
  const std::size_t leads = record.n_leads();
  const double step = record.fs / target_hz;
  Tensor out({leads, out_len});
  for (std::size_t j = 0; j < out_len; ++j) {
    const double pos = static_cast<double>(j) * step;
    auto i0 = static_cast<std::size_t>(std::floor(pos));
    double frac = pos - static_cast<double>(i0);
    if (i0 >= len - 1) {
      i0 = len - 1;
      frac = 0.0;
    }
    for (std::size_t c = 0; c < leads; ++c) {
      const double a = record.samples.at(c, i0);
      out.at(c, j) = frac == 0.0 ? a : a + frac * (record.samples.at(c, i0 + 1) - a);
    }
  }
  EcgRecord r = record;
  r.samples = std::move(out);
  r.fs = target_hz;
  return r;
}

const char* to_string(QualityReason r) {
  switch (r) {
    case QualityReason::kNone: return "keep";
    case QualityReason::kHasNan: return "has_nan";
    case QualityReason::kAllZero: return "all_zero";
    case QualityReason::kNoisy: return "noisy";
  }
  return "?";
}

QualityVerdict quality_filter(const EcgRecord& record, const QualityThresholds& th) {
  const auto& s = record.samples;
  for (double v : s.values())
    if (std::isnan(v)) return {false, QualityReason::kHasNan};
  if (std::all_of(s.values().begin(), s.values().end(), [](double v) { return v == 0.0; }))
    return {false, QualityReason::kAllZero};
  const bool padded = record.n_leads() == kLeadSlots;
  std::size_t row = 0;
  for (std::size_t slot = 0; slot < kLeadSlots; ++slot) {
    if (!record.lead_present[slot]) continue;
    const std::size_t r = padded ? slot : row++;
    if (r >= record.n_leads()) break;
    const std::size_t len = record.length();
    double mean = 0.0, peak = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      mean += s.at(r, i);
      peak = std::max(peak, std::abs(s.at(r, i)));
    }
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t i = 0; i < len; ++i) var += (s.at(r, i) - mean) * (s.at(r, i) - mean);
    var /= static_cast<double>(len);
    if (var > th.max_variance && peak > th.max_amplitude_mv) return {false, QualityReason::kNoisy};
  }
  return {true, QualityReason::kNone};
}

PatchPlan plan_patches(std::size_t length, std::size_t patch_size, double model_rate_hz) {
  if (patch_size == 0) throw SignalError("patch size must be positive");
  PatchPlan p;
  p.patch_size = patch_size;
  p.model_rate_hz = model_rate_hz;
  p.n_patches = length / patch_size;
  p.truncated = length - p.n_patches * patch_size;
  return p;
}

std::vector<Tensor> patchify(const EcgRecord& record, std::size_t patch_size) {
  const auto plan = plan_patches(record.length(), patch_size, record.fs);
  if (plan.n_patches == 0)
    throw SignalError("patchify: signal of " + std::to_string(record.length()) + " samples is shorter than one patch");
  const std::size_t leads = record.n_leads();
  std::vector<Tensor> out;
  out.reserve(plan.n_patches);
  for (std::size_t n = 0; n < plan.n_patches; ++n) {
    Tensor p({leads, patch_size});
    for (std::size_t c = 0; c < leads; ++c)
      for (std::size_t k = 0; k < patch_size; ++k) p.at(c, k) = record.samples.at(c, n * patch_size + k);
    out.push_back(std::move(p));
  }
  return out;
}

Tensor patch_matrix(const EcgRecord& record, std::size_t patch_size, std::size_t start, std::size_t n_patches) {
  if (n_patches == 0) throw SignalError("patch_matrix: empty patch sequence");
  if (start + n_patches * patch_size > record.length()) throw SignalError("patch_matrix: window exceeds record");
  const std::size_t leads = record.n_leads();
  Tensor out({n_patches, leads * patch_size});
  const std::size_t len = record.length();
  const double* src = record.samples.data();
  for (std::size_t n = 0; n < n_patches; ++n) {
    double* row = out.data() + n * leads * patch_size;
    for (std::size_t c = 0; c < leads; ++c)
      std::copy_n(src + c * len + start + n * patch_size, patch_size, row + c * patch_size);
  }
  return out;
}

Tensor patch_matrix(const EcgRecord& record, std::size_t patch_size) {
  const auto plan = plan_patches(record.length(), patch_size, record.fs);
  if (plan.n_patches == 0) throw SignalError("patch_matrix: signal shorter than one patch");
  return patch_matrix(record, patch_size, 0, plan.n_patches);
}

EcgRecord pad_leads(const EcgRecord& record) {
  if (record.n_leads() > kLeadSlots)
    throw LayoutError("pad_leads: " + std::to_string(record.n_leads()) + " leads exceed the 12-slot layout");
  const auto present = static_cast<std::size_t>(std::count(record.lead_present.begin(), record.lead_present.end(), true));
  if (record.n_leads() == kLeadSlots) return record;
  EcgRecord r = record;
  if (present == 0 && record.n_leads() == 1) r.lead_present[kLeadII] = true;
  else if (present != record.n_leads())
    throw LayoutError("pad_leads: " + std::to_string(record.n_leads()) + " rows but " + std::to_string(present) +
                      " declared lead positions");
  const std::size_t len = record.length();
  Tensor out({kLeadSlots, len});
  std::size_t row = 0;
  for (std::size_t slot = 0; slot < kLeadSlots; ++slot) {
    if (!r.lead_present[slot]) continue;
    std::copy_n(record.samples.data() + row * len, len, out.data() + slot * len);
    ++row;
  }
  r.samples = std::move(out);
  return r;
}

EcgRecord crop(const EcgRecord& record, std::size_t start, std::size_t length) {
  if (length == 0 || start + length > record.length())
    throw SignalError("crop [" + std::to_string(start) + ", +" + std::to_string(length) + ") exceeds record of " +
                      std::to_string(record.length()) + " samples");
  const std::size_t leads = record.n_leads(), len = record.length();
  Tensor out({leads, length});
  for (std::size_t c = 0; c < leads; ++c)
    std::copy_n(record.samples.data() + c * len + start, length, out.data() + c * length);
  EcgRecord r = record;
  r.samples = std::move(out);
  return r;
}

// ---- synthetic generator -------------------------------------------------------------

const char* to_string(Rhythm r) {
  switch (r) {
    case Rhythm::kRegular: return "regular";
    case Rhythm::kIrregular: return "irregular";
    case Rhythm::kBigeminy: return "bigeminy";
  }
  return "?";
}

namespace {

// Per-slot projection of the cardiac source onto each lead.
constexpr std::array<double, kLeadSlots> kLeadGain = {0.7, 1.0, 0.35, -0.85, 0.3, 0.65,
                                                      -0.45, 0.25, 0.55, 0.9, 0.8, 0.6};

double gauss(double t, double centre, double sigma) {
  const double z = (t - centre) / sigma;
  return std::exp(-0.5 * z * z);
}

}  // namespace

SynthOutput synth_ecg(const SynthSpec& spec, std::uint64_t seed, std::string patient_id, std::string record_id) {
  if (!(spec.duration_s > 0.0)) throw SignalError("synth: duration must be positive");
  if (!(spec.rr_interval_s >= 0.3 && spec.rr_interval_s <= 2.0)) throw SignalError("synth: rr interval outside [0.3, 2.0] s");
  if (!(spec.fs > 0.0)) throw SignalError("synth: sampling rate must be positive");
  if (spec.noise_std_mv < 0.0 || spec.age_years < 0.0) throw SignalError("synth: negative noise or age");
  Rng rng(seed);
  const double fs = spec.fs;
  const auto len = static_cast<std::size_t>(std::llround(spec.duration_s * fs));
  if (len < 1) throw SignalError("synth: duration shorter than one sample");

  // Morphology. QRS width grows with age; QRS amplitude is the hazard feature.
  const double qrs_amp = rng.uniform(0.7, 1.3);
  const double t_amp = rng.uniform(0.15, 0.35);
  const double qrs_sigma = 0.008 + 0.0002 * spec.age_years;
  const double risk_feature = (qrs_amp - 1.0) / 0.3;

  // Beat schedule in whole samples.
  const double rr = spec.rr_interval_s;
  const auto rr_n = static_cast<std::size_t>(std::llround(rr * fs));
  std::vector<std::size_t> peaks;
  std::vector<bool> ectopic;
  auto pos = static_cast<std::size_t>(std::llround(rng.uniform(0.2, 0.8) * rr * fs));
  for (std::size_t k = 0; pos < len; ++k) {
    peaks.push_back(pos);
    bool ect = false;
    std::size_t step = rr_n;
    switch (spec.rhythm) {
      case Rhythm::kRegular: break;
      case Rhythm::kIrregular: step = static_cast<std::size_t>(std::llround(rr * rng.uniform(0.6, 1.4) * fs)); break;
      case Rhythm::kBigeminy:
        ect = (k % 2) == 1;
        step = static_cast<std::size_t>(std::llround(rr * (ect ? 1.4 : 0.6) * fs));
        break;
    }
    ectopic.push_back(ect);
    pos += std::max<std::size_t>(step, 1);
  }

  // Noise-free cardiac source on lead II scale.
  std::vector<double> source(len, 0.0);
  for (std::size_t b = 0; b < peaks.size(); ++b) {
    const double tc = static_cast<double>(peaks[b]) / fs;
    const bool ect = ectopic[b];
    const double w = ect ? 2.0 * qrs_sigma : qrs_sigma;
    const double a = ect ? 1.2 * qrs_amp : qrs_amp;
    const bool has_p = spec.rhythm != Rhythm::kIrregular && !ect;
    const double t_sign = ect ? -1.0 : 1.0;
    const auto lo = static_cast<std::ptrdiff_t>(std::floor((tc - 0.4) * fs));
    const auto hi = static_cast<std::ptrdiff_t>(std::ceil((tc + 0.6) * fs));
    for (std::ptrdiff_t i = std::max<std::ptrdiff_t>(lo, 0); i < std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(len)); ++i) {
      const double t = static_cast<double>(i) / fs;
      double v = a * gauss(t, tc, w) + t_sign * t_amp * gauss(t, tc + 0.28, 0.05);
      if (has_p) v += 0.12 * gauss(t, tc - 0.16, 0.025);
      source[static_cast<std::size_t>(i)] += v;
    }
  }

  SynthGroundTruth truth;
  truth.r_peaks = peaks;
  truth.rhythm = spec.rhythm;
  truth.age_years = spec.age_years;
  truth.risk_feature = risk_feature;
  const auto minutes = static_cast<std::size_t>(std::ceil(spec.duration_s / 60.0));
  truth.apnea_mask.assign(minutes, false);
  for (std::size_t m = 0; m < minutes && m < spec.apnea_minutes.size(); ++m) truth.apnea_mask[m] = spec.apnea_minutes[m];

  // Survival: exponential event time with hazard tied to the QRS amplitude.
  const double hazard = spec.survival.base_hazard * std::exp(spec.survival.log_hr_per_unit * risk_feature);
  const double event_time = rng.exponential(hazard);
  const double censor_time = spec.survival.followup_years * rng.uniform(0.5, 1.0);
  truth.event = event_time <= censor_time;
  truth.event_time_years = std::max(std::min(event_time, censor_time), 1e-6);

  const std::vector<std::size_t> slots = spec.twelve_lead ? std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}
                                                          : std::vector<std::size_t>{kLeadII};
  const double wander_phase = rng.uniform(0.0, 2.0 * M_PI);
  Tensor clean({slots.size(), len});
  Tensor noisy({slots.size(), len});
  for (std::size_t r = 0; r < slots.size(); ++r) {
    const double g = kLeadGain[slots[r]];
    for (std::size_t i = 0; i < len; ++i) {
      const double t = static_cast<double>(i) / fs;
      const auto minute = static_cast<std::size_t>(t / 60.0);
      const bool apnea = minute < truth.apnea_mask.size() && truth.apnea_mask[minute];
      const double amp = apnea ? spec.apnea_baseline_mv : spec.baseline_mv;
      const double wander = amp * std::sin(2.0 * M_PI * 0.2 * t + wander_phase);
      clean.at(r, i) = g * source[i];
      noisy.at(r, i) = clean.at(r, i) + wander + (spec.noise_std_mv > 0.0 ? rng.normal(0.0, spec.noise_std_mv) : 0.0);
    }
  }
  SynthOutput out{make_record(std::move(noisy), fs, std::move(patient_id), std::move(record_id), slots), std::move(truth),
                  std::move(clean)};
  out.record.labels = to_json(out.truth);
  return out;
}

nlohmann::json to_json(const SynthGroundTruth& t) {
  nlohmann::json j;
  j["r_peaks"] = t.r_peaks;
  j["rhythm"] = static_cast<int>(t.rhythm);
  j["apnea"] = t.apnea_mask;
  j["age"] = t.age_years;
  j["event_time"] = t.event_time_years;
  j["event"] = t.event;
  j["risk_feature"] = t.risk_feature;
  return j;
}

SynthGroundTruth truth_from_json(const nlohmann::json& j) {
  SynthGroundTruth t;
  t.r_peaks = j.at("r_peaks").get<std::vector<std::size_t>>();
  t.rhythm = static_cast<Rhythm>(j.at("rhythm").get<int>());
  t.apnea_mask = j.at("apnea").get<std::vector<bool>>();
  t.age_years = j.at("age").get<double>();
  t.event_time_years = j.at("event_time").get<double>();
  t.event = j.at("event").get<bool>();
  t.risk_feature = j.value("risk_feature", 0.0);
  return t;
}

}  // namespace xecg
