#include "xecg/augment.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <stdexcept>

namespace xecg {

void AugmentConfig::validate(double model_rate_hz) const {
  auto prob = [](double p, const char* key) {
    if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument(std::string("augment.") + key + " must be in [0, 1]");
  };
  prob(p_drop, "p_drop");
  prob(p_jitter, "p_jitter");
  prob(p_scale, "p_scale");
  if (!(jitter_a >= 0.0)) throw std::invalid_argument("augment.jitter_a must be >= 0");
  if (!(jitter_sigma >= 0.0)) throw std::invalid_argument("augment.jitter_sigma must be >= 0");
  if (!(scale_r >= 0.0 && scale_r < 2.0)) throw std::invalid_argument("augment.scale_r must be in [0, 2)");
  if (!(cutoff_hz > 0.0 && cutoff_hz < model_rate_hz / 2.0))
    throw std::invalid_argument("augment.cutoff_hz must be in (0, f_m/2)");
  if (protected_lead >= kLeadSlots) throw std::invalid_argument("augment.protected_lead out of range");
  if (n_global == 0) throw std::invalid_argument("augment.n_global must be >= 1");
  if (!(global_frac > 0.0 && global_frac <= 1.0 && local_frac > 0.0 && local_frac < global_frac))
    throw std::invalid_argument("augment: need 0 < local_frac < global_frac <= 1");
}

nlohmann::json to_json(const AugmentConfig& c) {
  return {{"p_drop", c.p_drop},         {"cutoff_hz", c.cutoff_hz},   {"jitter_a", c.jitter_a},
          {"jitter_sigma", c.jitter_sigma}, {"p_jitter", c.p_jitter}, {"scale_r", c.scale_r},
          {"p_scale", c.p_scale},       {"n_global", c.n_global},     {"n_local", c.n_local},
          {"global_frac", c.global_frac}, {"local_frac", c.local_frac}, {"swap_baseline", c.swap_baseline}};
}

AugmentConfig augment_config_from_json(const nlohmann::json& j) {
  AugmentConfig c;
  c.p_drop = j.value("p_drop", c.p_drop);
  c.cutoff_hz = j.value("cutoff_hz", c.cutoff_hz);
  c.jitter_a = j.value("jitter_a", c.jitter_a);
  c.jitter_sigma = j.value("jitter_sigma", c.jitter_sigma);
  c.p_jitter = j.value("p_jitter", c.p_jitter);
  c.scale_r = j.value("scale_r", c.scale_r);
  c.p_scale = j.value("p_scale", c.p_scale);
  c.n_global = j.value("n_global", c.n_global);
  c.n_local = j.value("n_local", c.n_local);
  c.global_frac = j.value("global_frac", c.global_frac);
  c.local_frac = j.value("local_frac", c.local_frac);
  c.swap_baseline = j.value("swap_baseline", c.swap_baseline);
  return c;
}

Biquad butterworth_lowpass(double cutoff_hz, double fs) {
  if (!(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0))
    throw std::invalid_argument("butterworth: cutoff must lie in (0, fs/2)");
  const double k = std::tan(M_PI * cutoff_hz / fs);
  const double k2 = k * k;
  const double norm = 1.0 / (1.0 + M_SQRT2 * k + k2);
  Biquad q{};
  q.b0 = k2 * norm;
  q.b1 = 2.0 * q.b0;
  q.b2 = q.b0;
  q.a1 = 2.0 * (k2 - 1.0) * norm;
  q.a2 = (1.0 - M_SQRT2 * k + k2) * norm;
  return q;
}

namespace {

// Direct form II transposed, state primed to the steady state of a constant input x[0].
void biquad_inplace(std::vector<double>& x, const Biquad& q) {
  if (x.empty()) return;
  const double c = x[0];
  double z2 = (q.b2 - q.a2) * c;
  double z1 = (q.b1 - q.a1) * c + z2;
  for (double& v : x) {
    const double in = v;
    const double y = q.b0 * in + z1;
    z1 = q.b1 * in - q.a1 * y + z2;
    z2 = q.b2 * in - q.a2 * y;
    v = y;
  }
}

}  // namespace

std::vector<double> lowpass_butterworth(std::span<const double> signal, double cutoff_hz, double fs) {
  const Biquad q = butterworth_lowpass(cutoff_hz, fs);
  const std::size_t n = signal.size();
  if (n == 0) return {};
  if (n == 1) return {signal[0]};
  // Mirror padding, about three filter time constants long. Odd reflection would
  // inject a step of 2*x_end whenever a record stops mid-oscillation.
  const auto want = static_cast<std::size_t>(std::ceil(3.0 * fs / cutoff_hz));
  const std::size_t pad = std::min(n - 1, want);
  std::vector<double> ext;
  ext.reserve(n + 2 * pad);
  for (std::size_t i = pad; i >= 1; --i) ext.push_back(signal[i]);
  ext.insert(ext.end(), signal.begin(), signal.end());
  for (std::size_t i = 1; i <= pad; ++i) ext.push_back(signal[n - 1 - i]);
  biquad_inplace(ext, q);
  std::reverse(ext.begin(), ext.end());
  biquad_inplace(ext, q);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

EcgRecord lead_dropout(const EcgRecord& record, const AugmentConfig& cfg, Rng& rng) {
  if (record.n_leads() != kLeadSlots) throw LayoutError("lead_dropout expects the 12-slot layout");
  EcgRecord out = record;
  const std::size_t len = record.length();
  for (std::size_t slot = 0; slot < kLeadSlots; ++slot) {
    if (slot == cfg.protected_lead || !record.lead_present[slot]) continue;
    if (rng.bernoulli(cfg.p_drop)) std::fill_n(out.samples.data() + slot * len, len, 0.0);
  }
  return out;
}

std::vector<EcgRecord> baseline_swap(std::span<const EcgRecord> batch, const AugmentConfig& cfg, Rng& rng) {
  const auto perm = rng.permutation(batch.size());
  return baseline_swap(batch, cfg, perm);
}

std::vector<EcgRecord> baseline_swap(std::span<const EcgRecord> batch, const AugmentConfig& cfg,
                                     std::span<const std::size_t> perm) {
  std::vector<EcgRecord> out(batch.begin(), batch.end());
  if (batch.size() < 2) {
    spdlog::debug("baseline_swap: batch of {} record(s), nothing to swap", batch.size());
    return out;
  }
  if (perm.size() != batch.size()) throw std::invalid_argument("baseline_swap: permutation size mismatch");
  const std::size_t leads = batch[0].n_leads(), len = batch[0].length();
  for (const auto& r : batch)
    if (r.n_leads() != leads || r.length() != len || r.fs != batch[0].fs)
      throw SignalError("baseline_swap: batch records must share lead count, length and rate");
  // baselines[i][c] = low-pass of lead c of record i.
  std::vector<std::vector<std::vector<double>>> base(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    base[i].resize(leads);
    for (std::size_t c = 0; c < leads; ++c)
      base[i][c] = lowpass_butterworth({batch[i].samples.data() + c * len, len}, cfg.cutoff_hz, batch[i].fs);
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t j = perm[i];
    if (j == i) continue;
    for (std::size_t c = 0; c < leads; ++c) {
      const double* s = batch[i].samples.data() + c * len;
      double* o = out[i].samples.data() + c * len;
      for (std::size_t t = 0; t < len; ++t) o[t] = (s[t] - base[i][c][t]) + base[j][c][t];
    }
  }
  return out;
}

EcgRecord jitter(const EcgRecord& record, const AugmentConfig& cfg, Rng& rng) {
  if (!rng.bernoulli(cfg.p_jitter) || cfg.jitter_a == 0.0) return record;
  EcgRecord out = record;
  for (auto& v : out.samples.values()) v *= 1.0 + cfg.jitter_a * rng.normal(0.0, cfg.jitter_sigma);
  return out;
}

EcgRecord amp_scale(const EcgRecord& record, const AugmentConfig& cfg, Rng& rng) {
  if (!rng.bernoulli(cfg.p_scale)) return record;
  const double alpha = rng.uniform(1.0 - cfg.scale_r / 2.0, 1.0 + cfg.scale_r / 2.0);
  EcgRecord out = record;
  for (auto& v : out.samples.values()) v *= alpha;
  return out;
}

ViewSet make_views(std::span<const EcgRecord> patient_records, std::size_t patch_size, const AugmentConfig& cfg,
                   Rng& rng) {
  if (patient_records.empty()) throw std::invalid_argument("make_views: no records for patient");
  const std::string& pid = patient_records[0].patient_id;
  for (const auto& r : patient_records) {
    if (r.patient_id != pid) throw std::invalid_argument("make_views: records from different patients");
    if (r.length() < 2 * patch_size)
      throw SignalError("make_views: record " + r.record_id + " is shorter than 2 patches");
  }
  auto draw = [&](double frac) {
    CropWindow w;
    w.source = rng.index(0, patient_records.size() - 1);
    const std::size_t len = patient_records[w.source].length();
    const auto patches = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(frac * static_cast<double>(len) / static_cast<double>(patch_size))));
    w.length = patches * patch_size;
    w.start = rng.index(0, len - w.length);
    return w;
  };
  ViewSet vs;
  vs.patient_id = pid;
  for (std::size_t g = 0; g < cfg.n_global; ++g) vs.globals.push_back(draw(cfg.global_frac));
  for (std::size_t l = 0; l < cfg.n_local; ++l) vs.locals.push_back(draw(cfg.local_frac));
  return vs;
}

EcgRecord render_view(std::span<const EcgRecord> patient_records, const CropWindow& w, const AugmentConfig& cfg,
                      Rng& rng) {
  EcgRecord v = crop(pad_leads(patient_records[w.source]), w.start, w.length);
  v = lead_dropout(v, cfg, rng);
  v = jitter(v, cfg, rng);
  return amp_scale(v, cfg, rng);
}

}  // namespace xecg
