#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "xecg/heads.hpp"
#include "xecg/metrics.hpp"
#include "xecg/ssl.hpp"

namespace py = pybind11;
using namespace xecg;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy_n(t.data(), t.size(), out.mutable_data());
  return out;
}

Tensor to_tensor(const Array& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  if (s.empty()) s = {1};
  return Tensor(s, std::span<const double>(a.data(), static_cast<std::size_t>(a.size())));
}

std::vector<double> vec(const Array& a) { return {a.data(), a.data() + a.size()}; }

// 1-D input is a lead-II trace; 2-D input is [12 x L] in standard lead order.
EcgRecord to_record(const Array& a, double fs) {
  if (a.ndim() == 1) return single_lead_record(vec(a), fs, "py", "py");
  if (a.ndim() == 2 && a.shape(0) == static_cast<py::ssize_t>(kLeadSlots)) {
    std::vector<std::size_t> slots(kLeadSlots);
    for (std::size_t i = 0; i < kLeadSlots; ++i) slots[i] = i;
    return make_record(to_tensor(a), fs, "py", "py", slots);
  }
  throw py::value_error("signal must be 1-D (lead II) or [12 x L]");
}

class PyEncoder {
 public:
  explicit PyEncoder(const std::string& path) {
    const Checkpoint ck = read_checkpoint(path);
    cfg_ = encoder_config_from_json(ck.config.contains("encoder") ? ck.config.at("encoder") : ck.config);
    params_ = ck.params;
  }
  PyEncoder(const std::string& config_json, std::uint64_t seed) {
    cfg_ = encoder_config_from_json(nlohmann::json::parse(config_json));
    Rng rng(seed);
    params_ = init_encoder(cfg_, rng);
  }

  py::array_t<double> encode(const Array& signal, double fs) const {
    EcgRecord r = to_record(signal, fs);
    if (std::abs(fs - cfg_.model_rate_hz) > 1e-9) r = resample(r, cfg_.model_rate_hz);
    return to_numpy(xecg::encode(cfg_, params_, r).reps);
  }
  py::array_t<double> embed(const Array& signal, double fs, const std::string& pool) const {
    EcgRecord r = to_record(signal, fs);
    if (std::abs(fs - cfg_.model_rate_hz) > 1e-9) r = resample(r, cfg_.model_rate_hz);
    return to_numpy(embed_record(cfg_, params_, r, pool_mode_from_string(pool)));
  }
  std::size_t n_params() const { return params_.scalar_count(); }
  std::string config_json() const { return to_json(cfg_).dump(); }
  std::uint64_t hash() const { return params_hash(params_); }
  void save(const std::string& path) const { write_checkpoint(path, {to_json(cfg_), params_}); }

 private:
  EncoderConfig cfg_;
  ParamSet params_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "xecg C++ core";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<MetricError>(m, "MetricError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);

  m.def(
      "synth_ecg",
      [](double duration_s, double rr_interval_s, const std::string& rhythm, double age_years, std::uint64_t seed,
         bool twelve_lead, double noise_std_mv) {
        SynthSpec s;
        s.duration_s = duration_s;
        s.rr_interval_s = rr_interval_s;
        if (rhythm == "regular") s.rhythm = Rhythm::kRegular;
        else if (rhythm == "irregular") s.rhythm = Rhythm::kIrregular;
        else if (rhythm == "bigeminy") s.rhythm = Rhythm::kBigeminy;
        else throw py::value_error("rhythm must be regular, irregular or bigeminy");
        s.age_years = age_years;
        s.twelve_lead = twelve_lead;
        s.noise_std_mv = noise_std_mv;
        const SynthOutput o = synth_ecg(s, seed);
        py::dict d;
        d["samples"] = to_numpy(o.record.samples);
        d["fs"] = o.record.fs;
        d["r_peaks"] = o.truth.r_peaks;
        d["rhythm"] = to_string(o.truth.rhythm);
        d["event_time"] = o.truth.event_time_years;
        d["event"] = o.truth.event;
        d["risk_feature"] = o.truth.risk_feature;
        return d;
      },
      py::arg("duration_s") = 10.0, py::arg("rr_interval_s") = 1.0, py::arg("rhythm") = "regular",
      py::arg("age_years") = 50.0, py::arg("seed") = 0, py::arg("twelve_lead") = true, py::arg("noise_std_mv") = 0.02);

  m.def(
      "auroc", [](const Array& s, const std::vector<int>& y) { return auroc(vec(s), y); }, py::arg("scores"),
      py::arg("labels"));
  m.def(
      "smape", [](const Array& p, const Array& t) { return smape(vec(p), vec(t)); }, py::arg("pred"), py::arg("truth"));
  m.def(
      "concordance_index",
      [](const Array& r, const Array& t, const std::vector<int>& e) { return concordance_index(vec(r), vec(t), e); },
      py::arg("risk"), py::arg("time"), py::arg("event"));
  m.def(
      "rpeak_f1",
      [](const std::vector<std::size_t>& pred, const std::vector<std::size_t>& truth, double fs, double tol) {
        const PeakMatch pm = rpeak_f1(pred, truth, fs, tol);
        py::dict d;
        d["tp"] = pm.tp;
        d["fp"] = pm.fp;
        d["fn"] = pm.fn;
        d["f1"] = pm.f1;
        return d;
      },
      py::arg("pred"), py::arg("truth"), py::arg("fs"), py::arg("tol_total_ms") = 20.0);
  m.def(
      "welch_t",
      [](const Array& a, const Array& b) {
        const WelchResult w = welch_t(vec(a), vec(b));
        return py::make_tuple(w.t, w.df, w.p);
      },
      py::arg("a"), py::arg("b"));
  m.def(
      "bench_score", [](const std::vector<double>& v) { return bench_score(v); }, py::arg("task_metrics"));
  m.def(
      "cox_loss",
      [](const Array& phi, const Array& t, const std::vector<int>& e, bool strict) {
        return cox_loss(to_tensor(phi), vec(t), e, strict);
      },
      py::arg("phi"), py::arg("time"), py::arg("event"), py::arg("strict") = false);
  m.def(
      "coding_rate", [](const Array& z, double eps) { return coding_rate(to_tensor(z), eps); }, py::arg("z"),
      py::arg("eps") = 0.5);
  m.def("momentum_schedule", &momentum_schedule, py::arg("t"), py::arg("total"), py::arg("lambda_base") = 0.99);
  m.def(
      "params_hash", [](const std::string& path) { return params_hash(read_checkpoint(path).params); },
      py::arg("checkpoint"));

  py::class_<PyEncoder>(m, "Encoder")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def(py::init<const std::string&, std::uint64_t>(), py::arg("config_json"), py::arg("seed"))
      .def("encode", &PyEncoder::encode, py::arg("signal"), py::arg("fs") = 100.0,
           "Patch representations [N x E].")
      .def("embed", &PyEncoder::embed, py::arg("signal"), py::arg("fs") = 100.0, py::arg("pool") = "avg",
           "Pooled representation [E].")
      .def("config_json", &PyEncoder::config_json)
      .def("save", &PyEncoder::save, py::arg("path"))
      .def_property_readonly("n_params", &PyEncoder::n_params)
      .def_property_readonly("hash", &PyEncoder::hash);
}
