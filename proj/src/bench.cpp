#include "xecg/bench.hpp"

#include <spdlog/spdlog.h>

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace xecg {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(TaskKind k) {
  switch (k) {
    case TaskKind::kClassification: return "classification";
    case TaskKind::kSegmentation: return "segmentation";
    case TaskKind::kDetection: return "detection";
    case TaskKind::kRegression: return "regression";
    case TaskKind::kSurvival: return "survival";
  }
  return "?";
}

TaskKind task_kind_from_string(const std::string& s) {
  for (TaskKind k : {TaskKind::kClassification, TaskKind::kSegmentation, TaskKind::kDetection, TaskKind::kRegression,
                     TaskKind::kSurvival})
    if (s == to_string(k)) return k;
  throw ConfigError("unknown task kind '" + s + "'");
}

HeadKind TaskSpec::head_kind() const {
  switch (kind) {
    case TaskKind::kClassification: return multiclass ? HeadKind::kMulticlass : HeadKind::kMultilabel;
    case TaskKind::kSegmentation: return HeadKind::kSegmentation;
    case TaskKind::kDetection: return HeadKind::kDetection;
    case TaskKind::kRegression: return HeadKind::kRegression;
    case TaskKind::kSurvival: return HeadKind::kCox;
  }
  return HeadKind::kMultilabel;
}

namespace {

MetricId metric_id(const std::string& name) {
  if (name == "smape") return MetricId::kOneMinusSmape;
  return metric_from_string(name);
}

bool metric_fits(TaskKind k, const std::string& m) {
  switch (k) {
    case TaskKind::kClassification:
    case TaskKind::kSegmentation: return m == "auroc" || m == "macro_f1";
    case TaskKind::kDetection: return m == "rpeak_f1";
    case TaskKind::kRegression: return m == "smape";
    case TaskKind::kSurvival: return m == "c_index";
  }
  return false;
}

const json& need(const json& j, const std::string& key, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  if (!j.contains(key)) throw ConfigError(where + "." + key + ": missing");
  return j.at(key);
}

template <typename T>
T as(const json& v, const std::string& path) {
  try {
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void check_schema(const json& j, const std::string& where) {
  if (j.contains("schema_version") && as<int>(j.at("schema_version"), where + ".schema_version") != kSchemaVersion)
    throw ConfigError(where + ".schema_version: unsupported version");
}

fs::path resolve(const fs::path& base, const fs::path& p) { return p.is_absolute() ? p : base / p; }

json read_json(const fs::path& p, const std::string& where) {
  std::ifstream in(p);
  if (!in) throw ConfigError(where + ": cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + p.string() + ": " + e.what());
  }
}

std::string fnv_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

void TaskSpec::validate() const {
  if (id.empty()) throw ConfigError("task.id: empty");
  if (!metric_fits(kind, metric))
    throw ConfigError("task " + id + ".metric: '" + metric + "' does not apply to " + to_string(kind));
  if (metric == "smape" && !one_minus) throw ConfigError("task " + id + ".normalization: smape needs one_minus");
  if (kind == TaskKind::kClassification && out_dim < (multiclass ? 2u : 1u))
    throw ConfigError("task " + id + ".classes: too few classes");
  for (const auto& [name, p] : {std::pair{"train", &train}, {"val", &val}, {"test", &test}})
    if (!fs::exists(*p)) throw ConfigError("task " + id + ".splits." + name + ": missing file " + p->string());
  plan.validate();
}

TaskSpec task_spec_from_json(const json& j, const fs::path& base_dir, const std::string& where) {
  check_schema(j, where);
  TaskSpec t;
  t.id = as<std::string>(need(j, "id", where), where + ".id");
  t.kind = task_kind_from_string(as<std::string>(need(j, "kind", where), where + ".kind"));
  t.multiclass = j.contains("multiclass") ? as<bool>(j.at("multiclass"), where + ".multiclass") : false;
  t.out_dim = j.contains("classes") ? as<std::size_t>(j.at("classes"), where + ".classes") : 1;
  t.corpus = resolve(base_dir, as<std::string>(need(j, "corpus", where), where + ".corpus"));
  const json& sp = need(j, "splits", where);
  t.train = resolve(base_dir, as<std::string>(need(sp, "train", where + ".splits"), where + ".splits.train"));
  t.val = resolve(base_dir, as<std::string>(need(sp, "val", where + ".splits"), where + ".splits.val"));
  t.test = resolve(base_dir, as<std::string>(need(sp, "test", where + ".splits"), where + ".splits.test"));
  if (j.contains("plan")) {
    try {
      t.plan = adapt_plan_from_json(j.at("plan"));
    } catch (const ConfigError& e) {
      throw ConfigError(where + ".plan: " + e.what());
    }
  }
  t.metric = as<std::string>(need(j, "metric", where), where + ".metric");
  const std::string norm = j.contains("normalization") ? as<std::string>(j.at("normalization"), where + ".normalization")
                                                       : std::string("identity");
  if (norm != "identity" && norm != "one_minus") throw ConfigError(where + ".normalization: '" + norm + "'");
  t.one_minus = norm == "one_minus";
  t.validate();
  return t;
}

json to_json(const TaskSpec& t) {
  return {{"schema_version", kSchemaVersion},
          {"id", t.id},
          {"kind", to_string(t.kind)},
          {"multiclass", t.multiclass},
          {"classes", t.out_dim},
          {"corpus", t.corpus.generic_string()},
          {"splits", {{"train", t.train.generic_string()}, {"val", t.val.generic_string()}, {"test", t.test.generic_string()}}},
          {"plan", to_json(t.plan)},
          {"metric", t.metric},
          {"normalization", t.one_minus ? "one_minus" : "identity"}};
}

void RunManifest::validate() const {
  if (seeds.empty()) throw ConfigError("manifest.seeds: at least one seed");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size())
    throw ConfigError("manifest.seeds: seeds must be distinct");
  if (tasks.empty()) throw ConfigError("manifest.tasks: no tasks");
  if (modes.empty()) throw ConfigError("manifest.modes: no modes");
  if (!checkpoint.empty() && !fs::exists(checkpoint)) throw ConfigError("manifest.checkpoint: missing " + checkpoint.string());
}

RunManifest run_manifest_from_json(const json& j, const fs::path& base_dir) {
  const std::string w = "manifest";
  check_schema(j, w);
  RunManifest m;
  if (j.contains("model")) m.model = as<std::string>(j.at("model"), w + ".model");
  if (j.contains("checkpoint") && !j.at("checkpoint").is_null())
    m.checkpoint = resolve(base_dir, as<std::string>(j.at("checkpoint"), w + ".checkpoint"));
  if (j.contains("encoder")) {
    try {
      m.encoder = encoder_config_from_json(j.at("encoder"));
    } catch (const std::exception& e) {
      throw ConfigError(w + ".encoder: " + e.what());
    }
  }
  const json& tasks = need(j, "tasks", w);
  if (!tasks.is_array()) throw ConfigError(w + ".tasks: expected an array");
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::string where = w + ".tasks[" + std::to_string(i) + "]";
    if (tasks[i].is_string()) {
      const fs::path p = resolve(base_dir, tasks[i].get<std::string>());
      m.tasks.push_back(task_spec_from_json(read_json(p, where), p.parent_path(), where));
    } else {
      m.tasks.push_back(task_spec_from_json(tasks[i], base_dir, where));
    }
  }
  if (j.contains("seeds")) m.seeds = as<std::vector<std::uint64_t>>(j.at("seeds"), w + ".seeds");
  if (j.contains("modes")) {
    m.modes.clear();
    for (const auto& s : as<std::vector<std::string>>(j.at("modes"), w + ".modes")) {
      if (s == "preset") m.modes.push_back(ModeChoice::kPreset);
      else if (s == "linear_probe") m.modes.push_back(ModeChoice::kLinearProbe);
      else if (s == "finetune") m.modes.push_back(ModeChoice::kFinetune);
      else throw ConfigError(w + ".modes: unknown mode '" + s + "'");
    }
  }
  if (j.contains("out")) m.out_dir = resolve(base_dir, as<std::string>(j.at("out"), w + ".out"));
  if (j.contains("hardware_note")) m.hardware_note = as<std::string>(j.at("hardware_note"), w + ".hardware_note");
  m.validate();
  return m;
}

// ---- splits --------------------------------------------------------------------------

void SplitPreset::validate() const {
  for (auto a = splits.begin(); a != splits.end(); ++a) {
    const std::set<std::string> sa(a->second.begin(), a->second.end());
    if (sa.size() != a->second.size()) throw ConfigError("split " + name + "/" + a->first + ": duplicate ids");
    for (auto b = std::next(a); b != splits.end(); ++b)
      for (const auto& id : b->second)
        if (sa.count(id)) throw ConfigError("split " + name + ": '" + id + "' in both " + a->first + " and " + b->first);
  }
}

SplitPreset mitbih_preset() {
  SplitPreset p;
  p.name = "mitbih";
  const std::vector<std::string> ds1 = {"101", "106", "108", "109", "112", "114", "115", "116", "118", "119", "122",
                                        "124", "201", "203", "205", "207", "208", "209", "215", "220", "223", "230"};
  p.splits["test"] = {"100", "103", "105", "111", "113", "117", "121", "123", "200", "202", "210",
                      "212", "213", "214", "219", "221", "222", "228", "231", "232", "233", "234"};
  p.splits["val"] = {"114", "203"};
  for (const auto& id : ds1)
    if (id != "114" && id != "203") p.splits["train"].push_back(id);
  p.validate();
  return p;
}

SplitPreset random_split(std::vector<std::string> ids, double train_fraction, double val_fraction, std::uint64_t seed) {
  if (train_fraction < 0 || val_fraction < 0 || train_fraction + val_fraction > 1.0)
    throw ConfigError("random_split: fractions must be non-negative and sum to at most 1");
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  Rng rng(seed);
  const auto perm = rng.permutation(ids.size());
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(ids.size())));
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(ids.size())));
  SplitPreset p;
  p.name = "random";
  for (std::size_t k = 0; k < ids.size(); ++k) {
    const char* s = k < n_train ? "train" : (k < n_train + n_val ? "val" : "test");
    p.splits[s].push_back(ids[perm[k]]);
  }
  p.validate();
  return p;
}

// ---- results -------------------------------------------------------------------------

json to_json(const ResultRow& r) {
  json j = {{"model", r.model},
            {"task", r.task},
            {"seed", r.seed},
            {"mode", r.mode},
            {"metric_name", r.metric_name},
            {"value", r.value},
            {"raw", r.raw},
            {"runtime_s", r.runtime_s},
            {"peak_mem_bytes", r.peak_mem_bytes},
            {"status", r.ok ? "ok" : "failed"},
            {"reason", r.reason}};
  if (!r.hash.empty()) j["hash"] = r.hash;
  return j;
}

ResultRow result_from_json(const json& j) {
  ResultRow r;
  try {
    r.model = j.at("model").get<std::string>();
    r.task = j.at("task").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.mode = j.at("mode").get<std::string>();
    r.metric_name = j.at("metric_name").get<std::string>();
    r.value = j.at("value").get<double>();
    r.raw = j.value("raw", r.value);
    r.runtime_s = j.value("runtime_s", 0.0);
    r.peak_mem_bytes = j.value("peak_mem_bytes", std::size_t{0});
    r.ok = j.value("status", std::string("ok")) == "ok";
    r.reason = j.value("reason", std::string());
    r.hash = j.value("hash", std::string());
  } catch (const json::exception& e) {
    throw ScoringError(std::string("malformed result row: ") + e.what());
  }
  return r;
}

std::string content_hash(const ResultRow& r) {
  ResultRow copy = r;
  copy.hash.clear();
  return fnv_hex(to_json(copy).dump());
}

void append_result(const fs::path& file, ResultRow row) {
  row.hash = content_hash(row);
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::app);
  if (!out) throw std::runtime_error("cannot append to " + file.string());
  out << to_json(row).dump() << '\n';
}

std::vector<ResultRow> read_results(const fs::path& path) {
  std::vector<fs::path> files;
  if (fs::is_directory(path)) {
    for (const auto& e : fs::directory_iterator(path))
      if (e.path().extension() == ".jsonl") files.push_back(e.path());
    std::sort(files.begin(), files.end());
  } else if (fs::exists(path)) {
    files.push_back(path);
  } else {
    throw ConfigError("results: no such file or directory " + path.string());
  }
  std::vector<ResultRow> rows;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    std::size_t ln = 0;
    while (std::getline(in, line)) {
      ++ln;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw ScoringError(f.string() + ":" + std::to_string(ln) + ": " + e.what());
      }
      ResultRow r = result_from_json(j);
      if (!r.hash.empty() && r.hash != content_hash(r))
        throw ScoringError(f.string() + ":" + std::to_string(ln) + ": content hash mismatch");
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

SuiteReport aggregate(const std::vector<ResultRow>& rows) {
  SuiteReport rep;
  rep.rows = rows;
  std::vector<const ResultRow*> ok;
  for (const auto& r : rows) {
    if (r.ok) ok.push_back(&r);
    else ++rep.failures;
  }
  std::stable_sort(ok.begin(), ok.end(), [](const ResultRow* a, const ResultRow* b) { return a->seed < b->seed; });
  std::set<std::string> all_tasks;
  for (const ResultRow* r : ok) {
    TaskScore& ts = rep.scores[r->model + "/" + r->mode][r->task];
    ts.task = r->task;
    ts.metric = r->metric_name;
    ts.values.push_back(r->value);
    all_tasks.insert(r->task);
  }
  std::map<std::string, std::map<std::string, std::vector<double>>> complete;
  for (const auto& [model, tasks] : rep.scores) {
    if (tasks.size() != all_tasks.size()) {
      spdlog::warn("aggregate: {} lacks {} task(s); left out of scores and ranks", model, all_tasks.size() - tasks.size());
      continue;
    }
    std::vector<double> means;
    for (const auto& [task, ts] : tasks) {
      means.push_back(ts.mean());
      complete[model][task] = ts.values;
    }
    rep.bench_scores[model] = bench_score(means);
  }
  if (!complete.empty()) rep.table = rank_table(complete);
  return rep;
}

void write_score_report(const SuiteReport& rep, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::ofstream s(out_dir / "score.csv");
  s << "model,bench_score,mean_rank\n";
  char buf[128];
  for (std::size_t i = 0; i < rep.table.models.size(); ++i) {
    const auto& m = rep.table.models[i];
    s << m;
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", rep.bench_scores.at(m), rep.table.mean_rank[i]);
    s << buf;
  }
  std::ofstream t(out_dir / "tasks.csv");
  t << "model,task,metric,mean,sd,n,rank\n";
  for (std::size_t i = 0; i < rep.table.models.size(); ++i) {
    const auto& m = rep.table.models[i];
    for (std::size_t k = 0; k < rep.table.tasks.size(); ++k) {
      const TaskScore& ts = rep.scores.at(m).at(rep.table.tasks[k]);
      t << m << ',' << ts.task << ',' << ts.metric;
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%zu,%.17g\n", ts.mean(), ts.sd(), ts.values.size(),
                    rep.table.ranks[i][k]);
      t << buf;
    }
  }
}

// ---- suite ---------------------------------------------------------------------------

std::vector<TaskSample> load_split(const TaskSpec& task, const fs::path& split_file) {
  const json ids = read_json(split_file, "task " + task.id);
  const auto labels = read_labels(task.corpus / "labels.json");
  std::vector<TaskSample> out;
  for (const auto& idj : ids) {
    const auto id = idj.get<std::string>();
    const auto it = labels.find(id);
    if (it == labels.end()) throw ConfigError("task " + task.id + ": no labels for record '" + id + "'");
    const json& l = it->second;
    TaskSample s;
    s.record = read_record(task.corpus / "records" / (id + ".xrec"));
    switch (task.kind) {
      case TaskKind::kClassification:
        if (task.multiclass) s.y = {static_cast<double>(l.at("class").get<int>())};
        else s.y = l.at("y").get<std::vector<double>>();
        break;
      case TaskKind::kSegmentation: s.y = l.at("minutes").get<std::vector<double>>(); break;
      case TaskKind::kDetection: s.peaks = l.at("peaks").get<std::vector<std::size_t>>(); break;
      case TaskKind::kRegression: s.y = {l.at("value").get<double>()}; break;
      case TaskKind::kSurvival:
        s.time = l.at("time").get<double>();
        s.event = l.at("event").get<int>();
        break;
    }
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

void to_model_rate(std::vector<TaskSample>& samples, double rate) {
  for (auto& s : samples) {
    if (std::abs(s.record.fs - rate) < 1e-9) continue;
    const double ratio = rate / s.record.fs;
    s.record = resample(s.record, rate);
    for (auto& p : s.peaks) p = static_cast<std::size_t>(std::llround(static_cast<double>(p) * ratio));
  }
}

struct Job {
  std::size_t task = 0;
  std::uint64_t seed = 0;
  AdaptMode mode = AdaptMode::kLinearProbe;
};

}  // namespace

SuiteReport run_suite(const RunManifest& m, std::size_t threads) {
  m.validate();
  EncoderConfig cfg = m.encoder;
  ParamSet enc;
  if (!m.checkpoint.empty()) {
    const Checkpoint ck = read_checkpoint(m.checkpoint);
    cfg = encoder_config_from_json(ck.config.contains("encoder") ? ck.config.at("encoder") : ck.config);
    enc = ck.params;
  } else {
    Rng rng(0);
    enc = init_encoder(cfg, rng);
  }
  spdlog::info("suite: model {} ({} parameters), {} task(s), {} seed(s)", m.model, enc.scalar_count(), m.tasks.size(),
               m.seeds.size());

  struct Data {
    std::vector<TaskSample> train, val, test;
    std::string error;
  };
  std::vector<Data> data(m.tasks.size());
  for (std::size_t t = 0; t < m.tasks.size(); ++t) {
    try {
      data[t].train = load_split(m.tasks[t], m.tasks[t].train);
      data[t].val = load_split(m.tasks[t], m.tasks[t].val);
      data[t].test = load_split(m.tasks[t], m.tasks[t].test);
      for (auto* v : {&data[t].train, &data[t].val, &data[t].test}) to_model_rate(*v, cfg.model_rate_hz);
    } catch (const std::exception& e) {
      data[t].error = e.what();
    }
  }

  std::vector<Job> jobs;
  for (std::size_t t = 0; t < m.tasks.size(); ++t)
    for (ModeChoice mc : m.modes) {
      const AdaptMode mode = mc == ModeChoice::kPreset
                                 ? m.tasks[t].plan.mode
                                 : (mc == ModeChoice::kFinetune ? AdaptMode::kFinetune : AdaptMode::kLinearProbe);
      for (std::uint64_t seed : m.seeds) jobs.push_back({t, seed, mode});
    }

  std::vector<ResultRow> rows(jobs.size());
  auto run_job = [&](std::size_t k) {
    const Job& job = jobs[k];
    const TaskSpec& task = m.tasks[job.task];
    ResultRow& r = rows[k];
    r.model = m.model;
    r.task = task.id;
    r.seed = job.seed;
    r.mode = to_string(job.mode);
    r.metric_name = task.one_minus ? "1-" + task.metric : task.metric;
    const auto t0 = std::chrono::steady_clock::now();
    Arena::reset_peak();
    const std::size_t live0 = Arena::live_bytes();
    try {
      if (!data[job.task].error.empty()) throw ConfigError(data[job.task].error);
      AdaptPlan plan = task.plan;
      plan.mode = job.mode;
      Rng hr(job.seed);
      const HeadKind hk = task.head_kind();
      const std::size_t out = hk == HeadKind::kDetection ? cfg.patch_size
                              : (hk == HeadKind::kMultilabel || hk == HeadKind::kMulticlass) ? task.out_dim
                                                                                             : 1;
      const TaskHead head = init_head(hk, cfg.embed_dim, out, hr);
      const MetricId mid = metric_id(task.metric);
      const AdaptResult fit = adapt(cfg, enc, head, data[job.task].train, data[job.task].val, plan, mid, job.seed);
      const Predictions pred = predict(cfg, fit, data[job.task].test, plan);
      const double v = compute_metric(mid, hk, pred, data[job.task].test);
      r.raw = task.metric == "smape" ? 1.0 - v : v;
      r.value = task.one_minus ? 1.0 - r.raw : r.raw;
      if (!std::isfinite(r.value)) throw NumericError("non-finite metric");
    } catch (const std::exception& e) {
      r.ok = false;
      r.reason = e.what();
      spdlog::error("suite: {} seed {} {} failed: {}", task.id, job.seed, r.mode, e.what());
    }
    r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const std::size_t peak = Arena::peak_bytes();
    r.peak_mem_bytes = peak > live0 ? peak - live0 : 0;
    if (r.ok) spdlog::info("suite: {} seed {} {} {} = {:.4f} ({:.1f} s)", task.id, job.seed, r.mode, r.metric_name, r.value, r.runtime_s);
  };

  threads = std::max<std::size_t>(1, threads);
  if (threads == 1 || jobs.size() < 2) {
    for (std::size_t k = 0; k < jobs.size(); ++k) run_job(k);
  } else {
    // peak memory is process-wide, so concurrent rows share one counter
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(threads, jobs.size()); ++w)
      pool.emplace_back([&] {
        for (std::size_t k; (k = next.fetch_add(1)) < jobs.size();) run_job(k);
      });
    for (auto& th : pool) th.join();
  }

  const fs::path results = m.out_dir / "results.jsonl";
  for (const auto& r : rows) append_result(results, r);
  SuiteReport rep = aggregate(rows);
  write_score_report(rep, m.out_dir);
  return rep;
}

// ---- synthetic suite -----------------------------------------------------------------

void SynthSizes::validate() const {
  for (std::size_t v : {train, val, test, rpeak_train, rpeak_val, rpeak_test, rpeak_records, apnea_minutes})
    if (v == 0) throw ConfigError("synth sizes must be positive");
  if (!(record_s > 0.0) || !(rpeak_s > 0.0)) throw ConfigError("synth durations must be positive");
  if (!(apnea_prevalence > 0.0 && apnea_prevalence < 1.0)) throw ConfigError("apnea_prevalence in (0, 1)");
}

SynthSizes synth_sizes_from_json(const json& j) {
  SynthSizes s;
  try {
    s.train = j.value("train", s.train);
    s.val = j.value("val", s.val);
    s.test = j.value("test", s.test);
    s.rpeak_train = j.value("rpeak_train", s.rpeak_train);
    s.rpeak_val = j.value("rpeak_val", s.rpeak_val);
    s.rpeak_test = j.value("rpeak_test", s.rpeak_test);
    s.rpeak_records = j.value("rpeak_records", s.rpeak_records);
    s.record_s = j.value("record_s", s.record_s);
    s.rpeak_s = j.value("rpeak_s", s.rpeak_s);
    s.apnea_minutes = j.value("apnea_minutes", s.apnea_minutes);
    s.apnea_prevalence = j.value("apnea_prevalence", s.apnea_prevalence);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sizes: ") + e.what());
  }
  s.validate();
  return s;
}

namespace {

struct SynthTask {
  TaskSpec spec;
  std::size_t n_train, n_val, n_test;
  std::size_t per_patient = 1;
  // (split, index within split, split size, rng) -> spec and label
  std::function<std::pair<SynthSpec, json>(const std::string&, std::size_t, Rng&)> make;
};

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + p.string() + " for writing");
  out << j.dump(1) << '\n';
}

}  // namespace

void synth_suite(std::uint64_t seed, const SynthSizes& sz, const fs::path& out_dir) {
  sz.validate();
  Rng master(seed);

  auto probe = [](double lr, std::size_t epochs, double wd) {
    AdaptPlan p;
    p.mode = AdaptMode::kLinearProbe;
    p.lr_head = lr;
    p.weight_decay = wd;
    p.epochs = epochs;
    p.batch_size = 16;
    return p;
  };

  std::vector<SynthTask> tasks;
  {
    SynthTask t;
    t.spec.id = "rhythm";
    t.spec.kind = TaskKind::kClassification;
    t.spec.out_dim = kRhythmClasses;
    t.spec.metric = "auroc";
    t.spec.plan = probe(0.1, 100, 0.0);
    t.spec.plan.pool = PoolMode::kMax;  // beat-to-beat differences survive max better than the mean
    t.n_train = sz.train, t.n_val = sz.val, t.n_test = sz.test;
    t.make = [&sz](const std::string&, std::size_t i, Rng& g) {
      SynthSpec s;
      s.duration_s = sz.record_s;
      s.rhythm = static_cast<Rhythm>(i % kRhythmClasses);
      s.rr_interval_s = g.uniform(0.6, 1.2);
      s.age_years = g.uniform(30, 80);
      std::vector<double> y(kRhythmClasses, 0.0);
      y[i % kRhythmClasses] = 1.0;
      return std::pair{s, json{{"y", y}, {"rhythm", to_string(s.rhythm)}}};
    };
    tasks.push_back(std::move(t));
  }
  {
    SynthTask t;
    t.spec.id = "rpeak";
    t.spec.kind = TaskKind::kDetection;
    t.spec.metric = "rpeak_f1";
    AdaptPlan p;
    p.mode = AdaptMode::kFinetune;
    p.lr_head = 0.01;
    p.lr_encoder = 0.003;
    p.layerwise_decay = 0.75;
    p.weight_decay = 0.0;
    p.epochs = 30;
    p.batch_size = 2;  // 40 short records: batch 8 leaves too few steps at this scale
    p.window.window_len_s = 20.0;
    t.spec.plan = p;
    t.n_train = sz.rpeak_train, t.n_val = sz.rpeak_val, t.n_test = sz.rpeak_test;
    t.per_patient = sz.rpeak_records;
    t.make = [&sz](const std::string& split, std::size_t i, Rng& g) {
      SynthSpec s;
      s.duration_s = sz.rpeak_s;
      s.twelve_lead = false;
      s.rhythm = static_cast<Rhythm>(i % kRhythmClasses);
      s.rr_interval_s = g.uniform(0.6, 1.2);
      if (split == "test") {  // evaluation on clean signals
        s.noise_std_mv = 0.0;
        s.baseline_mv = 0.0;
      }
      return std::pair{s, json::object()};
    };
    tasks.push_back(std::move(t));
  }
  {
    SynthTask t;
    t.spec.id = "apnea";
    t.spec.kind = TaskKind::kSegmentation;
    t.spec.metric = "auroc";
    t.spec.plan = probe(0.05, 20, 0.0);
    t.spec.plan.window.window_len_s = 60.0 * static_cast<double>(sz.apnea_minutes);
    t.spec.plan.window.minute_average = true;
    t.n_train = sz.train, t.n_val = sz.val, t.n_test = sz.test;
    tasks.push_back(std::move(t));  // make() is set below, it needs per-split minute quotas
  }
  {
    SynthTask t;
    t.spec.id = "age";
    t.spec.kind = TaskKind::kRegression;
    t.spec.metric = "smape";
    t.spec.one_minus = true;
    t.spec.plan = probe(0.05, 40, 0.0);
    t.n_train = sz.train, t.n_val = sz.val, t.n_test = sz.test;
    t.make = [&sz](const std::string&, std::size_t, Rng& g) {
      SynthSpec s;
      s.duration_s = sz.record_s;
      s.age_years = g.uniform(20, 90);
      s.rr_interval_s = g.uniform(0.6, 1.2);
      return std::pair{s, json{{"value", s.age_years}}};
    };
    tasks.push_back(std::move(t));
  }
  {
    SynthTask t;
    t.spec.id = "survival";
    t.spec.kind = TaskKind::kSurvival;
    t.spec.metric = "c_index";
    t.spec.plan = probe(0.05, 40, 0.0);
    t.spec.plan.batch_size = 32;
    t.n_train = sz.train, t.n_val = sz.val, t.n_test = sz.test;
    t.make = [&sz](const std::string&, std::size_t, Rng& g) {
      SynthSpec s;
      s.duration_s = sz.record_s;
      s.age_years = g.uniform(30, 80);
      s.rr_interval_s = g.uniform(0.6, 1.2);
      return std::pair{s, json::object()};
    };
    tasks.push_back(std::move(t));
  }

  fs::create_directories(out_dir);
  json suite = {{"schema_version", kSchemaVersion}, {"tasks", json::array()}};
  for (std::size_t k = 0; k < tasks.size(); ++k) {
    SynthTask& t = tasks[k];
    Rng tr = master.fork(k + 1);
    const fs::path dir = out_dir / t.spec.id;
    fs::create_directories(dir / "records");
    std::map<std::string, json> labels;
    for (const auto& [split, n] : {std::pair{std::string("train"), t.n_train}, {"val", t.n_val}, {"test", t.n_test}}) {
      // apnea: an exact number of positive minutes per split, placed by permutation
      std::vector<bool> apnea;
      if (t.spec.id == "apnea") {
        const std::size_t total = n * sz.apnea_minutes;
        const auto pos = static_cast<std::size_t>(std::llround(sz.apnea_prevalence * static_cast<double>(total)));
        apnea.assign(total, false);
        const auto perm = tr.permutation(total);
        for (std::size_t q = 0; q < pos; ++q) apnea[perm[q]] = true;
      }
      json ids = json::array();
      for (std::size_t i = 0; i < n * t.per_patient; ++i) {
        char patient[64], id[80];
        std::snprintf(patient, sizeof patient, "%s-%s-%03zu", t.spec.id.c_str(), split.c_str(), i / t.per_patient);
        if (t.per_patient == 1) std::snprintf(id, sizeof id, "%s", patient);
        else std::snprintf(id, sizeof id, "%s-%zu", patient, i % t.per_patient);
        SynthSpec spec;
        json label;
        if (t.spec.id == "apnea") {
          spec.duration_s = 60.0 * static_cast<double>(sz.apnea_minutes);
          spec.twelve_lead = false;
          spec.rr_interval_s = tr.uniform(0.6, 1.2);
          spec.apnea_minutes.assign(apnea.begin() + static_cast<std::ptrdiff_t>(i * sz.apnea_minutes),
                                    apnea.begin() + static_cast<std::ptrdiff_t>((i + 1) * sz.apnea_minutes));
          std::vector<int> mins;
          for (bool b : spec.apnea_minutes) mins.push_back(b ? 1 : 0);
          label = {{"minutes", mins}};
        } else {
          std::tie(spec, label) = t.make(split, i, tr);
        }
        const std::uint64_t rec_seed = tr.engine()();
        const SynthOutput o = synth_ecg(spec, rec_seed, patient, id);
        if (t.spec.kind == TaskKind::kDetection) label["peaks"] = o.truth.r_peaks;
        if (t.spec.kind == TaskKind::kSurvival) {
          label["time"] = o.truth.event_time_years;
          label["event"] = o.truth.event ? 1 : 0;
        }
        label["patient"] = patient;
        labels[id] = label;
        write_record(dir / "records" / (std::string(id) + ".xrec"), o.record);
        ids.push_back(id);
      }
      write_json(dir / (split + ".json"), ids);
    }
    write_labels(dir / "labels.json", labels);
    TaskSpec rel = t.spec;
    rel.corpus = ".";
    rel.train = "train.json";
    rel.val = "val.json";
    rel.test = "test.json";
    write_json(dir / "task.json", to_json(rel));
    suite["tasks"].push_back(t.spec.id + "/task.json");
  }
  write_json(out_dir / "suite.json", suite);
}

// ---- scaling -------------------------------------------------------------------------

Tensor attention_reference(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv) {
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::size_t n = x.dim(0), e = x.dim(1);
  const Tensor q = matmul(x, wq), k = matmul(x, wk), v = matmul(x, wv);
  Tensor s({n, n});
  Eigen::Map<Mat> sm(s.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  const Eigen::Map<const Mat> qm(q.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(e));
  const Eigen::Map<const Mat> km(k.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(e));
  sm.noalias() = qm * km.transpose();
  sm *= 1.0 / std::sqrt(static_cast<double>(e));
  for (Eigen::Index r = 0; r < sm.rows(); ++r) {
    auto row = sm.row(r);
    row.array() = (row.array() - row.maxCoeff()).exp();
    row /= row.sum();
  }
  return matmul(s, v);
}

std::vector<ScalingRow> scaling_bench(const std::vector<std::size_t>& lengths, const EncoderConfig& cfg,
                                      std::size_t repeats, std::uint64_t seed) {
  if (!std::is_sorted(lengths.begin(), lengths.end())) throw ConfigError("scaling: lengths must be ascending");
  if (repeats == 0) throw ConfigError("scaling: repeats must be positive");
  cfg.validate();
  Rng rng(seed);
  const ParamSet enc = init_encoder(cfg, rng);
  const std::size_t e = cfg.embed_dim;
  auto rand = [&](Shape s, double sd) {
    Tensor t(std::move(s));
    for (double& v : t.values()) v = rng.normal(0.0, sd);
    return t;
  };
  const double ws = 1.0 / std::sqrt(static_cast<double>(e));
  const Tensor wq = rand({e, e}, ws), wk = rand({e, e}, ws), wv = rand({e, e}, ws);

  auto measure = [&](const std::string& model, std::size_t n, const std::function<void()>& fn) {
    ScalingRow row;
    row.model = model;
    row.n = n;
    try {
      std::vector<double> ms;
      std::size_t peak = 0;
      for (std::size_t r = 0; r < repeats; ++r) {
        const std::size_t live0 = Arena::live_bytes();
        Arena::reset_peak();
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        peak = std::max(peak, Arena::peak_bytes() - live0);
      }
      std::sort(ms.begin(), ms.end());
      row.encode_ms = ms[ms.size() / 2];
      row.peak_bytes = peak;
    } catch (const std::bad_alloc&) {
      row.ok = false;
      spdlog::warn("scaling: {} out of memory at N={}", model, n);
    }
    spdlog::info("scaling: {} N={} {:.2f} ms {} bytes", model, n, row.encode_ms, row.peak_bytes);
    return row;
  };

  std::vector<ScalingRow> rows;
  for (std::size_t n : lengths) {
    const Tensor patches = rand({n, cfg.patch_width()}, 0.3);
    rows.push_back(measure("xlstm", n, [&] { (void)encode_patches(cfg, enc, patches); }));
    const Tensor x = rand({n, e}, 1.0);
    rows.push_back(measure("attention", n, [&] { (void)attention_reference(x, wq, wk, wv); }));
  }
  return rows;
}

void write_scaling_csv(const std::vector<ScalingRow>& rows, const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::trunc);
  out << "model,N,encode_ms,peak_bytes,status\n";
  for (const auto& r : rows)
    out << r.model << ',' << r.n << ',' << r.encode_ms << ',' << r.peak_bytes << ',' << (r.ok ? "ok" : "failed") << '\n';
}

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ContractError("loglog_slope: need >= 2 paired points");
  double mx = 0.0, my = 0.0;
  const auto n = static_cast<double>(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += std::log(x[i]) / n;
    my += std::log(y[i]) / n;
  }
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
    sxx += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
  }
  return sxy / sxx;
}

}  // namespace xecg
