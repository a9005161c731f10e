#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "xecg/heads.hpp"
#include "xecg/metrics.hpp"

namespace xecg {

inline constexpr int kSchemaVersion = 1;

enum class TaskKind { kClassification, kSegmentation, kDetection, kRegression, kSurvival };
const char* to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

struct TaskSpec {
  std::string id;
  TaskKind kind = TaskKind::kClassification;
  bool multiclass = false;  // classification only: softmax over out_dim classes
  std::size_t out_dim = 1;  // classes; ignored for the other kinds
  std::filesystem::path corpus;  // directory holding records/ and labels.json
  std::filesystem::path train, val, test;  // JSON arrays of record ids
  AdaptPlan plan;
  std::string metric = "auroc";  // auroc | macro_f1 | smape | rpeak_f1 | c_index
  bool one_minus = false;        // normalisation: value = 1 - raw

  HeadKind head_kind() const;
  /// Throws ConfigError when the metric does not fit the kind or a split file is missing.
  void validate() const;
};

/// Relative paths resolve against base_dir. Errors name the offending field.
TaskSpec task_spec_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir,
                             const std::string& where = "task");
nlohmann::json to_json(const TaskSpec& t);

/// "preset" uses each task's own plan mode.
enum class ModeChoice { kPreset, kLinearProbe, kFinetune };

struct RunManifest {
  std::string model = "xecg";
  std::filesystem::path checkpoint;  // empty: randomly initialised encoder from `encoder`
  EncoderConfig encoder;             // used only without a checkpoint
  std::vector<TaskSpec> tasks;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<ModeChoice> modes{ModeChoice::kPreset};
  std::filesystem::path out_dir = "results";
  std::string hardware_note;
  void validate() const;
};

/// Keys: schema_version, model, checkpoint, encoder, tasks (objects or paths to task
/// JSON files), seeds, modes, out, hardware_note.
RunManifest run_manifest_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);

struct SplitPreset {
  std::string name;
  std::map<std::string, std::vector<std::string>> splits;
  /// Throws ConfigError unless every pair of splits is disjoint.
  void validate() const;
};
/// Inter-patient DS1/DS2 split with records 114 and 203 held out of DS1 for validation.
SplitPreset mitbih_preset();
/// Patient-level random split; fractions are train and val, test takes the rest.
SplitPreset random_split(std::vector<std::string> ids, double train_fraction, double val_fraction, std::uint64_t seed);

// ---- results ---------------------------------------------------------------------------

struct ResultRow {
  std::string model;
  std::string task;
  std::uint64_t seed = 0;
  std::string mode;
  std::string metric_name;
  double value = 0.0;  // normalised, higher is better
  double raw = 0.0;
  double runtime_s = 0.0;
  std::size_t peak_mem_bytes = 0;
  bool ok = true;
  std::string reason;
  std::string hash;  // FNV-1a over the row without this field
};

nlohmann::json to_json(const ResultRow& r);
ResultRow result_from_json(const nlohmann::json& j);
std::string content_hash(const ResultRow& r);
/// Appends one JSON line; the hash is filled in here.
void append_result(const std::filesystem::path& file, ResultRow row);
/// Reads a .jsonl file or every .jsonl file in a directory (sorted by name).
/// Throws ScoringError on a hash mismatch.
std::vector<ResultRow> read_results(const std::filesystem::path& path);

struct SuiteReport {
  std::vector<ResultRow> rows;
  std::map<std::string, std::map<std::string, TaskScore>> scores;  // [model][task]
  std::map<std::string, double> bench_scores;
  RankTable table;
  std::size_t failures = 0;
};

/// Recomputes every aggregate from raw rows; failed rows are counted, not scored.
/// Models are keyed "<model>/<mode>".
SuiteReport aggregate(const std::vector<ResultRow>& rows);
/// score.csv (model, bench_score, mean_rank) and tasks.csv (model, task, metric, mean, sd, n, rank).
void write_score_report(const SuiteReport& report, const std::filesystem::path& out_dir);

/// Loads labelled samples of one split.
std::vector<TaskSample> load_split(const TaskSpec& task, const std::filesystem::path& split_file);

/// Adapts and evaluates every (task, seed, mode); appends rows to out_dir/results.jsonl
/// and aggregates. A failing run is recorded with its reason and the suite continues.
SuiteReport run_suite(const RunManifest& manifest, std::size_t threads = 1);

// ---- synthetic suite -------------------------------------------------------------------

struct SynthSizes {
  std::size_t train = 60;
  std::size_t val = 21;
  std::size_t test = 60;
  std::size_t rpeak_train = 8;
  std::size_t rpeak_val = 2;
  std::size_t rpeak_test = 8;
  std::size_t rpeak_records = 5;  // recordings per R-peak patient
  double record_s = 10.0;
  double rpeak_s = 20.0;
  std::size_t apnea_minutes = 3;
  double apnea_prevalence = 0.4;
  void validate() const;
};
SynthSizes synth_sizes_from_json(const nlohmann::json& j);

/// Writes five task corpora (rhythm, rpeak, apnea, age, survival) with disjoint
/// patient pools under out_dir/<task>/ plus suite.json listing their task specs.
/// Identical seeds give byte-identical trees.
void synth_suite(std::uint64_t seed, const SynthSizes& sizes, const std::filesystem::path& out_dir);

// ---- scaling ---------------------------------------------------------------------------

struct ScalingRow {
  std::string model;  // "xlstm" or "attention"
  std::size_t n = 0;
  double encode_ms = 0.0;  // median
  std::size_t peak_bytes = 0;
  bool ok = true;
};

/// Single-head softmax self-attention with E x E projections; materialises the N x N scores.
Tensor attention_reference(const Tensor& x, const Tensor& wq, const Tensor& wk, const Tensor& wv);

/// Median wall time over `repeats` forward passes and arena peak bytes per length.
std::vector<ScalingRow> scaling_bench(const std::vector<std::size_t>& lengths, const EncoderConfig& cfg,
                                      std::size_t repeats = 5, std::uint64_t seed = 0);
void write_scaling_csv(const std::vector<ScalingRow>& rows, const std::filesystem::path& file);
/// Least-squares slope of log(y) on log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace xecg
