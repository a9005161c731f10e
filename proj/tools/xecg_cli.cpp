// xecg command-line tool: pretrain, probe, finetune, evaluate, score, synth, scaling, inspect.
#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "xecg/bench.hpp"
#include "xecg/ssl.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace xecg;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;

struct Common {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t threads = 0;
  bool verbose = false;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path + ": " + e.what());
  }
}

fs::path base_of(const std::string& path) {
  const fs::path p(path);
  return p.has_parent_path() ? p.parent_path() : fs::path(".");
}

std::size_t thread_count(const Common& c) {
  if (c.threads > 0) return c.threads;
  if (const char* env = std::getenv("XECG_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

std::vector<EcgRecord> load_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw ConfigError("corpus: not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.path().extension() == ".xrec") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<EcgRecord> out;
  for (const auto& f : files) out.push_back(read_record(f));
  return out;
}

int cmd_pretrain(const std::string& cfg_path, const Common& c) {
  const json j = load_config(cfg_path);
  PretrainConfig cfg;
  try {
    cfg = pretrain_config_from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pretrain config: ") + e.what());
  }
  if (c.seed) cfg.seed = *c.seed;
  if (cfg.corpus.empty()) throw ConfigError("pretrain config.corpus: missing");
  const fs::path corpus = fs::path(cfg.corpus).is_absolute() ? fs::path(cfg.corpus) : base_of(cfg_path) / cfg.corpus;
  const auto records = load_corpus(corpus);
  std::vector<EcgRecord> usable;
  for (const auto& r : records) {
    const auto v = quality_filter(r);
    if (!v.keep) {
      spdlog::info("pretrain: excluding {} ({})", r.record_id, to_string(v.reason));
      continue;
    }
    usable.push_back(std::abs(r.fs - cfg.encoder.model_rate_hz) < 1e-9 ? r : resample(r, cfg.encoder.model_rate_hz));
  }
  const auto patients = group_by_patient(usable);
  const fs::path out = c.out.empty() ? fs::path("pretrain_out") : fs::path(c.out);
  fs::create_directories(out);
  std::ofstream(out / "config.json") << to_json(cfg).dump(1) << '\n';
  const PretrainResult res = pretrain(cfg, patients, out);
  const auto& last = res.steps.back().loss;
  std::printf("pretrained %zu steps on %zu patients; final %s\n", res.steps.size(), patients.size(), last.str().c_str());
  std::printf("checkpoints: %s, %s\n", (out / "student.xckp").c_str(), (out / "teacher.xckp").c_str());
  return 0;
}

int cmd_suite(const std::string& cfg_path, const Common& c, std::optional<ModeChoice> mode) {
  const json j = load_config(cfg_path);
  RunManifest m = run_manifest_from_json(j, base_of(cfg_path));
  if (mode) m.modes = {*mode};
  if (c.seed) m.seeds = {*c.seed};
  if (!c.out.empty()) m.out_dir = c.out;
  const SuiteReport rep = run_suite(m, thread_count(c));
  for (std::size_t i = 0; i < rep.table.models.size(); ++i)
    std::printf("%s bench_score %.6f mean_rank %.3f\n", rep.table.models[i].c_str(),
                rep.bench_scores.at(rep.table.models[i]), rep.table.mean_rank[i]);
  for (const auto& [model, tasks] : rep.scores)
    for (const auto& [task, ts] : tasks)
      std::printf("  %s %s %s %.4f +- %.4f (n=%zu)\n", model.c_str(), task.c_str(), ts.metric.c_str(), ts.mean(),
                  ts.sd(), ts.values.size());
  if (rep.failures) {
    std::fprintf(stderr, "%zu run(s) failed; see %s\n", rep.failures, (m.out_dir / "results.jsonl").c_str());
    return kExitFailure;
  }
  return 0;
}

int cmd_score(const std::string& path, const Common& c) {
  fs::path results = path, out;
  if (!fs::is_directory(path)) {
    if (!fs::exists(path)) throw ConfigError("score: no such file or directory " + path);
    if (fs::path(path).extension() == ".json") {
      const json j = load_config(path);
      if (!j.contains("results")) throw ConfigError("score config.results: missing");
      results = base_of(path) / j.at("results").get<std::string>();
      if (j.contains("out")) out = base_of(path) / j.at("out").get<std::string>();
    }
  }
  if (!c.out.empty()) out = c.out;
  if (out.empty()) out = fs::is_directory(results) ? results : results.parent_path();
  const SuiteReport rep = aggregate(read_results(results));
  write_score_report(rep, out);
  std::printf("model,bench_score,mean_rank\n");
  for (std::size_t i = 0; i < rep.table.models.size(); ++i)
    std::printf("%s,%.17g,%.17g\n", rep.table.models[i].c_str(), rep.bench_scores.at(rep.table.models[i]),
                rep.table.mean_rank[i]);
  return rep.failures ? kExitFailure : 0;
}

int cmd_synth(const std::string& cfg_path, const Common& c) {
  const json j = load_config(cfg_path);
  std::uint64_t seed = j.value("seed", std::uint64_t{0});
  if (c.seed) seed = *c.seed;
  const SynthSizes sizes = synth_sizes_from_json(j.value("sizes", json::object()));
  fs::path out = j.contains("out") ? base_of(cfg_path) / j.at("out").get<std::string>() : fs::path("synth");
  if (!c.out.empty()) out = c.out;
  synth_suite(seed, sizes, out);
  std::printf("synthetic suite (seed %llu) written to %s\n", static_cast<unsigned long long>(seed), out.c_str());
  return 0;
}

int cmd_scaling(const std::string& cfg_path, const Common& c) {
  const json j = load_config(cfg_path);
  EncoderConfig enc;
  enc.embed_dim = 64;
  if (j.contains("encoder")) enc = encoder_config_from_json(j.at("encoder"));
  std::vector<std::size_t> lengths = {256, 512, 1024, 2048, 4096, 8192};
  if (j.contains("lengths")) lengths = j.at("lengths").get<std::vector<std::size_t>>();
  const std::size_t repeats = j.value("repeats", std::size_t{5});
  std::uint64_t seed = j.value("seed", std::uint64_t{0});
  if (c.seed) seed = *c.seed;
  fs::path out = c.out.empty() ? fs::path("scaling.csv") : fs::path(c.out);
  if (fs::is_directory(out)) out /= "scaling.csv";
  const auto rows = scaling_bench(lengths, enc, repeats, seed);
  write_scaling_csv(rows, out);
  for (const char* model : {"xlstm", "attention"}) {
    std::vector<double> n, ms;
    for (const auto& r : rows)
      if (r.model == model && r.ok && r.encode_ms > 0.0) {
        n.push_back(static_cast<double>(r.n));
        ms.push_back(r.encode_ms);
      }
    if (n.size() >= 2) std::printf("%s log-log time slope %.3f\n", model, loglog_slope(n, ms));
  }
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_inspect(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("inspect: no such checkpoint " + path);
  const Checkpoint ck = read_checkpoint(path);
  std::printf("config: %s\n", ck.config.dump().c_str());
  std::printf("tensors: %zu, parameters: %zu, hash: %016llx\n", ck.params.size(), ck.params.scalar_count(),
              static_cast<unsigned long long>(params_hash(ck.params)));
  for (std::size_t i = 0; i < ck.params.size(); ++i)
    std::printf("  %-20s %s\n", ck.params.name(i).c_str(), shape_str(ck.params.value(i).shape()).c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"xecg: recurrent ECG encoder, self-supervised pretraining and benchmark harness"};
  app.require_subcommand(1);
  Common common;
  std::uint64_t seed_value = 0;
  app.add_option("--seed", seed_value, "override the config seed");
  app.add_option("--out", common.out, "output directory or file");
  app.add_option("--threads", common.threads, "worker threads (default XECG_THREADS or 1)");
  app.add_flag("-v,--verbose", common.verbose, "debug logging");

  std::string cfg;
  auto add = [&](const char* name, const char* help, bool required) {
    CLI::App* sub = app.add_subcommand(name, help);
    auto* opt = sub->add_option("config", cfg, "JSON config path");
    if (required) opt->required();
    sub->fallthrough();
    return sub;
  };
  auto* pretrain_cmd = add("pretrain", "self-supervised pretraining", true);
  auto* probe_cmd = add("probe", "linear probe over a run manifest", true);
  auto* finetune_cmd = add("finetune", "finetune over a run manifest", true);
  auto* evaluate_cmd = add("evaluate", "run a manifest with each task's preset mode", true);
  auto* score_cmd = add("score", "aggregate result files (directory, .jsonl or JSON config)", true);
  auto* synth_cmd = add("synth", "write the synthetic five-task suite", false);
  auto* scaling_cmd = add("scaling", "time and memory versus sequence length", false);
  auto* inspect_cmd = add("inspect", "print checkpoint metadata", true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }
  if (app.count("--seed")) common.seed = seed_value;
  spdlog::set_level(common.verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*pretrain_cmd) return cmd_pretrain(cfg, common);
    if (*probe_cmd) return cmd_suite(cfg, common, ModeChoice::kLinearProbe);
    if (*finetune_cmd) return cmd_suite(cfg, common, ModeChoice::kFinetune);
    if (*evaluate_cmd) return cmd_suite(cfg, common, std::nullopt);
    if (*score_cmd) return cmd_score(cfg, common);
    if (*synth_cmd) return cmd_synth(cfg, common);
    if (*scaling_cmd) return cmd_scaling(cfg, common);
    if (*inspect_cmd) return cmd_inspect(cfg);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const json::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}
