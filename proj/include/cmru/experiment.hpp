// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// Experiment plumbing: the config file schema, per-seed execution with its
// on-disk layout, and the summary table rebuilt from the metric logs.
//
// Layout under <root>/<output_dir>:
//   config.json      canonical config (every key, defaults filled in)
//   manifest.json    config hash, provenance, per-seed status
//   seed_<s>/metrics.jsonl, seed_<s>/best.ckpt
//   summary.txt, summary.csv

#pragma once

#include "cmru/train.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace cmru {

struct ExperimentConfig {
  std::string name = "experiment";
  ModelConfig model;
  TaskSpec task;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::string output_dir;  // relative to the output root; empty means `name`

  void validate() const {
    if (name.empty()) throw ConfigError("name", "must not be empty");
    if (seeds.empty()) throw ConfigError("seeds", "need at least one seed");
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (std::size_t k = i + 1; k < seeds.size(); ++k)
        if (seeds[i] == seeds[k]) throw ConfigError("seeds", "duplicate seed " + std::to_string(seeds[i]));
    bind_task_dims(model, task).validate();
    task.validate();
    train.validate();
    if (train.anneal.enabled && !model.is_cmru_family()) throw ConfigError("train.anneal", "requires a CMRU-family cell");
    if (model.pooling == Pooling::none) throw ConfigError("model.pooling", "tasks here need a pooled prediction");
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"name", c.name}, {"model", c.model}, {"task", c.task}, {"train", c.train}, {"seeds", c.seeds}, {"output_dir", c.output_dir}};
}

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, "", {"name", "model", "task", "train", "seeds", "output_dir"});
  ExperimentConfig c;
  detail::read_opt(j, "name", "", c.name);
  detail::read_opt(j, "output_dir", "", c.output_dir);
  if (j.contains("seeds")) {
    try {
      c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("seeds", e.what());
    }
  }
  if (!j.contains("task")) throw ConfigError("task", "missing");
  c.task = task_spec_from_json(j["task"]);
  if (j.contains("model")) {
    nlohmann::json m = j["model"];
    if (!m.is_object()) throw ConfigError("model", "expected an object");
    // Feature and class counts come from the task unless given explicitly.
    if (!m.contains("input_dim")) m["input_dim"] = c.task.features();
    if (!m.contains("output_dim")) m["output_dim"] = c.task.outputs();
    c.model = model_config_from_json(m);
  } else {
    c.model = bind_task_dims(c.model, c.task);
  }
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  c.validate();
  return c;
}

inline ExperimentConfig parse_experiment_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
  return experiment_config_from_json(j);
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_experiment_config(ss.str());
}

inline std::string canonical_config(const ExperimentConfig& c) { return nlohmann::json(c).dump(2); }

// FNV-1a 64 over the canonical config text.
inline std::string config_hash(const ExperimentConfig& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : canonical_config(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Output layout
// ---------------------------------------------------------------------------

inline constexpr const char* kOutputRootEnv = "CMRU_OUTPUT_ROOT";

inline std::filesystem::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? std::filesystem::path(env) : std::filesystem::path("runs");
}

inline std::filesystem::path experiment_dir(const ExperimentConfig& c, const std::filesystem::path& root) {
  const std::filesystem::path rel(c.output_dir.empty() ? c.name : c.output_dir);
  return rel.is_absolute() ? rel : root / rel;
}

inline std::filesystem::path seed_dir(const std::filesystem::path& dir, std::uint64_t seed) {
  return dir / ("seed_" + std::to_string(seed));
}

class OutputExists : public std::runtime_error {
 public:
  explicit OutputExists(const std::string& path)
      : std::runtime_error("output directory " + path + " already exists (use --force to overwrite)") {}
};

// ---------------------------------------------------------------------------
// Summary
// ---------------------------------------------------------------------------

struct SeedRow {
  std::uint64_t seed = 0;
  std::string status;
  std::int64_t iterations = 0;
  std::optional<std::int64_t> best_step;
  std::optional<double> test;
};

struct Summary {
  std::string name;
  std::string metric;
  std::vector<SeedRow> rows;
  int n = 0;  // seeds with a test value
  double mean = 0.0, min = 0.0, max = 0.0;
};

// Mean, min and max over the seeds that report a test value, in seed order.
inline void finish_summary(Summary& s) {
  s.n = 0;
  double sum = 0.0;
  s.min = std::numeric_limits<double>::infinity();
  s.max = -std::numeric_limits<double>::infinity();
  for (const auto& r : s.rows) {
    if (!r.test) continue;
    ++s.n;
    sum += *r.test;
    s.min = std::min(s.min, *r.test);
    s.max = std::max(s.max, *r.test);
  }
  if (s.n == 0) {
    s.mean = s.min = s.max = std::numeric_limits<double>::quiet_NaN();
  } else {
    s.mean = sum / s.n;
  }
}

// Reads the "test" line of one metrics log.
inline std::optional<double> test_value_from_log(const std::filesystem::path& log, std::string* metric = nullptr) {
  std::ifstream is(log);
  if (!is) return std::nullopt;
  std::optional<double> v;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    if (j.at("split") != "test") continue;
    v = j.at("value").get<double>();
    if (metric) *metric = j.at("metric_name").get<std::string>();
  }
  return v;
}

// Rebuilds the summary from the manifest and the raw logs on disk.
inline Summary summarize_directory(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw std::runtime_error("no manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(is);
  Summary s;
  s.name = manifest.at("name").get<std::string>();
  s.metric = manifest.at("metric").get<std::string>();
  for (const auto& r : manifest.at("runs")) {
    SeedRow row;
    row.seed = r.at("seed").get<std::uint64_t>();
    row.status = r.at("status").get<std::string>();
    row.iterations = r.at("iterations").get<std::int64_t>();
    if (!r.at("best_step").is_null()) row.best_step = r.at("best_step").get<std::int64_t>();
    row.test = test_value_from_log(seed_dir(dir, row.seed) / "metrics.jsonl");
    s.rows.push_back(row);
  }
  finish_summary(s);
  return s;
}

inline std::string format_metric(double v, const std::string& metric) {
  char buf[64];
  if (std::isnan(v)) return "-";
  if (metric == "accuracy")
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  else
    std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::string full_precision(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Aligned text: accuracy in percent, MAE as is.
inline std::string summary_text(const Summary& s) {
  std::ostringstream os;
  const std::string unit = s.metric == "accuracy" ? "accuracy (%)" : s.metric;
  os << s.name << "  test " << unit << "\n";
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %-14s %10s %10s %10s\n", "seed", "status", "iters", "best_step", "test");
  os << buf;
  for (const auto& r : s.rows) {
    std::snprintf(buf, sizeof buf, "%-10llu %-14s %10lld %10s %10s\n", static_cast<unsigned long long>(r.seed), r.status.c_str(),
                  static_cast<long long>(r.iterations), r.best_step ? std::to_string(*r.best_step).c_str() : "-",
                  r.test ? format_metric(*r.test, s.metric).c_str() : "-");
    os << buf;
  }
  std::snprintf(buf, sizeof buf, "mean %s  [min %s; max %s]  over %d seed(s)\n", format_metric(s.mean, s.metric).c_str(),
                format_metric(s.min, s.metric).c_str(), format_metric(s.max, s.metric).c_str(), s.n);
  os << buf;
  return os.str();
}

// One row per seed, then the aggregate row with seed "all". Values unscaled.
inline std::string summary_csv(const Summary& s) {
  std::ostringstream os;
  os << "experiment,metric,seed,status,iterations,best_step,test,mean,min,max\n";
  for (const auto& r : s.rows)
    os << s.name << ',' << s.metric << ',' << r.seed << ',' << r.status << ',' << r.iterations << ','
       << (r.best_step ? std::to_string(*r.best_step) : "") << ',' << (r.test ? full_precision(*r.test) : "") << ",,,\n";
  os << s.name << ',' << s.metric << ",all,,,,," << full_precision(s.mean) << ',' << full_precision(s.min) << ','
     << full_precision(s.max) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct ExperimentOptions {
  std::filesystem::path root = output_root();
  bool force = false;
  int parallel_seeds = 1;
  bool verbose = false;
  std::string provenance = "unknown";
};

struct ExperimentResult {
  std::filesystem::path dir;
  std::vector<RunRecord> runs;  // in seed order
  Summary summary;

  bool ok() const {
    return std::all_of(runs.begin(), runs.end(), [](const RunRecord& r) { return r.ok(); });
  }
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::trunc);
  if (!os || !(os << text)) throw std::runtime_error("cannot write " + p.string());
}

inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const ExperimentOptions& opts = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  if (opts.parallel_seeds < 1) throw std::invalid_argument("--parallel-seeds must be >= 1");
  ExperimentResult res;
  res.dir = experiment_dir(cfg, opts.root);
  if (fs::exists(res.dir)) {
    if (!opts.force) throw OutputExists(res.dir.string());
    fs::remove_all(res.dir);
  }
  fs::create_directories(res.dir);
  write_text(res.dir / "config.json", canonical_config(cfg) + "\n");

  // Shared across seeds: generated samples are pure functions of the task spec.
  const TaskData data = make_task_data(cfg.task);
  const auto& seeds = cfg.seeds;
  res.runs.resize(seeds.size());
  std::vector<std::string> errors(seeds.size());
  std::atomic<std::size_t> next{0};
  std::mutex print_mu;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < seeds.size();) {
      const fs::path sd = seed_dir(res.dir, seeds[i]);
      try {
        fs::create_directories(sd);
        RunOptions ro;
        ro.log_path = (sd / "metrics.jsonl").string();
        ro.checkpoint_path = (sd / "best.ckpt").string();
        ro.verbose = opts.verbose;
        res.runs[i] = run_training(cfg.model, cfg.task, cfg.train, seeds[i], ro, &data);
      } catch (const std::exception& e) {
        res.runs[i].status = RunStatus::diverged;
        res.runs[i].failure = e.what();
      }
      if (opts.verbose) {
        std::lock_guard lock(print_mu);
        const auto& r = res.runs[i];
        std::fprintf(stderr, "[%s] seed %llu: %s%s%s\n", cfg.name.c_str(), static_cast<unsigned long long>(seeds[i]),
                     status_name(r.status), r.failure.empty() ? "" : " - ", r.failure.c_str());
      }
    }
  };
  const int n_threads = std::min<int>(opts.parallel_seeds, static_cast<int>(seeds.size()));
  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }

  nlohmann::ordered_json manifest;
  manifest["name"] = cfg.name;
  manifest["config_hash"] = config_hash(cfg);
  manifest["provenance"] = opts.provenance;
  manifest["metric"] = metric_name(cfg.task.target());
  manifest["parallel_seeds"] = n_threads;
  manifest["runs"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    const auto& r = res.runs[i];
    nlohmann::ordered_json e;
    e["seed"] = seeds[i];
    e["status"] = status_name(r.status);
    e["failure"] = r.failure;
    e["iterations"] = r.iterations;
    e["best_step"] = r.best_step ? nlohmann::ordered_json(*r.best_step) : nlohmann::ordered_json(nullptr);
    e["seconds"] = r.seconds;
    manifest["runs"].push_back(e);
  }
  write_text(res.dir / "manifest.json", manifest.dump(2) + "\n");

  res.summary = summarize_directory(res.dir);
  write_text(res.dir / "summary.txt", summary_text(res.summary));
  write_text(res.dir / "summary.csv", summary_csv(res.summary));
  return res;
}

}  // namespace cmru
