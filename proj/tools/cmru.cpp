// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The cmru Authors.
//
// cmru run <config> [--force] [--parallel-seeds N]
// cmru verify [--suite name]
// cmru gen <task> <out> [--split s] [--count n] [--seed s]
//
// CMRU_OUTPUT_ROOT overrides the output root (default ./runs).

#include "cmru/experiment.hpp"
#include "cmru/verify.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#ifndef CMRU_PROVENANCE
#define CMRU_PROVENANCE "unknown"
#endif

namespace {

using namespace cmru;

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

int cmd_run(const std::string& path, bool force, int parallel, bool quiet) {
  ExperimentConfig cfg;
  try {
    cfg = load_experiment_config(path);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error in %s: %s\n", path.c_str(), e.what());
    return kExitUsage;
  }
  ExperimentOptions opts;
  opts.force = force;
  opts.parallel_seeds = parallel;
  opts.verbose = !quiet;
  opts.provenance = std::string("cmru ") + CMRU_PROVENANCE;
  ExperimentResult res;
  try {
    res = run_experiment(cfg, opts);
  } catch (const OutputExists& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kExitUsage;
  }
  std::cout << summary_text(res.summary);
  std::cout << "artifacts: " << res.dir.string() << "\n";
  return res.ok() ? 0 : kExitFailure;
}

int cmd_verify(const std::string& suite) {
  std::vector<std::string> names = suite.empty() ? verify::suite_names() : std::vector<std::string>{suite};
  bool all = true;
  for (const auto& n : names) {
    const auto r = verify::run_suite(n);
    for (const auto& l : r.lines) std::cout << "  " << l << "\n";
    std::printf("%s %s (%.2fs)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds);
    std::fflush(stdout);
    all = all && r.passed;
  }
  return all ? 0 : kExitFailure;
}

TaskSpec task_from_argument(const std::string& arg) {
  if (std::filesystem::exists(arg)) {
    std::ifstream is(arg);
    const auto j = nlohmann::json::parse(is);
    return j.contains("task") ? task_spec_from_json(j["task"]) : task_spec_from_json(j);
  }
  return task_spec_from_json(nlohmann::json{{"kind", arg}});
}

int cmd_gen(const std::string& task_arg, const std::string& out, const std::string& split_name_arg, int count,
            std::optional<std::uint64_t> seed) {
  TaskSpec spec = task_from_argument(task_arg);
  if (seed) spec.seed = *seed;
  if (spec.is_mnist()) throw ConfigError("task.kind", "MNIST is read from IDX files, not generated");
  const Split split = split_name_arg == "train" ? Split::train : split_name_arg == "validation" ? Split::validation : Split::test;
  const Dataset data(spec, split);
  const auto h = write_dataset(out, data, count < 0 ? data.size() : count);
  std::printf("wrote %llu %s samples (L %u..%u, seed %llu) to %s\n", static_cast<unsigned long long>(h.count),
              split_name(split), h.length_min, h.length_max, static_cast<unsigned long long>(h.seed), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Persistent-memory recurrent cells: experiments and invariant checks"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Train every seed of an experiment config");
  std::string config;
  bool force = false, quiet = false;
  int parallel = 1;
  run->add_option("config", config, "Experiment config (JSON)")->required();
  run->add_flag("--force", force, "Overwrite an existing output directory");
  run->add_option("--parallel-seeds", parallel, "Seeds trained concurrently")->check(CLI::PositiveNumber);
  run->add_flag("-q,--quiet", quiet, "No per-evaluation progress on stderr");

  auto* ver = app.add_subcommand("verify", "Run the invariant suites");
  std::string suite;
  ver->add_option("--suite", suite, "Single suite")->check(CLI::IsMember(verify::suite_names()));

  auto* gen = app.add_subcommand("gen", "Write a generated dataset file");
  std::string task_arg, out, split = "train";
  int count = -1;
  std::optional<std::uint64_t> seed;
  gen->add_option("task", task_arg, "Task kind or JSON task spec")->required();
  gen->add_option("out", out, "Output path")->required();
  gen->add_option("--split", split, "Split to write")->check(CLI::IsMember({"train", "validation", "test"}));
  gen->add_option("--count", count, "Samples to write (default: the whole split)");
  gen->add_option("--seed", seed, "Overrides the task seed");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*run) return cmd_run(config, force, parallel, quiet);
    if (*ver) return cmd_verify(suite);
    if (*gen) return cmd_gen(task_arg, out, split, count, seed);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitUsage;
}
