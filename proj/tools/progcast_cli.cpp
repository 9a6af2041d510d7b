/*
 * Copyright 2026 The Progcast Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// progcast: command-line front end.
//
//   progcast generate   --config cfg.json --out cohort.jsonl
//   progcast filter     --input cohort.jsonl --out kept.jsonl
//   progcast train      --config cfg.json [--split N]
//   progcast gridsearch --config cfg.json [--split N]
//   progcast evaluate   --config cfg.json [--no-bias-reduction]
//   progcast run        --config cfg.json [--no-expansion] [--no-bias-reduction]
//   progcast report     --out run_dir
//
// PROGCAST_WORKERS sets the number of worker threads. The exit status is 0
// only when the requested work finished completely.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "progcast/experiments.hpp"

namespace fs = std::filesystem;
using namespace progcast;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool no_expansion = false;
  bool no_bias_reduction = false;
  std::string out;
  bool verbose = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c, bool experiment_flags) {
  cmd->add_option("--config", c.config, "Experiment config (JSON)");
  cmd->add_option("--seed", c.seed, "Master seed override");
  cmd->add_option("--out", c.out, "Output path or directory");
  cmd->add_flag("-v,--verbose", c.verbose, "Log progress");
  cmd->add_flag("-q,--quiet", c.quiet, "Suppress warnings");
  if (experiment_flags) {
    cmd->add_flag("--no-expansion", c.no_expansion, "Train with baseline nows only");
    cmd->add_flag("--no-bias-reduction", c.no_bias_reduction,
                  "Score every eligible now instead of pseudo test sets");
  }
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_experiment_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.no_expansion) cfg.no_expansion = true;
  if (c.no_bias_reduction) cfg.no_bias_reduction = true;
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.validate();
  return cfg;
}

void apply_verbosity(const Common& c) {
  if (c.quiet) set_log_level(LogLevel::kQuiet);
  if (c.verbose) set_log_level(LogLevel::kInfo);
}

void print_exclusions(const Cohort& cohort) {
  const ExclusionCounts& e = cohort.excluded;
  nlohmann::json j = {{"retained", cohort.subjects.size()},
                      {"excluded",
                       {{"malformed", e.malformed},
                        {"ad_baseline", e.ad_baseline},
                        {"cn_to_ad", e.cn_to_ad},
                        {"cn_mci_cn_reversion", e.cn_mci_cn_reversion},
                        {"mci_to_cn_reversion", e.mci_to_cn_reversion},
                        {"no_follow_up", e.no_follow_up},
                        {"total", e.total()}}},
                      {"diagnostics", cohort.diagnostics}};
  std::cout << j.dump(2) << '\n';
}

int cmd_generate(const Common& c) {
  ExperimentConfig cfg = resolve(c);
  GeneratorConfig gen = cfg.generator;
  if (c.seed) gen.seed = *c.seed;
  const std::string out = c.out.empty() ? "cohort.jsonl" : c.out;
  const auto subjects = generate_synthetic_cohort(gen);
  {
    std::ofstream f(out);
    if (!f) throw Error("cannot write " + out);
    write_cohort_jsonl(f, subjects);
  }
  std::ofstream summary(fs::path(out).replace_extension(".summary.csv"));
  write_summary_csv(summary, filter_cohort(subjects).subjects, gen.max_follow_up_years);
  std::cout << "wrote " << subjects.size() << " subjects to " << out << '\n';
  return 0;
}

int cmd_filter(const Common& c, const std::string& input) {
  std::ifstream in(input);
  if (!in) throw Error("cannot read " + input);
  const Cohort cohort = filter_cohort(read_cohort_jsonl(in));
  if (!c.out.empty()) {
    std::ofstream out(c.out);
    if (!out) throw Error("cannot write " + c.out);
    write_cohort_jsonl(out, cohort.subjects);
  }
  print_exclusions(cohort);
  return 0;
}

int cmd_train(const Common& c, int split, bool grid_only) {
  const ExperimentConfig cfg = resolve(c);
  if (split < 0 || split >= cfg.n_splits) throw Error("--split outside [0, n_splits)");
  const Cohort cohort = load_cohort(cfg);
  const SplitData data = prepare_split(cohort.subjects, cfg, split);
  const GridResult grid = run_grid_search(data, cfg);
  const auto points = enumerate_grid(cfg.grid, data.base_model);
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t g = 0; g < points.size(); ++g) {
    rows.push_back({{"model", points[g].label()}, {"criterion", grid.mean_criterion[g]}});
  }
  nlohmann::json report = {{"split", split}, {"selected", grid.best.label()}, {"grid", rows}};
  if (!grid_only) {
    nlohmann::json checkpoints = nlohmann::json::array();
    const int folds = static_cast<int>(data.folds.size());
    for (int f = 0; f < folds; ++f) {
      for (int m = 0; m < cfg.seeds_per_fold; ++m) {
        const TrainedModel t = train_fold_model(data, cfg, grid.best, f, m);
        checkpoints.push_back({{"checkpoint", t.checkpoint}, {"criterion", t.criterion}});
      }
    }
    report["checkpoints"] = checkpoints;
  }
  std::cout << report.dump(2) << '\n';
  return 0;
}

int cmd_run(const Common& c, bool allow_training) {
  const ExperimentConfig cfg = resolve(c);
  RunOptions options;
  options.allow_training = allow_training;
  const nlohmann::json manifest = run_experiment(cfg, options);
  emit_report(cfg.output_dir);
  std::cout << "results in " << cfg.output_dir << " (" << manifest.at("splits").size()
            << " splits)\n";
  return manifest.at("status") == "complete" ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Longitudinal progression forecasting experiments"};
  app.require_subcommand(1);

  Common c;
  std::string input;
  int split = 0;

  auto* generate = app.add_subcommand("generate", "Write a synthetic cohort as JSON lines");
  add_common(generate, c, false);

  auto* filter = app.add_subcommand("filter", "Apply the cohort inclusion rules");
  filter->add_option("--input", input, "Cohort JSON lines")->required();
  filter->add_option("--out", c.out, "Write the retained subjects here");
  filter->add_flag("-q,--quiet", c.quiet, "Suppress warnings");

  auto* train = app.add_subcommand("train", "Train the ensemble of one split");
  add_common(train, c, true);
  train->add_option("--split", split, "Split index");

  auto* gridsearch = app.add_subcommand("gridsearch", "Select the architecture for one split");
  add_common(gridsearch, c, true);
  gridsearch->add_option("--split", split, "Split index");

  auto* evaluate = app.add_subcommand("evaluate", "Score existing checkpoints");
  add_common(evaluate, c, true);

  auto* run = app.add_subcommand("run", "Train, evaluate and report");
  add_common(run, c, true);

  auto* report = app.add_subcommand("report", "Rebuild report tables of a run directory");
  report->add_option("--out", c.out, "Run directory")->required();

  CLI11_PARSE(app, argc, argv);
  apply_verbosity(c);

  try {
    if (*generate) return cmd_generate(c);
    if (*filter) return cmd_filter(c, input);
    if (*train) return cmd_train(c, split, false);
    if (*gridsearch) return cmd_train(c, split, true);
    if (*evaluate) return cmd_run(c, false);
    if (*run) return cmd_run(c, true);
    if (*report) {
      emit_report(c.out);
      std::cout << "report written to " << (fs::path(c.out) / "report").string() << '\n';
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "progcast: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
