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

// Experiment orchestration: repeated stratified splits, k-fold x seed
// ensembles, grid search, resumable checkpoints and metric tables.
//
// Output directory layout:
//   manifest.json            config hash, seeds, selections, artifact paths
//   cohort_summary.csv       label counts per group and follow-up year
//   metrics.csv              aggregated over splits
//   split_NNN/checkpoints/   fold<f>_seed<m>.{json,bin,log.csv}
//   split_NNN/metrics.csv    per-split cells (pseudo-set mean / stderr)
//   report/                  per-metric tables, delta_auroc.csv, summary.txt

#ifndef PROGCAST_EXPERIMENTS_HPP_
#define PROGCAST_EXPERIMENTS_HPP_

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "progcast/cohort.hpp"
#include "progcast/evaluation.hpp"
#include "progcast/features.hpp"
#include "progcast/model.hpp"
#include "progcast/training.hpp"

namespace progcast {

inline constexpr const char* kToolVersion = "progcast 0.1.0";

struct GridAxes {
  std::vector<int> hidden = {128, 256};
  std::vector<int> heads = {1, 2};
  std::vector<int> layers = {1, 2};
  std::vector<int> classifier_hidden = {128, 0};  // [128, 3] and [3]

  std::size_t size() const {
    return hidden.size() * heads.size() * layers.size() * classifier_hidden.size();
  }
};

// Every grid point on top of `base` (which supplies token width, dropout and
// age statistics), hidden-major order. Throws Error on an empty axis.
std::vector<ModelConfig> enumerate_grid(const GridAxes& axes, const ModelConfig& base);

struct ScenarioRow {
  int history_start = 0;
  Frequency frequency = Frequency::kAnnual;
};

struct ExperimentConfig {
  FeatureSchema schema = synthetic_schema();
  GeneratorConfig generator;
  std::string cohort_path;  // when set, read instead of generating

  int n_splits = 10;
  double test_fraction = 0.2;
  int k_folds = 5;
  int seeds_per_fold = 5;
  GridAxes grid;
  double dropout = 0.5;
  TrainingConfig training;

  std::vector<ModalityCase> modality_cases = {ModalityCase::complete(), ModalityCase::mri_only()};
  std::vector<ScenarioRow> scenarios = {{0, Frequency::kAnnual},
                                        {-1, Frequency::kAnnual},
                                        {-2, Frequency::kAnnual},
                                        {-2, Frequency::kBiennial},
                                        {-3, Frequency::kAnnual}};
  int follow_up_years = 5;
  int n_pseudo = 20;
  int ece_bins = 10;

  bool no_expansion = false;
  bool no_bias_reduction = false;

  std::uint64_t seed = 1;
  std::string output_dir = "progcast_run";
  // Where checkpoints are read and written; defaults to the output
  // directory. Sharing it lets an evaluation-only ablation reuse models.
  std::string checkpoint_dir;

  void validate() const;
  nlohmann::json to_json() const;
  // Relative cohort paths are resolved against base_dir.
  static ExperimentConfig from_json(const nlohmann::json& j, const std::string& base_dir = "");
  // Hash of everything that can change a reported number.
  std::string hash() const;
};

ExperimentConfig load_experiment_config(const std::string& path);

// Generated or loaded cohort after the inclusion rules.
Cohort load_cohort(const ExperimentConfig& config);

// ---------------------------------------------------------------------------
// Per-split pieces, exposed for the CLI and tests.

struct SplitData {
  int index = 0;
  std::vector<SubjectHistory> train;
  std::vector<SubjectHistory> test;
  ImputationStats stats;
  ModelConfig base_model;  // token width, dropout, age statistics, schema hash
  // Indices into `train`; a single fold means "validate on the training set".
  std::vector<std::vector<std::size_t>> folds;
};

SplitData prepare_split(const std::vector<SubjectHistory>& cohort, const ExperimentConfig& config,
                        int split);

// Returns the criterion (minimum validation criterion) of one fold's model.
using GridTrainer = std::function<double(const ModelConfig& model, int fold)>;

struct GridResult {
  std::size_t best_index = 0;
  ModelConfig best;
  std::vector<double> mean_criterion;  // NaN where training failed
};

// Mean criterion over folds per grid point; picks the minimum. A point whose
// training throws is skipped with a warning. A one-point grid is returned
// without training.
GridResult run_grid_search(const std::vector<ModelConfig>& grid, int k_folds,
                           const GridTrainer& trainer);

// Trains (or loads from checkpoints) one fold x seed model.
struct TrainedModel {
  ModelParams params;
  double criterion = 0.0;
  std::string checkpoint;  // prefix relative to the checkpoint root
};

TrainedModel train_fold_model(const SplitData& data, const ExperimentConfig& config,
                              const ModelConfig& model, int fold, int model_seed,
                              bool allow_training = true);

// Grid search over the split's folds (seed 0), reusing checkpoints.
GridResult run_grid_search(const SplitData& data, const ExperimentConfig& config);

// One metric cell of the result tables.
struct CellKey {
  Diagnosis group = Diagnosis::kCN;
  int follow_up_year = 1;
  std::string modality_case;
  int history_start = 0;
  Frequency frequency = Frequency::kAnnual;
  Metric metric = Metric::kAuroc;

  auto operator<=>(const CellKey&) const = default;
};

struct CellValue {
  double mean = 0.0;
  double stderr_ = 0.0;
  int n_replicates = 0;
};

using MetricTable = std::vector<std::pair<CellKey, CellValue>>;

// Scores every (group, follow-up year, modality case, scenario) cell for
// one split with the given ensemble.
MetricTable evaluate_split(const SplitData& data, const ExperimentConfig& config,
                           std::span<const ModelParams> ensemble);

// group,follow_up_year,modality_case,history_start,frequency,metric,mean,stderr,n_replicates
void write_metric_table(const std::string& path, const MetricTable& table);
MetricTable read_metric_table(const std::string& path);

// Across splits: mean and standard error of the split means. With a single
// split the table is passed through (stderr over pseudo sets).
MetricTable aggregate_splits(const std::vector<MetricTable>& splits);

struct RunOptions {
  bool allow_training = true;  // false: every checkpoint must already exist
};

// Runs (or resumes) the whole experiment and writes manifest.json.
nlohmann::json run_experiment(const ExperimentConfig& config, const RunOptions& options = {});

// Writes report/ from an output directory's metrics.csv.
void emit_report(const std::string& output_dir);

}  // namespace progcast

#endif  // PROGCAST_EXPERIMENTS_HPP_
