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

#include <gtest/gtest.h>

#include <atomic>
#include <cstdlib>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "progcast/common.hpp"
#include "progcast/experiments.hpp"
#include "test_util.hpp"

namespace progcast {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

TEST(Grid, DefaultAxesGiveSixteenDistinctPoints) {
  const ModelConfig base = testing::small_model(114);
  const auto grid = enumerate_grid(GridAxes{}, base);
  ASSERT_EQ(grid.size(), 16u);
  std::set<std::string> labels;
  for (const auto& m : grid) {
    labels.insert(m.label());
    EXPECT_EQ(m.token_width, 114);
    EXPECT_EQ(m.age_sd, base.age_sd);
  }
  EXPECT_EQ(labels.size(), 16u);
  EXPECT_EQ(grid.front().label(), "d128-h1-l1-c128x3");

  GridAxes one{{16}, {2}, {1}, {0}};
  EXPECT_EQ(enumerate_grid(one, base).size(), 1u);
  GridAxes empty{{}, {2}, {1}, {0}};
  EXPECT_THROW(enumerate_grid(empty, base), Error);
}

TEST(GridSearch, PicksLowestMeanCriterion) {
  const ModelConfig base = testing::small_model(10);
  const auto grid = enumerate_grid(GridAxes{{8, 16}, {1, 2}, {1}, {0}}, base);
  // Criterion depends on (point, fold); point 2 dominates on average only.
  const GridTrainer trainer = [&](const ModelConfig& m, int fold) {
    const double by_point = m.hidden == 16 && m.heads == 1 ? 0.3 : 0.5;
    return by_point + (fold == 0 ? 0.15 : -0.15);
  };
  const GridResult r = run_grid_search(grid, 2, trainer);
  EXPECT_EQ(r.best_index, 2u);
  EXPECT_EQ(r.best, grid[2]);
  EXPECT_NEAR(r.mean_criterion[2], 0.3, 1e-15);
  EXPECT_NEAR(r.mean_criterion[0], 0.5, 1e-15);
}

TEST(GridSearch, FailingPointIsSkipped) {
  testing::ScopedLogLevel quiet(LogLevel::kQuiet);
  const auto grid = enumerate_grid(GridAxes{{8, 16}, {1}, {1}, {0}}, testing::small_model(10));
  const GridTrainer trainer = [](const ModelConfig& m, int) {
    if (m.hidden == 8) throw Error("diverged");
    return 0.9;
  };
  const GridResult r = run_grid_search(grid, 3, trainer);
  EXPECT_TRUE(std::isnan(r.mean_criterion[0]));
  EXPECT_EQ(r.best_index, 1u);
}

TEST(GridSearch, SinglePointSkipsTraining) {
  const auto grid = enumerate_grid(GridAxes{{8}, {1}, {1}, {0}}, testing::small_model(10));
  int calls = 0;
  const GridResult r = run_grid_search(grid, 5, [&](const ModelConfig&, int) {
    ++calls;
    return 0.0;
  });
  EXPECT_EQ(calls, 0);
  EXPECT_EQ(r.best, grid[0]);
}

TEST(ExperimentConfig, JsonRoundTripAndHash) {
  ExperimentConfig c;
  c.n_splits = 3;
  c.generator.n_subjects = 77;
  c.scenarios = {{0, Frequency::kAnnual}, {-2, Frequency::kBiennial}};
  c.training.max_epochs = 9;
  const ExperimentConfig back = ExperimentConfig::from_json(c.to_json());
  EXPECT_EQ(back.to_json(), c.to_json());
  EXPECT_EQ(back.hash(), c.hash());
  // Output location does not change a reported number.
  ExperimentConfig moved = c;
  moved.output_dir = "elsewhere";
  EXPECT_EQ(moved.hash(), c.hash());
  ExperimentConfig other = c;
  other.seed = 2;
  EXPECT_NE(other.hash(), c.hash());
  other = c;
  other.no_expansion = true;
  EXPECT_NE(other.hash(), c.hash());
}

TEST(ExperimentConfig, Validation) {
  ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  c.k_folds = 0;
  EXPECT_THROW(c.validate(), Error);
  c = ExperimentConfig{};
  c.test_fraction = 1.0;
  EXPECT_THROW(c.validate(), Error);
  c = ExperimentConfig{};
  c.n_pseudo = 0;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_THROW(ExperimentConfig::from_json(nlohmann::json{{"n_splits", "three"}}), Error);
}

TEST(PrepareSplit, FoldsPartitionTrainingSubjects) {
  ExperimentConfig c;
  c.generator.n_subjects = 300;
  c.k_folds = 4;
  const Cohort cohort = load_cohort(c);
  const SplitData d = prepare_split(cohort.subjects, c, 0);
  EXPECT_EQ(d.train.size() + d.test.size(), cohort.subjects.size());
  std::vector<int> seen(d.train.size(), 0);
  for (const auto& f : d.folds) {
    for (std::size_t i : f) ++seen[i];
  }
  for (int s : seen) EXPECT_EQ(s, 1);
  EXPECT_EQ(d.base_model.token_width, c.schema.token_width());
  EXPECT_EQ(d.base_model.schema_hash, c.schema.hash());
  c.k_folds = 1;
  EXPECT_EQ(prepare_split(cohort.subjects, c, 0).folds.size(), 1u);
}

CellKey cell(Diagnosis g, int year, int start, Frequency f = Frequency::kAnnual) {
  return {g, year, "complete", start, f, Metric::kAuroc};
}

TEST(MetricTable, WriteReadRoundTrip) {
  const std::string dir = testing::scratch_dir("table");
  const MetricTable t = {{cell(Diagnosis::kCN, 1, 0), {0.1 + 0.2, 1.0 / 3.0, 20}},
                         {cell(Diagnosis::kMCI, 5, -2, Frequency::kBiennial), {0.75, 0.0, 1}}};
  write_metric_table(dir + "/m.csv", t);
  const MetricTable back = read_metric_table(dir + "/m.csv");
  ASSERT_EQ(back.size(), t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(back[i].first, t[i].first);
    EXPECT_EQ(back[i].second.mean, t[i].second.mean);  // exact: %.17g
    EXPECT_EQ(back[i].second.stderr_, t[i].second.stderr_);
    EXPECT_EQ(back[i].second.n_replicates, t[i].second.n_replicates);
  }
}

TEST(MetricTable, AggregateUsesSplitMeans) {
  const CellKey k = cell(Diagnosis::kCN, 1, 0);
  const std::vector<MetricTable> splits = {{{k, {0.6, 0.05, 20}}},
                                           {{k, {0.7, 0.05, 20}}},
                                           {{k, {0.8, 0.05, 20}}}};
  const MetricTable agg = aggregate_splits(splits);
  ASSERT_EQ(agg.size(), 1u);
  EXPECT_NEAR(agg[0].second.mean, 0.7, 1e-15);
  EXPECT_NEAR(agg[0].second.stderr_, 0.1 / std::sqrt(3.0), 1e-15);
  EXPECT_EQ(agg[0].second.n_replicates, 3);
  // One split passes through untouched.
  EXPECT_EQ(aggregate_splits({splits[0]})[0].second.stderr_, 0.05);
}

TEST(Report, DeltaAgainstNowOnlyRow) {
  const std::string dir = testing::scratch_dir("report");
  MetricTable t;
  for (int y = 1; y <= 2; ++y) {
    t.push_back({cell(Diagnosis::kCN, y, 0), {0.60, 0.01, 3}});
    t.push_back({cell(Diagnosis::kCN, y, -1), {0.60 + 0.01 * y, 0.01, 3}});
  }
  write_metric_table(dir + "/metrics.csv", t);
  emit_report(dir);
  std::istringstream delta(slurp(fs::path(dir) / "report" / "delta_auroc.csv"));
  std::string line;
  std::getline(delta, line);
  std::map<std::pair<int, int>, double> d;
  while (std::getline(delta, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string tok; std::getline(ss, tok, ',');) f.push_back(tok);
    ASSERT_EQ(f.size(), 6u);
    d[{std::stoi(f[2]), std::stoi(f[4])}] = std::stod(f[5]);
  }
  EXPECT_EQ(d.at({0, 1}), 0.0);
  EXPECT_EQ(d.at({0, 2}), 0.0);
  EXPECT_NEAR(d.at({-1, 1}), 0.01, 1e-12);
  EXPECT_NEAR(d.at({-1, 2}), 0.02, 1e-12);
  EXPECT_TRUE(fs::exists(fs::path(dir) / "report" / "auroc.csv"));
  EXPECT_NE(slurp(fs::path(dir) / "report" / "summary.txt").find("+0.0150"), std::string::npos);
}

ExperimentConfig tiny_experiment(const std::string& dir) {
  ExperimentConfig c;
  c.generator.n_subjects = 150;
  c.generator.seed = 5;
  c.n_splits = 1;
  c.k_folds = 1;
  c.seeds_per_fold = 1;
  c.grid = GridAxes{{8}, {1}, {1}, {0}};
  c.training.max_epochs = 2;
  c.training.batch_size = 64;
  c.follow_up_years = 2;
  c.n_pseudo = 3;
  c.output_dir = dir;
  return c;
}

std::size_t count_checkpoints(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ".bin";
  return n;
}

TEST(RunExperiment, TinyRunIsCompleteAndResumable) {
  testing::ScopedLogLevel quiet(LogLevel::kWarning);
  const std::string dir = testing::scratch_dir("tiny_run");
  const ExperimentConfig c = tiny_experiment(dir);
  const nlohmann::json manifest = run_experiment(c);
  EXPECT_EQ(manifest.at("status"), "complete");
  EXPECT_EQ(manifest.at("config_hash"), c.hash());
  EXPECT_EQ(count_checkpoints(dir), 1u);  // n_splits * k * seeds

  const MetricTable table = read_metric_table(dir + "/metrics.csv");
  // 2 groups x 2 years x 2 modality cases x 5 scenarios x 6 metrics.
  std::set<CellKey> keys;
  for (const auto& [k, v] : table) keys.insert(k);
  EXPECT_EQ(keys.size(), table.size());
  EXPECT_EQ(table.size(), 2u * 2u * 2u * 5u * 6u);

  // Re-scoring from the saved checkpoint gives the same bytes without
  // training anything.
  const std::string before = slurp(fs::path(dir) / "metrics.csv");
  fs::remove(fs::path(dir) / "split_000" / "metrics.csv");
  RunOptions no_train;
  no_train.allow_training = false;
  run_experiment(c, no_train);
  EXPECT_EQ(slurp(fs::path(dir) / "metrics.csv"), before);

  emit_report(dir);
  EXPECT_TRUE(fs::exists(fs::path(dir) / "report" / "delta_auroc.csv"));
}

TEST(RunExperiment, MissingCheckpointWithoutTrainingFails) {
  testing::ScopedLogLevel quiet(LogLevel::kQuiet);
  const std::string dir = testing::scratch_dir("no_ckpt");
  RunOptions no_train;
  no_train.allow_training = false;
  EXPECT_THROW(run_experiment(tiny_experiment(dir), no_train), Error);
}

TEST(RunExperiment, WorkerCountDoesNotChangeResults) {
  testing::ScopedLogLevel quiet(LogLevel::kQuiet);
  ExperimentConfig c = tiny_experiment(testing::scratch_dir("workers_1"));
  c.seeds_per_fold = 2;
  c.k_folds = 2;
  ::setenv("PROGCAST_WORKERS", "1", 1);
  run_experiment(c);
  const std::string serial = slurp(fs::path(c.output_dir) / "metrics.csv");
  c.output_dir = testing::scratch_dir("workers_3");
  ::setenv("PROGCAST_WORKERS", "3", 1);
  run_experiment(c);
  ::unsetenv("PROGCAST_WORKERS");
  EXPECT_EQ(slurp(fs::path(c.output_dir) / "metrics.csv"), serial);
}

TEST(Workers, EnvironmentParsing) {
  ::setenv("PROGCAST_WORKERS", "4", 1);
  EXPECT_EQ(worker_count(), 4);
  ::setenv("PROGCAST_WORKERS", "zero", 1);
  EXPECT_THROW(worker_count(), Error);
  ::unsetenv("PROGCAST_WORKERS");
  EXPECT_EQ(worker_count(), 1);
}

TEST(Workers, ParallelForVisitsEveryIndexOnce) {
  std::vector<std::atomic<int>> hits(1000);
  parallel_for(hits.size(), 3, [&](std::size_t i) { hits[i].fetch_add(1); });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_GE(worker_count(), 1);
}

}  // namespace
}  // namespace progcast
