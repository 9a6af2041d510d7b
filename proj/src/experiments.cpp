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

#include "progcast/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

namespace progcast {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Configuration.

std::vector<ModelConfig> enumerate_grid(const GridAxes& axes, const ModelConfig& base) {
  if (axes.size() == 0) throw Error("grid: every axis needs at least one value");
  std::vector<ModelConfig> out;
  for (int hidden : axes.hidden) {
    for (int heads : axes.heads) {
      for (int layers : axes.layers) {
        for (int cls : axes.classifier_hidden) {
          ModelConfig m = base;
          m.hidden = hidden;
          m.heads = heads;
          m.layers = layers;
          m.classifier_hidden = cls;
          m.validate();
          out.push_back(m);
        }
      }
    }
  }
  return out;
}

void ExperimentConfig::validate() const {
  generator.validate();
  training.validate();
  if (n_splits < 1) throw Error("experiment: n_splits must be >= 1");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw Error("experiment: test_fraction must be in (0, 1)");
  }
  if (k_folds < 1) throw Error("experiment: k_folds must be >= 1");
  if (seeds_per_fold < 1) throw Error("experiment: seeds_per_fold must be >= 1");
  if (grid.size() == 0) throw Error("experiment: grid axes must be nonempty");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("experiment: dropout must be in [0, 1)");
  if (modality_cases.empty()) throw Error("experiment: no modality cases");
  if (scenarios.empty()) throw Error("experiment: no scenarios");
  for (const ScenarioRow& row : scenarios) ScenarioSpec{row.history_start, row.frequency}.validate();
  if (follow_up_years < 1 || follow_up_years > kMaxHorizon) {
    throw Error("experiment: follow_up_years must be in [1, 5]");
  }
  if (n_pseudo < 1) throw Error("experiment: n_pseudo must be >= 1");
  if (ece_bins < 1) throw Error("experiment: ece_bins must be >= 1");
}

nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json cases = nlohmann::json::array();
  for (const ModalityCase& c : modality_cases) cases.push_back(c.label());
  nlohmann::json rows = nlohmann::json::array();
  for (const ScenarioRow& r : scenarios) {
    rows.push_back({{"history_start", r.history_start}, {"frequency", to_string(r.frequency)}});
  }
  nlohmann::json j = {
      {"schema", schema.to_json()},
      {"generator", generator.to_json()},
      {"cohort_path", cohort_path},
      {"n_splits", n_splits},
      {"test_fraction", test_fraction},
      {"k_folds", k_folds},
      {"seeds_per_fold", seeds_per_fold},
      {"grid",
       {{"hidden", grid.hidden},
        {"heads", grid.heads},
        {"layers", grid.layers},
        {"classifier_hidden", grid.classifier_hidden}}},
      {"dropout", dropout},
      {"training", training.to_json()},
      {"modality_cases", cases},
      {"scenarios", rows},
      {"follow_up_years", follow_up_years},
      {"n_pseudo", n_pseudo},
      {"ece_bins", ece_bins},
      {"no_expansion", no_expansion},
      {"no_bias_reduction", no_bias_reduction},
      {"seed", seed},
      {"output_dir", output_dir},
      {"checkpoint_dir", checkpoint_dir}};
  return j;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j, const std::string& base_dir) {
  ExperimentConfig c;
  try {
    if (j.contains("schema")) c.schema = FeatureSchema::from_json(j.at("schema"));
    if (j.contains("generator")) c.generator = GeneratorConfig::from_json(j.at("generator"));
    c.cohort_path = j.value("cohort_path", c.cohort_path);
    if (!c.cohort_path.empty() && !base_dir.empty() && fs::path(c.cohort_path).is_relative()) {
      c.cohort_path = (fs::path(base_dir) / c.cohort_path).string();
    }
    c.n_splits = j.value("n_splits", c.n_splits);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    c.k_folds = j.value("k_folds", c.k_folds);
    c.seeds_per_fold = j.value("seeds_per_fold", c.seeds_per_fold);
    if (j.contains("grid")) {
      const auto& g = j.at("grid");
      c.grid.hidden = g.value("hidden", c.grid.hidden);
      c.grid.heads = g.value("heads", c.grid.heads);
      c.grid.layers = g.value("layers", c.grid.layers);
      c.grid.classifier_hidden = g.value("classifier_hidden", c.grid.classifier_hidden);
    }
    c.dropout = j.value("dropout", c.dropout);
    if (j.contains("training")) c.training = TrainingConfig::from_json(j.at("training"));
    if (j.contains("modality_cases")) {
      c.modality_cases.clear();
      for (const auto& m : j.at("modality_cases")) {
        c.modality_cases.push_back(ModalityCase::parse(m.get<std::string>()));
      }
    }
    if (j.contains("scenarios")) {
      c.scenarios.clear();
      for (const auto& s : j.at("scenarios")) {
        c.scenarios.push_back({s.at("history_start").get<int>(),
                               parse_frequency(s.value("frequency", std::string("annual")))});
      }
    }
    c.follow_up_years = j.value("follow_up_years", c.follow_up_years);
    c.n_pseudo = j.value("n_pseudo", c.n_pseudo);
    c.ece_bins = j.value("ece_bins", c.ece_bins);
    c.no_expansion = j.value("no_expansion", c.no_expansion);
    c.no_bias_reduction = j.value("no_bias_reduction", c.no_bias_reduction);
    c.seed = j.value("seed", c.seed);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.checkpoint_dir = j.value("checkpoint_dir", c.checkpoint_dir);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("experiment config: ") + e.what());
  }
  c.validate();
  return c;
}

std::string ExperimentConfig::hash() const {
  nlohmann::json j = to_json();
  j.erase("output_dir");
  j.erase("checkpoint_dir");
  return hex64(fnv1a64(j.dump()));
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::exception& e) {
    throw Error("config " + path + ": " + e.what());
  }
  return ExperimentConfig::from_json(j, fs::path(path).parent_path().string());
}

Cohort load_cohort(const ExperimentConfig& config) {
  std::vector<SubjectHistory> raw;
  if (!config.cohort_path.empty()) {
    std::ifstream in(config.cohort_path);
    if (!in) throw Error("cannot read cohort " + config.cohort_path);
    raw = read_cohort_jsonl(in);
  } else {
    raw = generate_synthetic_cohort(config.generator);
  }
  Cohort cohort = filter_cohort(raw);
  for (const std::string& d : cohort.diagnostics) log_warning(d);
  if (cohort.subjects.empty()) throw Error("cohort is empty after filtering");
  return cohort;
}

// ---------------------------------------------------------------------------
// Splits and models.

namespace {

std::string cohort_fingerprint(const std::vector<SubjectHistory>& subjects) {
  std::ostringstream out;
  write_cohort_jsonl(out, subjects);
  return hex64(fnv1a64(out.str()));
}

std::string split_dir_name(int split) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "split_%03d", split);
  return buf;
}

fs::path checkpoint_root(const ExperimentConfig& config) {
  return config.checkpoint_dir.empty() ? fs::path(config.output_dir) : fs::path(config.checkpoint_dir);
}

std::vector<SubjectHistory> pick(const std::vector<SubjectHistory>& all,
                                 const std::vector<std::size_t>& idx) {
  std::vector<SubjectHistory> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(all[i]);
  return out;
}

std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

}  // namespace

SplitData prepare_split(const std::vector<SubjectHistory>& cohort, const ExperimentConfig& config,
                        int split) {
  const auto s = static_cast<std::uint64_t>(split);
  const SubjectSplit ids =
      split_subjects(cohort, config.test_fraction, derive_seed(config.seed, {tag(Stream::kSplit), s}));
  for (const std::string& w : ids.warnings) log_warning(w);

  std::map<SubjectId, std::size_t> index;
  for (std::size_t i = 0; i < cohort.size(); ++i) index[cohort[i].subject_id] = i;
  SplitData data;
  data.index = split;
  for (const SubjectId& id : ids.train) data.train.push_back(cohort[index.at(id)]);
  for (const SubjectId& id : ids.test) data.test.push_back(cohort[index.at(id)]);
  if (data.train.empty() || data.test.empty()) throw Error("split leaves train or test empty");

  // Imputation statistics come from the whole training split so that every
  // ensemble member sees the test set through the same encoding.
  data.stats = fit_imputation_stats(data.train, config.schema);
  data.base_model.token_width = config.schema.token_width();
  data.base_model.dropout = config.dropout;
  data.base_model.age_mean = data.stats.age_mean;
  data.base_model.age_sd = data.stats.age_sd;
  data.base_model.schema_hash = config.schema.hash();

  if (config.k_folds == 1) {
    std::vector<std::size_t> all(data.train.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    data.folds.push_back(std::move(all));
  } else {
    std::vector<SubjectId> train_ids;
    std::vector<int> strata;
    for (const SubjectHistory& h : data.train) {
      train_ids.push_back(h.subject_id);
      strata.push_back(to_index(h.baseline_diagnosis));
    }
    const auto folds = kfold_partition(train_ids, strata, config.k_folds,
                                       derive_seed(config.seed, {tag(Stream::kFold), s}));
    std::map<SubjectId, std::size_t> train_index;
    for (std::size_t i = 0; i < data.train.size(); ++i) train_index[data.train[i].subject_id] = i;
    for (const auto& fold : folds) {
      std::vector<std::size_t> idx;
      for (const SubjectId& id : fold) idx.push_back(train_index.at(id));
      data.folds.push_back(std::move(idx));
    }
  }
  return data;
}

TrainedModel train_fold_model(const SplitData& data, const ExperimentConfig& config,
                              const ModelConfig& model, int fold, int model_seed,
                              bool allow_training) {
  const std::uint64_t seed =
      derive_seed(config.seed, {tag(Stream::kTraining), static_cast<std::uint64_t>(data.index),
                                static_cast<std::uint64_t>(fold),
                                static_cast<std::uint64_t>(model_seed)});
  const nlohmann::json key_source = {{"cohort", cohort_fingerprint(data.train)},
                                     {"schema", config.schema.hash()},
                                     {"model", model.to_json()},
                                     {"training", config.training.to_json()},
                                     {"k_folds", config.k_folds},
                                     {"no_expansion", config.no_expansion},
                                     {"fold", fold},
                                     {"seed", seed}};
  const std::string key = hex64(fnv1a64(key_source.dump()));
  const std::string rel = split_dir_name(data.index) + "/checkpoints/" + model.label() + "_fold" +
                          std::to_string(fold) + "_seed" + std::to_string(model_seed);
  const fs::path prefix = checkpoint_root(config) / rel;

  if (fs::exists(prefix.string() + ".json") && fs::exists(prefix.string() + ".bin")) {
    nlohmann::json meta;
    ModelParams params = load_checkpoint(prefix.string(), &meta);
    if (meta.value("key", std::string()) == key) {
      return {std::move(params), meta.value("criterion", 0.0), rel};
    }
    log_warning("checkpoint " + prefix.string() + " is stale; retraining");
  }
  if (!allow_training) throw Error("missing checkpoint " + prefix.string());

  std::vector<std::size_t> val_idx;
  std::vector<std::size_t> train_idx;
  if (data.folds.size() == 1) {
    train_idx = data.folds[0];
    val_idx = data.folds[0];
  } else {
    val_idx = data.folds.at(static_cast<std::size_t>(fold));
    for (std::size_t f = 0; f < data.folds.size(); ++f) {
      if (static_cast<int>(f) == fold) continue;
      train_idx.insert(train_idx.end(), data.folds[f].begin(), data.folds[f].end());
    }
    std::sort(train_idx.begin(), train_idx.end());
  }
  const std::vector<SubjectHistory> train_subjects = pick(data.train, train_idx);
  const std::vector<SubjectHistory> val_subjects = pick(data.train, val_idx);

  std::vector<TrajectorySample> train_samples =
      config.no_expansion ? expand_dataset_ablated(train_subjects) : expand_dataset(train_subjects);
  // Validation always uses the full expansion so criteria stay comparable.
  std::vector<TrajectorySample> val_samples = expand_dataset(val_subjects);
  compute_sample_weights(train_samples);
  compute_sample_weights(val_samples);

  const EncodedCohort train_enc(train_subjects, config.schema, data.stats, ModalityCase::complete());
  const EncodedCohort val_enc(val_subjects, config.schema, data.stats, ModalityCase::complete());
  log_info("training " + rel + " on " + std::to_string(train_samples.size()) + " samples");
  TrainResult result =
      train_model(train_enc, train_samples, val_enc, val_samples, model, config.training, seed);

  fs::create_directories(prefix.parent_path());
  const double criterion = result.log.at(static_cast<std::size_t>(result.best_epoch - 1)).criterion;
  save_checkpoint(prefix.string(), result.params,
                  {{"key", key},
                   {"split", data.index},
                   {"fold", fold},
                   {"model_seed", model_seed},
                   {"seed", seed},
                   {"best_epoch", result.best_epoch},
                   {"epochs", result.log.size()},
                   {"criterion", criterion},
                   {"train_samples", train_samples.size()},
                   {"val_samples", val_samples.size()}});
  std::ofstream log_out(prefix.string() + ".log.csv");
  write_epoch_log(log_out, result.log);
  return {std::move(result.params), criterion, rel};
}

GridResult run_grid_search(const std::vector<ModelConfig>& grid, int k_folds,
                           const GridTrainer& trainer) {
  if (grid.empty()) throw Error("grid search: empty grid");
  GridResult result;
  if (grid.size() == 1) {
    result.best = grid[0];
    result.mean_criterion.push_back(std::numeric_limits<double>::quiet_NaN());
    return result;
  }
  double best = std::numeric_limits<double>::infinity();
  bool found = false;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    double sum = 0.0;
    bool ok = true;
    for (int f = 0; f < k_folds; ++f) {
      try {
        sum += trainer(grid[g], f);
      } catch (const Error& e) {
        log_warning("grid point " + grid[g].label() + " excluded: " + e.what());
        ok = false;
        break;
      }
    }
    const double mean = ok ? sum / k_folds : std::numeric_limits<double>::quiet_NaN();
    result.mean_criterion.push_back(mean);
    if (ok && mean < best) {
      best = mean;
      result.best_index = g;
      found = true;
    }
  }
  if (!found) throw Error("grid search: every grid point failed");
  result.best = grid[result.best_index];
  return result;
}

GridResult run_grid_search(const SplitData& data, const ExperimentConfig& config) {
  const std::vector<ModelConfig> grid = enumerate_grid(config.grid, data.base_model);
  const int folds = static_cast<int>(data.folds.size());
  if (grid.size() == 1) return run_grid_search(grid, folds, {});
  // Train every (point, fold) up front so the work can be spread over
  // workers; the selection itself then only looks results up.
  const std::size_t jobs = grid.size() * static_cast<std::size_t>(folds);
  std::vector<double> crit(jobs, std::numeric_limits<double>::quiet_NaN());
  std::vector<std::string> errors(jobs);
  parallel_for(jobs, worker_count(), [&](std::size_t j) {
    try {
      crit[j] = train_fold_model(data, config, grid[j / folds], static_cast<int>(j % folds), 0)
                    .criterion;
    } catch (const Error& e) {
      errors[j] = e.what();
    }
  });
  std::map<std::string, std::size_t> point;
  for (std::size_t g = 0; g < grid.size(); ++g) point[grid[g].label()] = g;
  return run_grid_search(grid, folds, [&](const ModelConfig& m, int f) {
    const std::size_t j = point.at(m.label()) * static_cast<std::size_t>(folds) +
                          static_cast<std::size_t>(f);
    if (!errors[j].empty()) throw Error(errors[j]);
    return crit[j];
  });
}

// ---------------------------------------------------------------------------
// Evaluation tables.

MetricTable evaluate_split(const SplitData& data, const ExperimentConfig& config,
                           std::span<const ModelParams> ensemble) {
  struct Unit {
    std::size_t modality;
    Diagnosis group;
    int year;
  };
  std::vector<Unit> units;
  for (std::size_t m = 0; m < config.modality_cases.size(); ++m) {
    for (Diagnosis g : {Diagnosis::kCN, Diagnosis::kMCI}) {
      for (int y = 1; y <= config.follow_up_years; ++y) units.push_back({m, g, y});
    }
  }
  std::vector<EncodedCohort> encoded;
  for (const ModalityCase& c : config.modality_cases) {
    encoded.emplace_back(data.test, config.schema, data.stats, c);
  }
  const std::string schema_hash = config.schema.hash();
  std::vector<MetricTable> per_unit(units.size());
  parallel_for(units.size(), worker_count(), [&](std::size_t u) {
    const Unit& unit = units[u];
    const auto candidates = eligible_entries(data.test, unit.group, unit.year);
    if (std::all_of(candidates.begin(), candidates.end(), [](const auto& c) { return c.empty(); })) {
      log_warning(split_dir_name(data.index) + ": no test subject eligible for group " +
                  std::string(to_string(unit.group)) + ", year " + std::to_string(unit.year));
      return;
    }
    const EvaluationContext ctx{ensemble, &encoded[unit.modality], schema_hash};
    const std::uint64_t pseudo_seed = derive_seed(
        config.seed, {tag(Stream::kPseudoTest), static_cast<std::uint64_t>(data.index),
                      static_cast<std::uint64_t>(to_index(unit.group)),
                      static_cast<std::uint64_t>(unit.year)});
    const ModalityCase& modality = config.modality_cases[unit.modality];
    for (const ScenarioRow& row : config.scenarios) {
      const ScenarioSpec spec{row.history_start, row.frequency, modality};
      const ScenarioResult r =
          config.no_bias_reduction
              ? evaluate_without_bias_reduction(ctx, candidates, unit.group, spec)
              : evaluate_scenario(ctx, candidates, unit.group, spec, config.n_pseudo, pseudo_seed);
      for (int m = 0; m < kNumMetrics; ++m) {
        const MetricSeries& series = r.metrics[static_cast<std::size_t>(m)];
        if (!series.summary) continue;
        CellKey key{unit.group, unit.year, modality.label(), row.history_start, row.frequency,
                    kAllMetrics[m]};
        per_unit[u].push_back(
            {key, {series.summary->mean, series.summary->stderr_, series.summary->n}});
      }
    }
  });
  MetricTable out;
  for (auto& t : per_unit) out.insert(out.end(), t.begin(), t.end());
  return out;
}

void write_metric_table(const std::string& path, const MetricTable& table) {
  std::ostringstream out;
  out << "group,follow_up_year,modality_case,history_start,frequency,metric,mean,stderr,"
         "n_replicates\n";
  for (const auto& [k, v] : table) {
    out << to_string(k.group) << ',' << k.follow_up_year << ',' << k.modality_case << ','
        << k.history_start << ',' << to_string(k.frequency) << ',' << to_string(k.metric) << ','
        << format_double(v.mean) << ',' << format_double(v.stderr_) << ',' << v.n_replicates
        << '\n';
  }
  write_text(path, out.str());
}

MetricTable read_metric_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path);
  MetricTable table;
  std::string line;
  std::getline(in, line);  // header
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 9) throw Error(path + ":" + std::to_string(line_no) + ": expected 9 columns");
    try {
      CellKey k{parse_diagnosis(f[0]), std::stoi(f[1]), f[2], std::stoi(f[3]),
                parse_frequency(f[4]), parse_metric(f[5])};
      table.push_back({k, {std::stod(f[6]), std::stod(f[7]), std::stoi(f[8])}});
    } catch (const std::logic_error& e) {
      throw Error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return table;
}

MetricTable aggregate_splits(const std::vector<MetricTable>& splits) {
  if (splits.empty()) throw Error("aggregate: no splits");
  if (splits.size() == 1) {
    MetricTable t = splits[0];
    std::stable_sort(t.begin(), t.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    return t;
  }
  std::map<CellKey, std::vector<double>> values;
  for (const MetricTable& t : splits) {
    for (const auto& [k, v] : t) values[k].push_back(v.mean);
  }
  MetricTable out;
  for (const auto& [k, v] : values) {
    const Summary s = summarize(v);
    out.push_back({k, {s.mean, s.stderr_, s.n}});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Driver.

nlohmann::json run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const fs::path out_dir(config.output_dir);
  fs::create_directories(out_dir);
  const std::string config_hash = config.hash();

  nlohmann::json manifest = {{"tool_version", kToolVersion},
                             {"config_hash", config_hash},
                             {"config", config.to_json()},
                             {"status", "running"},
                             {"splits", nlohmann::json::array()}};
  manifest["config"].erase("output_dir");
  manifest["config"].erase("checkpoint_dir");
  auto write_manifest = [&] { write_text(out_dir / "manifest.json", manifest.dump(2) + "\n"); };

  const Cohort cohort = load_cohort(config);
  {
    std::ostringstream summary;
    write_summary_csv(summary, cohort.subjects, config.generator.max_follow_up_years);
    write_text(out_dir / "cohort_summary.csv", summary.str());
  }
  manifest["cohort"] = {{"subjects", cohort.subjects.size()},
                        {"excluded",
                         {{"malformed", cohort.excluded.malformed},
                          {"ad_baseline", cohort.excluded.ad_baseline},
                          {"cn_to_ad", cohort.excluded.cn_to_ad},
                          {"cn_mci_cn_reversion", cohort.excluded.cn_mci_cn_reversion},
                          {"mci_to_cn_reversion", cohort.excluded.mci_to_cn_reversion},
                          {"no_follow_up", cohort.excluded.no_follow_up}}}};
  write_manifest();

  std::vector<MetricTable> split_tables;
  for (int s = 0; s < config.n_splits; ++s) {
    const fs::path split_dir = out_dir / split_dir_name(s);
    const fs::path split_json = split_dir / "split.json";
    const fs::path split_metrics = split_dir / "metrics.csv";
    if (fs::exists(split_json) && fs::exists(split_metrics)) {
      std::ifstream in(split_json);
      nlohmann::json entry = nlohmann::json::parse(in);
      if (entry.value("config_hash", std::string()) == config_hash) {
        log_info(split_dir_name(s) + " already complete");
        split_tables.push_back(read_metric_table(split_metrics.string()));
        manifest["splits"].push_back(entry);
        write_manifest();
        continue;
      }
    }
    fs::create_directories(split_dir);
    const SplitData data = prepare_split(cohort.subjects, config, s);

    const GridResult grid = run_grid_search(data, config);
    const int folds = static_cast<int>(data.folds.size());
    const std::size_t n_models = static_cast<std::size_t>(folds * config.seeds_per_fold);
    std::vector<std::optional<TrainedModel>> trained(n_models);
    parallel_for(n_models, worker_count(), [&](std::size_t j) {
      trained[j] = train_fold_model(data, config, grid.best,
                                    static_cast<int>(j) / config.seeds_per_fold,
                                    static_cast<int>(j) % config.seeds_per_fold,
                                    options.allow_training);
    });
    std::vector<ModelParams> ensemble;
    nlohmann::json checkpoints = nlohmann::json::array();
    for (auto& t : trained) {
      checkpoints.push_back(t->checkpoint);
      ensemble.push_back(std::move(t->params));
    }

    const MetricTable table = evaluate_split(data, config, ensemble);
    write_metric_table(split_metrics.string(), table);
    split_tables.push_back(table);

    const std::vector<ModelConfig> points = enumerate_grid(config.grid, data.base_model);
    nlohmann::json grid_rows = nlohmann::json::array();
    for (std::size_t g = 0; g < points.size(); ++g) {
      const double c = grid.mean_criterion[g];
      grid_rows.push_back({{"model", points[g].label()},
                           {"criterion", std::isfinite(c) ? nlohmann::json(c) : nlohmann::json()}});
    }
    const std::size_t expanded = expand_dataset(data.train).size();
    const std::size_t baseline_only = expand_dataset_ablated(data.train).size();
    nlohmann::json entry = {
        {"index", s},
        {"config_hash", config_hash},
        {"split_seed", derive_seed(config.seed, {tag(Stream::kSplit), static_cast<std::uint64_t>(s)})},
        {"n_train", data.train.size()},
        {"n_test", data.test.size()},
        {"expansion_ratio", baseline_only ? static_cast<double>(expanded) / baseline_only : 0.0},
        {"selected_model", grid.best.to_json()},
        {"selected_label", grid.best.label()},
        {"grid", grid_rows},
        {"ensemble_size", ensemble.size()},
        {"checkpoints", checkpoints},
        {"metrics", (fs::path(split_dir_name(s)) / "metrics.csv").string()}};
    write_text(split_json, entry.dump(2) + "\n");
    manifest["splits"].push_back(entry);
    write_manifest();
    log_info(split_dir_name(s) + " complete");
  }

  write_metric_table((out_dir / "metrics.csv").string(), aggregate_splits(split_tables));
  manifest["metrics"] = "metrics.csv";
  manifest["replication_axis"] = config.n_splits > 1 ? "splits" : "pseudo_test_sets";
  manifest["status"] = "complete";
  write_manifest();
  return manifest;
}

// ---------------------------------------------------------------------------
// Report.

void emit_report(const std::string& output_dir) {
  const fs::path dir(output_dir);
  const MetricTable table = read_metric_table((dir / "metrics.csv").string());
  if (table.empty()) throw Error("report: metrics.csv has no cells");
  const fs::path report = dir / "report";
  fs::create_directories(report);

  using RowKey = std::tuple<Diagnosis, std::string, int, Frequency>;
  auto row_label = [](const RowKey& r) {
    return std::string(to_string(std::get<0>(r))) + ',' + std::get<1>(r) + ',' +
           ScenarioSpec{std::get<2>(r), std::get<3>(r)}.label();
  };
  int max_year = 0;
  std::map<std::pair<Metric, RowKey>, std::map<int, CellValue>> cells;
  for (const auto& [k, v] : table) {
    max_year = std::max(max_year, k.follow_up_year);
    cells[{k.metric, RowKey{k.group, k.modality_case, k.history_start, k.frequency}}]
         [k.follow_up_year] = v;
  }

  char buf[64];
  for (Metric metric : kAllMetrics) {
    std::ostringstream out;
    out << "group,modality_case,scenario";
    for (int y = 1; y <= max_year; ++y) out << ",year_" << y;
    out << '\n';
    const double scale = metric == Metric::kEce ? 100.0 : 1.0;
    for (const auto& [key, years] : cells) {
      if (key.first != metric) continue;
      out << row_label(key.second);
      for (int y = 1; y <= max_year; ++y) {
        auto it = years.find(y);
        if (it == years.end()) {
          out << ',';
          continue;
        }
        std::snprintf(buf, sizeof(buf), ",%.3f \xc2\xb1 %.3f", it->second.mean * scale,
                      it->second.stderr_ * scale);
        out << buf;
      }
      out << '\n';
    }
    write_text(report / (std::string(to_string(metric)) + ".csv"), out.str());
  }

  // Delta AUROC of every scenario against the now-only row of the same
  // group and modality case.
  std::ostringstream delta;
  delta << "group,modality_case,history_start,frequency,follow_up_year,delta_auroc\n";
  std::ostringstream summary;
  summary << "Mean delta AUROC over follow-up years vs. history start 0\n";
  for (const auto& [key, years] : cells) {
    if (key.first != Metric::kAuroc) continue;
    const RowKey& r = key.second;
    const RowKey base{std::get<0>(r), std::get<1>(r), 0, Frequency::kAnnual};
    auto b = cells.find({Metric::kAuroc, base});
    if (b == cells.end()) continue;
    double sum = 0.0;
    int n = 0;
    for (const auto& [y, v] : years) {
      auto by = b->second.find(y);
      if (by == b->second.end()) continue;
      const double d = v.mean - by->second.mean;
      delta << to_string(std::get<0>(r)) << ',' << std::get<1>(r) << ',' << std::get<2>(r) << ','
            << to_string(std::get<3>(r)) << ',' << y << ',' << format_double(d) << '\n';
      sum += d;
      ++n;
    }
    if (n > 0) {
      std::snprintf(buf, sizeof(buf), "%+.4f", sum / n);
      summary << "  " << to_string(std::get<0>(r)) << " -> "
              << to_string(positive_class(std::get<0>(r))) << "  " << std::get<1>(r) << "  "
              << ScenarioSpec{std::get<2>(r), std::get<3>(r)}.label() << ": " << buf << '\n';
    }
  }
  write_text(report / "delta_auroc.csv", delta.str());
  write_text(report / "summary.txt", summary.str());
}

}  // namespace progcast
