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

#include "progcast/evaluation.hpp"

#include <algorithm>

#include "progcast/training.hpp"

namespace progcast {

std::string_view to_string(Frequency f) {
  return f == Frequency::kAnnual ? "annual" : "biennial";
}

Frequency parse_frequency(std::string_view text) {
  if (text == "annual") return Frequency::kAnnual;
  if (text == "biennial") return Frequency::kBiennial;
  throw Error("unknown frequency '" + std::string(text) + "'");
}

void ScenarioSpec::validate() const {
  if (history_start > 0 || history_start < -(kMaxHistorySlots - 1)) {
    throw Error("scenario: history_start must be in [-3, 0]");
  }
}

unsigned ScenarioSpec::offset_mask() const {
  validate();
  unsigned mask = 0;
  const int step = frequency == Frequency::kAnnual ? 1 : 2;
  for (int k = 0; k <= -history_start; k += step) mask |= 1u << k;
  return mask;
}

std::string ScenarioSpec::label() const {
  return std::to_string(history_start) + " (" + std::string(to_string(frequency)) + ")";
}

std::vector<ScenarioSpec> standard_scenarios(const ModalityCase& modality) {
  return {{0, Frequency::kAnnual, modality},
          {-1, Frequency::kAnnual, modality},
          {-2, Frequency::kAnnual, modality},
          {-2, Frequency::kBiennial, modality},
          {-3, Frequency::kAnnual, modality}};
}

std::vector<int> restrict_history(const EvalEntry& entry, const ScenarioSpec& spec) {
  const unsigned mask = spec.offset_mask();
  std::vector<int> out;
  for (int year : entry.history) {
    const int offset = entry.now_year - year;
    if (offset >= 0 && offset < kMaxHistorySlots && ((mask >> offset) & 1u)) out.push_back(year);
  }
  return out;
}

std::vector<std::vector<EvalEntry>> eligible_entries(const std::vector<SubjectHistory>& subjects,
                                                     Diagnosis group, int year) {
  if (year < 1) throw Error("eligible_entries: follow-up year must be >= 1");
  std::vector<std::vector<EvalEntry>> out(subjects.size());
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const SubjectHistory& subject = subjects[s];
    const LabelTrack labels = label_track(subject, year);
    for (const VisitRecord& now : subject.visits) {
      if (!now.diagnosis || *now.diagnosis != group) continue;
      const auto target = static_cast<std::size_t>(now.year + year);
      if (target >= labels.size() || !labels[target]) continue;
      EvalEntry e;
      e.subject = s;
      e.now_year = now.year;
      e.target_year = now.year + year;
      e.label = *labels[target];
      for (const VisitRecord& v : subject.visits) {
        if (v.year >= now.year - (kMaxHistorySlots - 1) && v.year <= now.year) {
          e.history.push_back(v.year);
        }
      }
      out[s].push_back(std::move(e));
    }
  }
  return out;
}

std::vector<EvalEntry> build_pseudo_test_set(const std::vector<std::vector<EvalEntry>>& candidates,
                                             Rng& rng) {
  std::vector<EvalEntry> out;
  for (const auto& options : candidates) {
    if (options.empty()) continue;
    out.push_back(options[rng.below(options.size())]);
  }
  if (out.empty()) throw Error("pseudo test set: no subject has an eligible now");
  return out;
}

std::vector<EvalEntry> build_pseudo_test_set(const std::vector<SubjectHistory>& subjects,
                                             Diagnosis group, int year, Rng& rng) {
  try {
    return build_pseudo_test_set(eligible_entries(subjects, group, year), rng);
  } catch (const Error&) {
    throw Error("pseudo test set: no eligible now for group " + std::string(to_string(group)) +
                ", follow-up year " + std::to_string(year));
  }
}

Eigen::MatrixXd ensemble_predict(std::span<const ModelParams> models,
                                 std::span<const TokenSequence> inputs,
                                 const std::string& schema_hash) {
  if (models.empty()) throw Error("ensemble_predict: no models");
  for (const ModelParams& m : models) {
    if (m.config().schema_hash != schema_hash) {
      throw Error("ensemble_predict: model schema hash '" + m.config().schema_hash +
                  "' does not match '" + schema_hash + "'");
    }
  }
  Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(inputs.size()), kNumClasses);
  for (const ModelParams& m : models) sum += predict(m, inputs);
  return sum / static_cast<double>(models.size());
}

Diagnosis positive_class(Diagnosis group) {
  if (group == Diagnosis::kCN) return Diagnosis::kMCI;
  if (group == Diagnosis::kMCI) return Diagnosis::kAD;
  throw Error("positive_class: AD is not a prediction group");
}

namespace {

// Predictions for every candidate under one scenario; rows are -1 where the
// restricted history is empty.
struct CandidatePredictions {
  std::vector<std::vector<Eigen::Index>> row;  // [subject][candidate]
  Eigen::MatrixXd probs;
};

CandidatePredictions predict_candidates(const EvaluationContext& ctx,
                                        const std::vector<std::vector<EvalEntry>>& candidates,
                                        const ScenarioSpec& spec) {
  if (!ctx.encoded) throw Error("evaluation: missing encoded cohort");
  CandidatePredictions out;
  out.row.resize(candidates.size());
  std::vector<TokenSequence> inputs;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    for (const EvalEntry& e : candidates[s]) {
      const std::vector<int> years = restrict_history(e, spec);
      if (years.empty()) {
        out.row[s].push_back(-1);
        continue;
      }
      out.row[s].push_back(static_cast<Eigen::Index>(inputs.size()));
      inputs.push_back(ctx.encoded->sequence(e.subject, years, e.now_year, e.target_year));
    }
  }
  out.probs = inputs.empty() ? Eigen::MatrixXd(0, kNumClasses)
                             : ensemble_predict(ctx.models, inputs, ctx.schema_hash);
  return out;
}

void add_set(ScenarioResult& result, const Eigen::MatrixXd& probs,
             const std::vector<Eigen::Index>& rows, const std::vector<Diagnosis>& labels,
             Diagnosis group) {
  ++result.sets;
  Eigen::MatrixXd p(static_cast<Eigen::Index>(rows.size()), kNumClasses);
  for (std::size_t i = 0; i < rows.size(); ++i) p.row(static_cast<Eigen::Index>(i)) = probs.row(rows[i]);
  const auto values = compute_metrics(p, labels, positive_class(group));
  for (int m = 0; m < kNumMetrics; ++m) {
    if (values[static_cast<std::size_t>(m)]) {
      result.metrics[static_cast<std::size_t>(m)].values.push_back(*values[static_cast<std::size_t>(m)]);
    } else {
      ++result.metrics[static_cast<std::size_t>(m)].undefined;
    }
  }
}

void finish(ScenarioResult& result) {
  for (MetricSeries& series : result.metrics) {
    if (!series.values.empty()) series.summary = summarize(series.values);
  }
}

}  // namespace

ScenarioResult evaluate_scenario(const EvaluationContext& ctx,
                                 const std::vector<std::vector<EvalEntry>>& candidates,
                                 Diagnosis group, const ScenarioSpec& spec, int n_pseudo,
                                 std::uint64_t seed) {
  if (n_pseudo < 1) throw Error("evaluate_scenario: n_pseudo must be >= 1");
  // Predictions are shared by every pseudo set; each set only picks rows.
  const CandidatePredictions pred = predict_candidates(ctx, candidates, spec);
  ScenarioResult result;
  for (int set = 0; set < n_pseudo; ++set) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(set)}));
    std::vector<Eigen::Index> rows;
    std::vector<Diagnosis> labels;
    bool any = false;
    for (std::size_t s = 0; s < candidates.size(); ++s) {
      if (candidates[s].empty()) continue;
      any = true;
      const std::size_t pick = rng.below(candidates[s].size());
      const Eigen::Index row = pred.row[s][pick];
      if (row < 0) {
        ++result.excluded_entries;
        continue;
      }
      rows.push_back(row);
      labels.push_back(candidates[s][pick].label);
    }
    if (!any) throw Error("evaluate_scenario: no subject has an eligible now");
    add_set(result, pred.probs, rows, labels, group);
  }
  finish(result);
  return result;
}

ScenarioResult evaluate_without_bias_reduction(const EvaluationContext& ctx,
                                               const std::vector<std::vector<EvalEntry>>& candidates,
                                               Diagnosis group, const ScenarioSpec& spec) {
  const CandidatePredictions pred = predict_candidates(ctx, candidates, spec);
  ScenarioResult result;
  std::vector<Eigen::Index> rows;
  std::vector<Diagnosis> labels;
  bool any = false;
  for (std::size_t s = 0; s < candidates.size(); ++s) {
    for (std::size_t c = 0; c < candidates[s].size(); ++c) {
      any = true;
      if (pred.row[s][c] < 0) {
        ++result.excluded_entries;
        continue;
      }
      rows.push_back(pred.row[s][c]);
      labels.push_back(candidates[s][c].label);
    }
  }
  if (!any) throw Error("evaluation: no subject has an eligible now");
  add_set(result, pred.probs, rows, labels, group);
  finish(result);
  return result;
}

}  // namespace progcast
