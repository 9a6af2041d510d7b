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

// History scenarios, pseudo test sets (one sampled "now" per subject) and
// ensemble scoring.

#ifndef PROGCAST_EVALUATION_HPP_
#define PROGCAST_EVALUATION_HPP_

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "progcast/cohort.hpp"
#include "progcast/features.hpp"
#include "progcast/metrics.hpp"
#include "progcast/model.hpp"
#include "progcast/rng.hpp"

namespace progcast {

enum class Frequency { kAnnual, kBiennial };

std::string_view to_string(Frequency f);  // "annual", "biennial"
Frequency parse_frequency(std::string_view text);

struct ScenarioSpec {
  int history_start = 0;  // 0, -1, -2 or -3
  Frequency frequency = Frequency::kAnnual;
  ModalityCase modality = ModalityCase::complete();

  // Years relative to now that the scenario keeps, as a bitmask (bit k is
  // k years before now). Annual start -k keeps 0..k; biennial keeps the even
  // offsets up to k.
  unsigned offset_mask() const;
  // e.g. "-2 (annual)".
  std::string label() const;
  void validate() const;

  bool operator==(const ScenarioSpec&) const = default;
};

// The five history rows reported per modality case: start 0, -1, -2, -2
// biennial and -3.
std::vector<ScenarioSpec> standard_scenarios(const ModalityCase& modality);

// One candidate (subject, now) for a follow-up year.
struct EvalEntry {
  std::size_t subject = 0;
  int now_year = 0;
  std::vector<int> history;  // every visit in [now-3, now]
  int target_year = 0;
  Diagnosis label = Diagnosis::kCN;

  bool operator==(const EvalEntry&) const = default;
};

// Visits of `entry` that the scenario keeps (possibly none).
std::vector<int> restrict_history(const EvalEntry& entry, const ScenarioSpec& spec);

// For every subject, the nows whose diagnosis equals `group` and whose
// now + year carries a label. Subjects without any come back empty.
std::vector<std::vector<EvalEntry>> eligible_entries(const std::vector<SubjectHistory>& subjects,
                                                     Diagnosis group, int year);

// One uniformly chosen candidate per subject that has any.
// Throws Error if no subject has a candidate.
std::vector<EvalEntry> build_pseudo_test_set(const std::vector<std::vector<EvalEntry>>& candidates,
                                             Rng& rng);
std::vector<EvalEntry> build_pseudo_test_set(const std::vector<SubjectHistory>& subjects,
                                             Diagnosis group, int year, Rng& rng);

// Mean of the members' probabilities. Throws Error when a member's schema
// hash differs from `schema_hash` or the ensemble is empty.
Eigen::MatrixXd ensemble_predict(std::span<const ModelParams> models,
                                 std::span<const TokenSequence> inputs,
                                 const std::string& schema_hash);

// Conversion task of a group: CN -> MCI or MCI -> AD.
Diagnosis positive_class(Diagnosis group);

struct MetricSeries {
  std::vector<double> values;  // one per evaluation set where defined
  int undefined = 0;
  std::optional<Summary> summary;
};

struct ScenarioResult {
  std::array<MetricSeries, kNumMetrics> metrics;
  int sets = 0;
  int excluded_entries = 0;  // entries whose restricted history was empty
};

struct EvaluationContext {
  std::span<const ModelParams> models;
  const EncodedCohort* encoded = nullptr;  // test subjects under the modality case
  std::string schema_hash;
};

// n_pseudo pseudo test sets drawn with seeds derive_seed(seed, {set}), so
// every scenario sees the same sets. Entries whose history the scenario
// empties are dropped from that set.
ScenarioResult evaluate_scenario(const EvaluationContext& ctx,
                                 const std::vector<std::vector<EvalEntry>>& candidates,
                                 Diagnosis group, const ScenarioSpec& spec, int n_pseudo,
                                 std::uint64_t seed);

// Single pass over every candidate, so subjects may count several times.
ScenarioResult evaluate_without_bias_reduction(const EvaluationContext& ctx,
                                               const std::vector<std::vector<EvalEntry>>& candidates,
                                               Diagnosis group, const ScenarioSpec& spec);

}  // namespace progcast

#endif  // PROGCAST_EVALUATION_HPP_
