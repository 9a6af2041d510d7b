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

// Longitudinal cohort data model, inclusion rules, carry-forward labeling,
// synthetic cohort generation and subject-level splitting.

#ifndef PROGCAST_COHORT_HPP_
#define PROGCAST_COHORT_HPP_

#include <array>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "progcast/common.hpp"
#include "progcast/schema.hpp"

namespace progcast {

// Raw feature value: numbers for numeric features, category labels for
// categorical ones.
using RawValue = std::variant<double, std::string>;

struct FeatureValue {
  RawValue value = 0.0;
  bool observed = false;

  bool operator==(const FeatureValue&) const = default;
};

struct VisitRecord {
  SubjectId subject_id;
  int year = 0;  // whole years since baseline
  std::optional<Diagnosis> diagnosis;
  std::map<std::string, FeatureValue> features;

  bool operator==(const VisitRecord&) const = default;
};

struct SubjectHistory {
  SubjectId subject_id;
  Diagnosis baseline_diagnosis = Diagnosis::kCN;
  std::vector<VisitRecord> visits;  // strictly increasing years, first is 0

  const VisitRecord* visit_at(int year) const;
  bool operator==(const SubjectHistory&) const = default;
};

// ---------------------------------------------------------------------------
// Inclusion / exclusion.

struct ExclusionCounts {
  int malformed = 0;  // no diagnosed year-0 visit or non-increasing years
  int ad_baseline = 0;
  int cn_to_ad = 0;
  int cn_mci_cn_reversion = 0;
  int mci_to_cn_reversion = 0;
  int no_follow_up = 0;

  int total() const {
    return malformed + ad_baseline + cn_to_ad + cn_mci_cn_reversion +
           mci_to_cn_reversion + no_follow_up;
  }
};

struct Cohort {
  std::vector<SubjectHistory> subjects;
  ExclusionCounts excluded;
  std::vector<std::string> diagnostics;  // one line per rejected malformed subject
};

// Applies the inclusion rules in a fixed order (AD at baseline, CN->AD,
// CN->MCI->CN, MCI->CN, no follow-up diagnosis) and counts each exclusion
// under the first rule that fires. Subjects without a diagnosed year-0 visit
// or with non-increasing years are rejected with a diagnostic.
Cohort filter_cohort(const std::vector<SubjectHistory>& subjects);

// Labels per year 0..max_year. Once a subject is observed at a later stage
// than baseline, every following year carries that stage, observed or not.
// Before that, a year is labeled only if a diagnosed visit exists.
using LabelTrack = std::vector<std::optional<Diagnosis>>;
LabelTrack carry_forward_labels(const SubjectHistory& subject, int max_year);

// ---------------------------------------------------------------------------
// Synthetic cohort generator.

struct GeneratorConfig {
  int n_subjects = 1000;
  double fraction_cn = 0.45;
  double hazard_cn_to_mci = 0.05;
  double hazard_mci_to_ad = 0.15;
  double dropout_hazard = 0.1;
  // Probability of skipping a scheduled follow-up visit, by the subject's
  // stage in that year (CN, MCI, AD). Unequal entries make visit density
  // stage-dependent.
  std::array<double, 3> visit_skip = {0.2, 0.2, 0.2};
  // Per-visit probability that a whole modality is missing (COGN, MRI, CSF).
  double missing_cognitive = 0.3;
  double missing_mri = 0.4;
  double missing_csf = 0.8;
  int max_follow_up_years = 10;

  // When on, two effects make a history more informative than its newest
  // visit: a latent subject risk raises both the conversion hazard and every
  // time-varying feature (so averaging visits estimates it better than one
  // noisy visit), and features drift over the three years before a
  // conversion (so slopes across visits carry information). When off,
  // neither effect is simulated.
  bool history_signal = true;
  double history_signal_strength = 1.0;  // drift at conversion, in feature SDs
  double risk_effect = 1.5;              // hazard log-odds per SD of latent risk
  // Uninformative subject-level offsets, independent per feature.
  double offset_sd = 0.5;
  // Visit-level measurement noise; `noise_correlation` of its variance is
  // shared by all features of a visit, so it does not average out within
  // a visit.
  double noise_sd = 1.0;
  double noise_correlation = 0.8;

  // Fraction of subjects given one of the excludable patterns (AD baseline,
  // CN->AD, CN->MCI->CN, MCI->CN, no follow-up), chosen uniformly.
  double excludable_fraction = 0.0;

  std::uint64_t seed = 1;

  // Throws Error naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

std::vector<SubjectHistory> generate_synthetic_cohort(const GeneratorConfig& cfg);

// ---------------------------------------------------------------------------
// Splitting.

struct SubjectSplit {
  std::vector<SubjectId> train;
  std::vector<SubjectId> test;
  std::vector<std::string> warnings;
};

// Stratified by baseline diagnosis; per stratum round(fraction * n) subjects
// go to test. Strata with fewer than two subjects stay in train.
SubjectSplit split_subjects(const std::vector<SubjectHistory>& cohort,
                            double test_fraction, std::uint64_t seed);

// Stratified k-fold partition. strata[i] is the stratum label of ids[i].
// Subjects are dealt round-robin per stratum, continuing the fold cursor
// across strata so that fold totals stay balanced too.
std::vector<std::vector<SubjectId>> kfold_partition(
    const std::vector<SubjectId>& ids, const std::vector<int>& strata, int k,
    std::uint64_t seed);

// ---------------------------------------------------------------------------
// I/O.

// One JSON object per visit:
//   {"subject_id":..., "year":..., "diagnosis":"CN"|null,
//    "features":{"name":{"value":..., "observed":true}}}
void write_cohort_jsonl(std::ostream& out, const std::vector<SubjectHistory>& subjects);
// Groups visits by subject (in order of first appearance) and sorts them by
// year. Throws Error on malformed lines or duplicate (subject, year).
std::vector<SubjectHistory> read_cohort_jsonl(std::istream& in);

// Label counts per baseline group and follow-up year after carry-forward:
//   group,n_baseline,follow_up_dx,year_1,...,year_N
// with a stable row and a converted row per group.
void write_summary_csv(std::ostream& out, const std::vector<SubjectHistory>& subjects,
                       int max_year);

}  // namespace progcast

#endif  // PROGCAST_COHORT_HPP_
