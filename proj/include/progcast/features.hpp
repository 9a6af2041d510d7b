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

// Visit tokenization: train-fitted imputation statistics, missingness masks,
// one-hot / z-score encoding, modality cases and horizon-tagged token
// sequences.

#ifndef PROGCAST_FEATURES_HPP_
#define PROGCAST_FEATURES_HPP_

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "progcast/cohort.hpp"
#include "progcast/schema.hpp"

namespace progcast {

// Maximum number of visits in one history: now and the three years before.
inline constexpr int kMaxHistorySlots = 4;

struct ImputationStats {
  // Indexed by descriptor. mean/sd are meaningful for numeric descriptors,
  // mode (a category index) for categorical ones.
  std::vector<double> mean;
  std::vector<double> sd;
  std::vector<int> mode;
  std::vector<bool> constant;    // numeric with zero spread; encodes to 0
  std::vector<bool> degenerate;  // never observed in the fitting visits
  // Visit-age statistics used to normalize the model's age input.
  double age_mean = 0.0;
  double age_sd = 1.0;

  nlohmann::json to_json() const;
  static ImputationStats from_json(const nlohmann::json& j);
};

// Population mean / standard deviation over observed numeric values; mode
// with ties broken by schema category order. Unobserved features fall back
// to 0 / the first category and are flagged (and warned about).
ImputationStats fit_imputation_stats(std::span<const VisitRecord* const> visits,
                                     const FeatureSchema& schema);
ImputationStats fit_imputation_stats(const std::vector<SubjectHistory>& train,
                                     const FeatureSchema& schema);

// Baseline age of a subject from the schema's age feature (0 if absent).
double subject_baseline_age(const SubjectHistory& subject, const FeatureSchema& schema);

struct VisitEncoding {
  Eigen::VectorXd features;  // encoded_width()
  Eigen::VectorXd mask;      // mask_width(); 1 = observed
};

// Missing numerics become the train mean and therefore encode to 0;
// missing categoricals encode as the train mode one-hot. The diagnosis is an
// ordinal scalar (CN=0, MCI=1, AD=2). Throws Error on an unknown category or
// a value of the wrong type.
VisitEncoding encode_visit(const VisitRecord& visit, const FeatureSchema& schema,
                           const ImputationStats& stats);

// Inverse of the z-score for numeric descriptor i.
double decode_numeric(double encoded, std::size_t i, const ImputationStats& stats);

// [features | mask | horizon]. Throws Error unless horizon > 0.
Eigen::VectorXd append_horizon(const VisitEncoding& encoding, double horizon_years);

// Set of time-varying modalities kept in the input. STATIC features and the
// diagnosis are never affected.
class ModalityCase {
 public:
  constexpr ModalityCase() = default;
  ModalityCase(std::initializer_list<Modality> modalities);

  static ModalityCase complete();  // every modality
  static ModalityCase mri_only();  // cognitive scores suppressed

  bool contains(Modality m) const { return (bits_ >> static_cast<unsigned>(m)) & 1u; }
  // '+'-joined tags in enum order, e.g. "MRI+CSF+STATIC".
  std::string name() const;
  // "complete", "mri_only", or name() for any other case.
  std::string label() const;
  // Accepts "complete", "mri_only" or a '+'-joined tag list.
  static ModalityCase parse(std::string_view text);

  bool operator==(const ModalityCase&) const = default;

 private:
  unsigned bits_ = 0;
};

// Replaces every time-varying feature whose modality is not retained with
// the train mean / mode and marks it unobserved.
VisitRecord apply_modality_case(const VisitRecord& visit, const ModalityCase& modality_case,
                                const FeatureSchema& schema, const ImputationStats& stats);

// Encoded model input for one history. Rows of `tokens` are year-ordered,
// oldest first. Padded sequences carry extra rows with valid == 0.
struct TokenSequence {
  Eigen::MatrixXd tokens;         // slots x token_width
  Eigen::VectorXd ages;           // subject age at each visit, years
  std::vector<int> positions;     // now_year - visit_year, in 0..3
  std::vector<std::uint8_t> valid;

  int slots() const { return static_cast<int>(tokens.rows()); }
  int length() const;
};

// Throws Error if history is empty, has more than four visits, repeats a
// year, or reaches outside [now-3, now], or if target_year <= now_year.
TokenSequence build_token_sequence(std::span<const VisitRecord* const> history, int now_year,
                                   int target_year, double baseline_age,
                                   const FeatureSchema& schema, const ImputationStats& stats,
                                   const ModalityCase& modality_case);

// Appends invalid zero rows up to `slots`.
TokenSequence pad_sequence(const TokenSequence& seq, int slots = kMaxHistorySlots);

// Visit blocks ([features | mask]) of a whole cohort, encoded once under a
// fixed modality case and reused by training and evaluation.
class EncodedCohort {
 public:
  EncodedCohort(const std::vector<SubjectHistory>& subjects, const FeatureSchema& schema,
                const ImputationStats& stats, const ModalityCase& modality_case);

  // Null when the subject has no visit in that year.
  const Eigen::VectorXd* block(std::size_t subject, int year) const;
  double baseline_age(std::size_t subject) const { return baseline_age_[subject]; }
  int block_width() const { return block_width_; }

  // Same layout and checks as build_token_sequence.
  TokenSequence sequence(std::size_t subject, std::span<const int> years, int now_year,
                         int target_year) const;

 private:
  std::vector<std::vector<Eigen::VectorXd>> blocks_;  // [subject][year]
  std::vector<std::vector<std::uint8_t>> present_;
  std::vector<double> baseline_age_;
  int block_width_ = 0;
};

// Flat little-endian float64 matrix (row-major) at `<prefix>.bin` with a JSON
// sidecar `<prefix>.json` recording shape and schema hash.
void write_encoded_matrix(const std::string& prefix, const Eigen::MatrixXd& rows,
                          const std::string& schema_hash);
// Throws Error if the sidecar hash differs from expected_schema_hash.
Eigen::MatrixXd read_encoded_matrix(const std::string& prefix,
                                    const std::string& expected_schema_hash);

}  // namespace progcast

#endif  // PROGCAST_FEATURES_HPP_
