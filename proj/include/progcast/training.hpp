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

// Dataset expansion, visit-drop augmentation, group re-weighting, the
// weighted loss, Adam, and the early-stopped training loop.

#ifndef PROGCAST_TRAINING_HPP_
#define PROGCAST_TRAINING_HPP_

#include <Eigen/Dense>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

#include "json.hpp"
#include "progcast/cohort.hpp"
#include "progcast/features.hpp"
#include "progcast/model.hpp"
#include "progcast/rng.hpp"

namespace progcast {

inline constexpr int kMaxHorizon = 5;

// Carry-forward labels far enough past the last visit to cover every target.
LabelTrack label_track(const SubjectHistory& subject, int horizon = kMaxHorizon);

// (baseline group) x (converted by the target year); index 0..3 is
// 2 * (baseline == MCI) + converter.
struct SampleGroup {
  Diagnosis baseline = Diagnosis::kCN;
  bool converter = false;

  int index() const { return 2 * (baseline == Diagnosis::kMCI ? 1 : 0) + (converter ? 1 : 0); }
  bool operator==(const SampleGroup&) const = default;
};

struct TrajectorySample {
  std::size_t subject = 0;  // index into the subject list it was expanded from
  int now_year = 0;
  std::vector<int> history;  // visit years, increasing, within [now-3, now]
  int target_year = 0;
  Diagnosis target = Diagnosis::kCN;
  SampleGroup group;
  double weight = 1.0;

  int horizon() const { return target_year - now_year; }
  bool operator==(const TrajectorySample&) const = default;
};

// One sample per (now, target year) where the now visit is diagnosed CN or
// MCI and the target year carries a label. The history holds the visits
// actually present in [now - max_history, now].
std::vector<TrajectorySample> expand_dataset(const std::vector<SubjectHistory>& subjects,
                                             int horizon = kMaxHorizon, int max_history = 3);

// Same construction with the baseline visit as the only now.
std::vector<TrajectorySample> expand_dataset_ablated(const std::vector<SubjectHistory>& subjects,
                                                     int horizon = kMaxHorizon,
                                                     int max_history = 3);

struct TrainingConfig {
  double learning_rate = 5e-4;
  double l2 = 1e-4;
  int batch_size = 32;
  double augment_probability = 0.8;
  double drop_probability = 0.5;
  // When set, the now visit is never dropped.
  bool augment_past_only = false;
  int max_epochs = 100;
  int patience = 10;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainingConfig from_json(const nlohmann::json& j);
};

// With probability augment_probability, drops each visit independently with
// drop_probability, redrawing until at least one visit is left.
TrajectorySample augment_sequence(const TrajectorySample& sample, const TrainingConfig& cfg,
                                  Rng& rng);

// weight = T / (C * n_cell) over (group, horizon) cells, so every nonempty
// cell sums to T / C and all weights sum to T.
void compute_sample_weights(std::span<TrajectorySample> samples);

// sum_i w_i * -log p_i[y_i] / sum_i w_i  +  l2 * |theta|^2.
// Probabilities below 1e-12 are clamped (with a warning).
double weighted_loss(const Eigen::MatrixXd& probabilities, std::span<const Diagnosis> targets,
                     std::span<const double> weights, const Eigen::VectorXd& params, double l2);

// Gradient of the data term of weighted_loss with respect to the
// probabilities (batch x 3).
Eigen::MatrixXd weighted_loss_gradient(const Eigen::MatrixXd& probabilities,
                                       std::span<const Diagnosis> targets,
                                       std::span<const double> weights);

struct AdamState {
  Eigen::VectorXd m, v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

AdamState make_adam_state(Eigen::Index size);

// Bias-corrected Adam update. Throws Error on a non-finite gradient, leaving
// params and state untouched.
void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads, AdamState& state,
               double learning_rate);

// Nonempty subsets of the `slots` most recent years as bitmasks: bit k set
// means the visit k years before now is kept. Ascending mask order.
std::vector<unsigned> enumerate_history_scenarios(int slots = kMaxHistorySlots);

// History years of `sample` kept by scenario `mask` (possibly empty).
std::vector<int> restrict_to_mask(const TrajectorySample& sample, unsigned mask);

struct ValidationResult {
  std::vector<double> scenario_losses;  // NaN where no sample survives
  double criterion = 0.0;               // mean over scenarios with samples
};

// Eval-mode weighted loss (no L2) under each history scenario, averaged.
// Sample weights are taken as stored.
ValidationResult validation_criterion(const ModelParams& params, const EncodedCohort& encoded,
                                      std::span<const TrajectorySample> samples,
                                      std::span<const unsigned> scenarios);

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  std::vector<double> val_losses;
  double criterion = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochRecord> log;
  int best_epoch = 0;
};

// Raised when the training loss or a gradient stops being finite. Carries
// the epochs completed so far.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::vector<EpochRecord> log)
      : Error(what), log_(std::move(log)) {}
  const std::vector<EpochRecord>& log() const { return log_; }

 private:
  std::vector<EpochRecord> log_;
};

// Mini-batch training with augmentation and Adam. Stops once the
// validation criterion has not improved for more than `patience` epochs and
// returns the best snapshot. Shuffling, augmentation and dropout draw from
// separate streams derived from `seed`.
TrainResult train_model(const EncodedCohort& train_encoded,
                        std::span<const TrajectorySample> train_samples,
                        const EncodedCohort& val_encoded,
                        std::span<const TrajectorySample> val_samples,
                        const ModelConfig& model_config, const TrainingConfig& train_config,
                        std::uint64_t seed);

// epoch,train_loss,val_s1..val_sN,criterion
void write_epoch_log(std::ostream& out, const std::vector<EpochRecord>& log);

}  // namespace progcast

#endif  // PROGCAST_TRAINING_HPP_
