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

#include "progcast/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>

namespace progcast {

LabelTrack label_track(const SubjectHistory& subject, int horizon) {
  const int last = subject.visits.empty() ? 0 : subject.visits.back().year;
  return carry_forward_labels(subject, last + horizon);
}

// ---------------------------------------------------------------------------
// Expansion.

namespace {

std::vector<TrajectorySample> expand(const std::vector<SubjectHistory>& subjects, int horizon,
                                     int max_history, bool baseline_only) {
  if (horizon < 1) throw Error("expand_dataset: horizon must be >= 1");
  if (max_history < 0 || max_history >= kMaxHistorySlots) {
    throw Error("expand_dataset: max_history must be in [0, 3]");
  }
  std::vector<TrajectorySample> out;
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const SubjectHistory& subject = subjects[s];
    const LabelTrack labels = label_track(subject, horizon);
    for (const VisitRecord& now : subject.visits) {
      if (baseline_only && now.year != 0) break;
      if (!now.diagnosis || *now.diagnosis == Diagnosis::kAD) continue;
      std::vector<int> history;
      for (const VisitRecord& v : subject.visits) {
        if (v.year >= now.year - max_history && v.year <= now.year) history.push_back(v.year);
      }
      for (int dt = 1; dt <= horizon; ++dt) {
        const auto target_year = static_cast<std::size_t>(now.year + dt);
        if (target_year >= labels.size() || !labels[target_year]) continue;
        TrajectorySample sample;
        sample.subject = s;
        sample.now_year = now.year;
        sample.history = history;
        sample.target_year = now.year + dt;
        sample.target = *labels[target_year];
        sample.group = {subject.baseline_diagnosis, sample.target > subject.baseline_diagnosis};
        out.push_back(std::move(sample));
      }
    }
  }
  return out;
}

}  // namespace

std::vector<TrajectorySample> expand_dataset(const std::vector<SubjectHistory>& subjects,
                                             int horizon, int max_history) {
  return expand(subjects, horizon, max_history, false);
}

std::vector<TrajectorySample> expand_dataset_ablated(const std::vector<SubjectHistory>& subjects,
                                                     int horizon, int max_history) {
  return expand(subjects, horizon, max_history, true);
}

// ---------------------------------------------------------------------------
// Configuration.

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0)) throw Error("training config: learning_rate must be > 0");
  if (!(l2 >= 0.0)) throw Error("training config: l2 must be >= 0");
  if (batch_size < 1) throw Error("training config: batch_size must be >= 1");
  if (!(augment_probability >= 0.0 && augment_probability <= 1.0)) {
    throw Error("training config: augment_probability must be in [0,1]");
  }
  if (!(drop_probability >= 0.0 && drop_probability < 1.0)) {
    throw Error("training config: drop_probability must be in [0,1)");
  }
  if (max_epochs < 1) throw Error("training config: max_epochs must be >= 1");
  if (patience < 0) throw Error("training config: patience must be >= 0");
}

nlohmann::json TrainingConfig::to_json() const {
  return {{"learning_rate", learning_rate},
          {"l2", l2},
          {"batch_size", batch_size},
          {"augment_probability", augment_probability},
          {"drop_probability", drop_probability},
          {"augment_past_only", augment_past_only},
          {"max_epochs", max_epochs},
          {"patience", patience}};
}

TrainingConfig TrainingConfig::from_json(const nlohmann::json& j) {
  TrainingConfig c;
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.l2 = j.value("l2", c.l2);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.augment_probability = j.value("augment_probability", c.augment_probability);
    c.drop_probability = j.value("drop_probability", c.drop_probability);
    c.augment_past_only = j.value("augment_past_only", c.augment_past_only);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("training config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Augmentation and weighting.

TrajectorySample augment_sequence(const TrajectorySample& sample, const TrainingConfig& cfg,
                                  Rng& rng) {
  if (sample.history.empty()) throw Error("augment_sequence: empty history");
  if (!rng.bernoulli(cfg.augment_probability)) return sample;
  TrajectorySample out = sample;
  do {
    out.history.clear();
    for (int year : sample.history) {
      const bool protected_now = cfg.augment_past_only && year == sample.now_year;
      const bool drop = rng.bernoulli(cfg.drop_probability);
      if (protected_now || !drop) out.history.push_back(year);
    }
  } while (out.history.empty());
  return out;
}

void compute_sample_weights(std::span<TrajectorySample> samples) {
  std::map<std::pair<int, int>, std::size_t> counts;
  for (const TrajectorySample& s : samples) ++counts[{s.group.index(), s.horizon()}];
  const double total = static_cast<double>(samples.size());
  const double cells = static_cast<double>(counts.size());
  for (TrajectorySample& s : samples) {
    const auto n = static_cast<double>(counts[{s.group.index(), s.horizon()}]);
    s.weight = total / (cells * n);
  }
}

// ---------------------------------------------------------------------------
// Loss and optimizer.

namespace {

constexpr double kProbabilityFloor = 1e-12;

void check_loss_inputs(const Eigen::MatrixXd& p, std::span<const Diagnosis> targets,
                       std::span<const double> weights) {
  if (p.cols() != kNumClasses || static_cast<std::size_t>(p.rows()) != targets.size() ||
      targets.size() != weights.size()) {
    throw Error("weighted loss: size mismatch");
  }
  if (targets.empty()) throw Error("weighted loss: empty batch");
}

}  // namespace

double weighted_loss(const Eigen::MatrixXd& probabilities, std::span<const Diagnosis> targets,
                     std::span<const double> weights, const Eigen::VectorXd& params, double l2) {
  check_loss_inputs(probabilities, targets, weights);
  double num = 0.0, den = 0.0;
  bool clamped = false;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    double p = probabilities(static_cast<Eigen::Index>(i), to_index(targets[i]));
    if (p < kProbabilityFloor) {
      p = kProbabilityFloor;
      clamped = true;
    }
    num += weights[i] * -std::log(p);
    den += weights[i];
  }
  if (clamped) log_warning("weighted loss: target probability clamped at 1e-12");
  if (!(den > 0.0)) throw Error("weighted loss: weights sum to zero");
  return num / den + (l2 > 0.0 ? l2 * params.squaredNorm() : 0.0);
}

Eigen::MatrixXd weighted_loss_gradient(const Eigen::MatrixXd& probabilities,
                                       std::span<const Diagnosis> targets,
                                       std::span<const double> weights) {
  check_loss_inputs(probabilities, targets, weights);
  const double den = std::accumulate(weights.begin(), weights.end(), 0.0);
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(probabilities.rows(), kNumClasses);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const int c = to_index(targets[i]);
    const double p = probabilities(r, c);
    // Beyond the clamp the loss is flat.
    if (p >= kProbabilityFloor) d(r, c) = -weights[i] / (den * p);
  }
  return d;
}

AdamState make_adam_state(Eigen::Index size) {
  AdamState s;
  s.m = Eigen::VectorXd::Zero(size);
  s.v = Eigen::VectorXd::Zero(size);
  return s;
}

void adam_step(Eigen::Ref<Eigen::VectorXd> params, const Eigen::VectorXd& grads, AdamState& state,
               double learning_rate) {
  if (grads.size() != params.size() || state.m.size() != params.size() ||
      state.v.size() != params.size()) {
    throw Error("adam_step: size mismatch");
  }
  if (!grads.allFinite()) throw Error("adam_step: non-finite gradient");
  ++state.step;
  state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads;
  state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads.cwiseAbs2();
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  params.array() -= learning_rate * (state.m.array() / c1) /
                    ((state.v.array() / c2).sqrt() + state.epsilon);
}

// ---------------------------------------------------------------------------
// Validation.

std::vector<unsigned> enumerate_history_scenarios(int slots) {
  if (slots < 1 || slots > 16) throw Error("enumerate_history_scenarios: slots must be in [1, 16]");
  std::vector<unsigned> out;
  for (unsigned mask = 1; mask < (1u << slots); ++mask) out.push_back(mask);
  return out;
}

std::vector<int> restrict_to_mask(const TrajectorySample& sample, unsigned mask) {
  std::vector<int> out;
  for (int year : sample.history) {
    const int offset = sample.now_year - year;
    if (offset >= 0 && offset < 32 && ((mask >> offset) & 1u)) out.push_back(year);
  }
  return out;
}

namespace {

unsigned presence_mask(const TrajectorySample& s) {
  unsigned m = 0;
  for (int year : s.history) m |= 1u << (s.now_year - year);
  return m;
}

constexpr std::size_t kPredictChunk = 256;

}  // namespace

ValidationResult validation_criterion(const ModelParams& params, const EncodedCohort& encoded,
                                      std::span<const TrajectorySample> samples,
                                      std::span<const unsigned> scenarios) {
  // Scenarios often restrict a sample to the same visits; each distinct
  // (sample, restricted history) is predicted once.
  std::vector<std::map<unsigned, std::size_t>> slot(samples.size());
  std::vector<TokenSequence> inputs;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const unsigned present = presence_mask(samples[i]);
    for (unsigned scenario : scenarios) {
      const unsigned kept = present & scenario;
      if (!kept || slot[i].count(kept)) continue;
      slot[i][kept] = inputs.size();
      const std::vector<int> years = restrict_to_mask(samples[i], kept);
      inputs.push_back(
          encoded.sequence(samples[i].subject, years, samples[i].now_year, samples[i].target_year));
    }
  }
  Eigen::MatrixXd probs(static_cast<Eigen::Index>(inputs.size()), kNumClasses);
  for (std::size_t start = 0; start < inputs.size(); start += kPredictChunk) {
    const std::size_t n = std::min(kPredictChunk, inputs.size() - start);
    probs.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) =
        predict(params, std::span<const TokenSequence>(inputs).subspan(start, n));
  }

  ValidationResult result;
  double sum = 0.0;
  int used = 0;
  for (unsigned scenario : scenarios) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const unsigned kept = presence_mask(samples[i]) & scenario;
      if (!kept) continue;
      const double p = std::max(
          probs(static_cast<Eigen::Index>(slot[i].at(kept)), to_index(samples[i].target)),
          kProbabilityFloor);
      num += samples[i].weight * -std::log(p);
      den += samples[i].weight;
    }
    if (den > 0.0) {
      result.scenario_losses.push_back(num / den);
      sum += num / den;
      ++used;
    } else {
      result.scenario_losses.push_back(std::numeric_limits<double>::quiet_NaN());
      log_warning("validation: history scenario " + std::to_string(scenario) +
                  " has no evaluable samples");
    }
  }
  if (used == 0) throw Error("validation: no scenario has evaluable samples");
  result.criterion = sum / used;
  return result;
}

// ---------------------------------------------------------------------------
// Training loop.

TrainResult train_model(const EncodedCohort& train_encoded,
                        std::span<const TrajectorySample> train_samples,
                        const EncodedCohort& val_encoded,
                        std::span<const TrajectorySample> val_samples,
                        const ModelConfig& model_config, const TrainingConfig& train_config,
                        std::uint64_t seed) {
  train_config.validate();
  if (train_samples.empty()) throw Error("train_model: no training samples");
  if (val_samples.empty()) throw Error("train_model: no validation samples");

  ModelParams params = init_params(model_config, derive_seed(seed, {tag(Stream::kInit)}));
  AdamState adam = make_adam_state(params.layout().total);
  const std::vector<unsigned> scenarios = enumerate_history_scenarios();

  TrainResult result{params, {}, 0};
  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;

  std::vector<std::size_t> order(train_samples.size());
  std::vector<TokenSequence> batch;
  std::vector<Diagnosis> targets;
  std::vector<double> weights;

  for (int epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
    const auto e = static_cast<std::uint64_t>(epoch);
    Rng shuffle_rng(derive_seed(seed, {tag(Stream::kShuffle), e}));
    Rng augment_rng(derive_seed(seed, {tag(Stream::kAugment), e}));
    Rng dropout_rng(derive_seed(seed, {tag(Stream::kDropout), e}));
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    double loss_num = 0.0, loss_den = 0.0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(train_config.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(train_config.batch_size));
      batch.clear();
      targets.clear();
      weights.clear();
      for (std::size_t k = start; k < end; ++k) {
        const TrajectorySample s = augment_sequence(train_samples[order[k]], train_config, augment_rng);
        batch.push_back(train_encoded.sequence(s.subject, s.history, s.now_year, s.target_year));
        targets.push_back(s.target);
        weights.push_back(s.weight);
      }
      ForwardResult fr = forward(params, batch, true, &dropout_rng);
      const double data_loss =
          weighted_loss(fr.probabilities, targets, weights, params.values(), 0.0);
      if (!std::isfinite(data_loss)) {
        throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch), result.log);
      }
      const double batch_weight = std::accumulate(weights.begin(), weights.end(), 0.0);
      loss_num += data_loss * batch_weight;
      loss_den += batch_weight;

      Eigen::VectorXd grad =
          backward(fr.trace, weighted_loss_gradient(fr.probabilities, targets, weights));
      if (train_config.l2 > 0.0) grad += 2.0 * train_config.l2 * params.values();
      try {
        adam_step(params.mutable_values(), grad, adam, train_config.learning_rate);
      } catch (const Error& err) {
        throw TrainingDiverged(std::string(err.what()) + " at epoch " + std::to_string(epoch),
                               result.log);
      }
    }

    const ValidationResult val = validation_criterion(params, val_encoded, val_samples, scenarios);
    if (!std::isfinite(val.criterion)) {
      throw TrainingDiverged("validation criterion is not finite at epoch " + std::to_string(epoch),
                             result.log);
    }
    result.log.push_back({epoch, loss_num / loss_den, val.scenario_losses, val.criterion});
    log_info("epoch " + std::to_string(epoch) + " train " + std::to_string(loss_num / loss_den) +
             " val " + std::to_string(val.criterion));
    if (val.criterion < best) {
      best = val.criterion;
      result.params = params;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best > train_config.patience) {
      break;
    }
  }
  return result;
}

void write_epoch_log(std::ostream& out, const std::vector<EpochRecord>& log) {
  const std::size_t n = log.empty() ? 0 : log.front().val_losses.size();
  out << "epoch,train_loss";
  for (std::size_t s = 1; s <= n; ++s) out << ",val_s" << s;
  out << ",criterion\n";
  char buf[32];
  auto num = [&buf](double x) {
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
  };
  for (const EpochRecord& r : log) {
    out << r.epoch << ',' << num(r.train_loss);
    for (double v : r.val_losses) out << ',' << num(v);
    out << ',' << num(r.criterion) << '\n';
  }
}

}  // namespace progcast
