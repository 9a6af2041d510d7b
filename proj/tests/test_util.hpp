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

// Shared fixtures for the unit tests.

#ifndef PROGCAST_TESTS_TEST_UTIL_HPP_
#define PROGCAST_TESTS_TEST_UTIL_HPP_

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "progcast/cohort.hpp"
#include "progcast/features.hpp"
#include "progcast/model.hpp"
#include "progcast/rng.hpp"

namespace progcast::testing {

using VisitSpec = std::pair<int, std::optional<Diagnosis>>;

inline VisitRecord make_visit(const std::string& id, int year, std::optional<Diagnosis> dx) {
  VisitRecord v;
  v.subject_id = id;
  v.year = year;
  v.diagnosis = dx;
  return v;
}

// Subject with diagnosis-only visits; baseline is the first visit's label.
inline SubjectHistory make_subject(const std::string& id, const std::vector<VisitSpec>& visits) {
  SubjectHistory s;
  s.subject_id = id;
  for (const auto& [year, dx] : visits) s.visits.push_back(make_visit(id, year, dx));
  if (!s.visits.empty() && s.visits.front().diagnosis) {
    s.baseline_diagnosis = *s.visits.front().diagnosis;
  }
  return s;
}

// Random toy cohort: visit years drawn with gaps, monotone diagnoses, a few
// undiagnosed visits. No subject reverts or skips a stage.
inline std::vector<SubjectHistory> random_toy_cohort(Rng& rng, int n_subjects) {
  std::vector<SubjectHistory> out;
  for (int i = 0; i < n_subjects; ++i) {
    const std::string id = "T" + std::to_string(i);
    const Diagnosis base = rng.bernoulli(0.5) ? Diagnosis::kCN : Diagnosis::kMCI;
    const int convert = rng.bernoulli(0.4) ? 1 + static_cast<int>(rng.below(6)) : 99;
    std::vector<VisitSpec> visits{{0, base}};
    for (int y = 1; y <= 6; ++y) {
      if (rng.bernoulli(0.35)) continue;
      std::optional<Diagnosis> dx = y >= convert ? static_cast<Diagnosis>(to_index(base) + 1) : base;
      if (rng.bernoulli(0.1)) dx.reset();
      visits.emplace_back(y, dx);
    }
    out.push_back(make_subject(id, visits));
  }
  return out;
}

// A small mixed schema: two numerics, one categorical, the diagnosis and
// one MRI numeric.
inline FeatureSchema toy_schema() {
  return FeatureSchema({{"age", FeatureKind::kNumeric, {}, Modality::kStatic},
                        {"mmse", FeatureKind::kNumeric, {}, Modality::kCognitive},
                        {"apoe4", FeatureKind::kCategorical, {"0", "1", "2"}, Modality::kStatic},
                        {"diagnosis", FeatureKind::kDiagnosis, {}, Modality::kStatic},
                        {"hippocampus", FeatureKind::kNumeric, {}, Modality::kMri}},
                       "age");
}

// Random visit under toy_schema(), with each feature missing w.p. 0.3.
inline VisitRecord random_toy_visit(Rng& rng, const std::string& id, int year) {
  VisitRecord v = make_visit(id, year, static_cast<Diagnosis>(rng.below(2)));
  auto put = [&](const std::string& name, RawValue value) {
    const bool observed = !rng.bernoulli(0.3);
    v.features[name] = {observed ? value : RawValue{0.0}, observed};
  };
  put("age", rng.normal(72.0, 6.0));
  put("mmse", rng.normal(27.0, 2.0));
  put("apoe4", std::to_string(rng.below(3)));
  put("hippocampus", rng.normal(7000.0, 800.0));
  return v;
}

// Random token sequence of `length` valid rows with distinct positions.
inline TokenSequence random_sequence(Rng& rng, int width, int length) {
  TokenSequence seq;
  seq.tokens.resize(length, width);
  for (Eigen::Index r = 0; r < seq.tokens.rows(); ++r) {
    for (Eigen::Index c = 0; c < seq.tokens.cols(); ++c) seq.tokens(r, c) = rng.normal();
  }
  seq.ages.resize(length);
  std::vector<int> slots = {0, 1, 2, 3};
  rng.shuffle(std::span<int>(slots));
  for (int i = 0; i < length; ++i) {
    seq.ages[i] = rng.uniform(60.0, 85.0);
    seq.positions.push_back(slots[static_cast<std::size_t>(i)]);
    seq.valid.push_back(1);
  }
  return seq;
}

inline ModelConfig small_model(int width, int hidden = 8, int heads = 2, int layers = 1,
                               int classifier_hidden = 0) {
  ModelConfig c;
  c.token_width = width;
  c.hidden = hidden;
  c.heads = heads;
  c.layers = layers;
  c.classifier_hidden = classifier_hidden;
  c.dropout = 0.0;
  c.age_mean = 72.0;
  c.age_sd = 7.0;
  c.schema_hash = "test";
  return c;
}

// Central-difference check of backward() on L = sum(G .* probs) with a random
// G. Dropout masks are replayed from `dropout_seed`. Returns the largest
// relative error |a - n| / max(|a|, |n|, 1e-7) over `n_coords` random
// coordinates (all coordinates when n_coords <= 0).
inline double gradient_check(ModelParams params, std::span<const TokenSequence> batch,
                             std::uint64_t seed, int n_coords, double eps = 1e-4,
                             std::uint64_t dropout_seed = 99) {
  Rng rng(seed);
  Eigen::MatrixXd g(static_cast<Eigen::Index>(batch.size()), kNumClasses);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  const bool train = params.config().dropout > 0.0;
  auto objective = [&](const ModelParams& p) {
    Rng drop(dropout_seed);
    return (forward(p, batch, train, &drop).probabilities.array() * g.array()).sum();
  };
  Rng drop(dropout_seed);
  const ForwardResult fr = forward(params, batch, train, &drop);
  const Eigen::VectorXd analytic = backward(fr.trace, g);
  const Eigen::Index total = params.layout().total;
  std::vector<Eigen::Index> coords;
  if (n_coords <= 0) {
    for (Eigen::Index i = 0; i < total; ++i) coords.push_back(i);
  } else {
    for (int i = 0; i < n_coords; ++i) coords.push_back(static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(total))));
  }
  double worst = 0.0;
  for (Eigen::Index c : coords) {
    const double x = params.values()[c];
    params.mutable_values()[c] = x + eps;
    const double up = objective(params);
    params.mutable_values()[c] = x - eps;
    const double down = objective(params);
    params.mutable_values()[c] = x;
    const double numeric = (up - down) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[c]), std::abs(numeric), 1e-7});
    worst = std::max(worst, std::abs(analytic[c] - numeric) / denom);
  }
  return worst;
}

// Init with every parameter perturbed, so zero-initialized blocks (the
// position table, biases) carry gradient signal too.
inline ModelParams perturbed_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = init_params(config, seed);
  Rng rng(seed ^ 0x5bd1e995ULL);
  for (Eigen::Index i = 0; i < p.values().size(); ++i) p.mutable_values()[i] += 0.2 * rng.normal();
  return p;
}

// Sets the log level for the lifetime of the object.
class ScopedLogLevel {
 public:
  explicit ScopedLogLevel(LogLevel level) : saved_(log_level()) { set_log_level(level); }
  ~ScopedLogLevel() { set_log_level(saved_); }
  ScopedLogLevel(const ScopedLogLevel&) = delete;
  ScopedLogLevel& operator=(const ScopedLogLevel&) = delete;

 private:
  LogLevel saved_;
};

// Fresh, empty scratch directory under the system temp dir.
inline std::string scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("progcast_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace progcast::testing

#endif  // PROGCAST_TESTS_TEST_UTIL_HPP_
