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

// Binary classification metrics. Labels are 0/1; an undefined metric (for
// example AUROC on single-class labels) comes back as std::nullopt.

#ifndef PROGCAST_METRICS_HPP_
#define PROGCAST_METRICS_HPP_

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "progcast/common.hpp"

namespace progcast {

// P(score_pos > score_neg) + P(tie) / 2, from average ranks.
std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels);

struct ThresholdMetrics {
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> balanced_accuracy;
};

// A sample is predicted positive iff the argmax of its row (first index on
// ties) is `positive`. labels are the true classes.
ThresholdMetrics threshold_metrics(const Eigen::MatrixXd& probabilities,
                                   std::span<const Diagnosis> labels, Diagnosis positive);

// Average precision. Samples with equal scores form one threshold step.
std::optional<double> aupr(std::span<const double> scores, std::span<const int> labels);

// Expected calibration error over `bins` equal-width bins on [0, 1]; a score
// s falls in bin min(floor(s * bins), bins - 1). Returned as a fraction.
double ece(std::span<const double> scores, std::span<const int> labels, int bins = 10);

enum class Metric { kAuroc, kBalancedAccuracy, kSensitivity, kSpecificity, kAupr, kEce };
inline constexpr int kNumMetrics = 6;
inline constexpr Metric kAllMetrics[kNumMetrics] = {Metric::kAuroc,       Metric::kBalancedAccuracy,
                                                    Metric::kSensitivity, Metric::kSpecificity,
                                                    Metric::kAupr,        Metric::kEce};

std::string_view to_string(Metric m);  // "auroc", "bacc", "sens", "spec", "aupr", "ece"
Metric parse_metric(std::string_view text);

// All six metrics for one evaluation set. The positive-class score is
// column `positive` of `probabilities`.
std::array<std::optional<double>, kNumMetrics> compute_metrics(
    const Eigen::MatrixXd& probabilities, std::span<const Diagnosis> labels, Diagnosis positive,
    int ece_bins = 10);

struct Summary {
  double mean = 0.0;
  double stderr_ = 0.0;  // sample standard deviation / sqrt(n); 0 when n == 1
  int n = 0;
};

// Throws Error on an empty input.
Summary summarize(std::span<const double> values);

}  // namespace progcast

#endif  // PROGCAST_METRICS_HPP_
