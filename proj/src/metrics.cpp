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

#include "progcast/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace progcast {
namespace {

void check_sizes(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw Error("metric: scores and labels differ in length");
}

// Indices sorted by score; `descending` picks the direction. Stable so the
// result is reproducible, although ties are always handled as groups.
std::vector<std::size_t> order_by(std::span<const double> scores, bool descending) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? scores[a] > scores[b] : scores[a] < scores[b];
  });
  return idx;
}

}  // namespace

std::optional<double> auroc(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores, labels);
  const auto order = order_by(scores, false);
  double pos = 0.0, neg = 0.0, pos_rank_sum = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    // Ranks i+1 .. j share their average. Sums of half-integers are exact.
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) {
        pos += 1.0;
        pos_rank_sum += avg_rank;
      } else {
        neg += 1.0;
      }
    }
    i = j;
  }
  if (pos == 0.0 || neg == 0.0) return std::nullopt;
  return (pos_rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

ThresholdMetrics threshold_metrics(const Eigen::MatrixXd& probabilities,
                                   std::span<const Diagnosis> labels, Diagnosis positive) {
  if (probabilities.rows() != static_cast<Eigen::Index>(labels.size()) ||
      probabilities.cols() != kNumClasses) {
    throw Error("threshold_metrics: shape mismatch");
  }
  int tp = 0, fn = 0, tn = 0, fp = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    Eigen::Index predicted = 0;
    probabilities.row(static_cast<Eigen::Index>(i)).maxCoeff(&predicted);
    const bool predicted_pos = predicted == to_index(positive);
    const bool actual_pos = labels[i] == positive;
    if (actual_pos) {
      predicted_pos ? ++tp : ++fn;
    } else {
      predicted_pos ? ++fp : ++tn;
    }
  }
  ThresholdMetrics m;
  if (tp + fn > 0) m.sensitivity = static_cast<double>(tp) / (tp + fn);
  if (tn + fp > 0) m.specificity = static_cast<double>(tn) / (tn + fp);
  if (m.sensitivity && m.specificity) m.balanced_accuracy = (*m.sensitivity + *m.specificity) / 2.0;
  return m;
}

std::optional<double> aupr(std::span<const double> scores, std::span<const int> labels) {
  check_sizes(scores, labels);
  const double total_pos = static_cast<double>(std::count_if(
      labels.begin(), labels.end(), [](int l) { return l != 0; }));
  if (total_pos == 0.0) return std::nullopt;
  const auto order = order_by(scores, true);
  double tp = 0.0, fp = 0.0, ap = 0.0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    double group_pos = 0.0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] ? group_pos : fp) += 1.0;
      ++j;
    }
    tp += group_pos;
    if (group_pos > 0.0) ap += (tp / (tp + fp)) * (group_pos / total_pos);
    i = j;
  }
  return ap;
}

double ece(std::span<const double> scores, std::span<const int> labels, int bins) {
  check_sizes(scores, labels);
  if (bins < 1) throw Error("ece: bins must be >= 1");
  if (scores.empty()) return 0.0;
  std::vector<double> count(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> pos(count), conf(count);
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const double s = scores[i];
    if (!(s >= 0.0 && s <= 1.0)) throw Error("ece: score outside [0, 1]");
    const auto b = static_cast<std::size_t>(
        std::min(static_cast<int>(std::floor(s * bins)), bins - 1));
    count[b] += 1.0;
    pos[b] += labels[i] ? 1.0 : 0.0;
    conf[b] += s;
  }
  const double n = static_cast<double>(scores.size());
  double total = 0.0;
  for (std::size_t b = 0; b < count.size(); ++b) {
    if (count[b] == 0.0) continue;
    total += (count[b] / n) * std::abs(pos[b] / count[b] - conf[b] / count[b]);
  }
  return total;
}

std::string_view to_string(Metric m) {
  switch (m) {
    case Metric::kAuroc:
      return "auroc";
    case Metric::kBalancedAccuracy:
      return "bacc";
    case Metric::kSensitivity:
      return "sens";
    case Metric::kSpecificity:
      return "spec";
    case Metric::kAupr:
      return "aupr";
    case Metric::kEce:
      return "ece";
  }
  return "?";
}

Metric parse_metric(std::string_view text) {
  for (Metric m : kAllMetrics) {
    if (to_string(m) == text) return m;
  }
  throw Error("unknown metric '" + std::string(text) + "'");
}

std::array<std::optional<double>, kNumMetrics> compute_metrics(
    const Eigen::MatrixXd& probabilities, std::span<const Diagnosis> labels, Diagnosis positive,
    int ece_bins) {
  std::vector<double> scores(labels.size());
  std::vector<int> binary(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    scores[i] = probabilities(static_cast<Eigen::Index>(i), to_index(positive));
    binary[i] = labels[i] == positive ? 1 : 0;
  }
  const ThresholdMetrics t = threshold_metrics(probabilities, labels, positive);
  std::array<std::optional<double>, kNumMetrics> out;
  out[0] = auroc(scores, binary);
  out[1] = t.balanced_accuracy;
  out[2] = t.sensitivity;
  out[3] = t.specificity;
  out[4] = aupr(scores, binary);
  if (!labels.empty()) out[5] = ece(scores, binary, ece_bins);
  return out;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw Error("summarize: no values");
  Summary s;
  s.n = static_cast<int>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / s.n;
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.stderr_ = std::sqrt(ss / (s.n - 1)) / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

}  // namespace progcast
