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

// Brute-force reference implementations shared by the unit tests and the
// acceptance checks.

#ifndef PROGCAST_TESTS_ORACLES_HPP_
#define PROGCAST_TESTS_ORACLES_HPP_

#include <optional>
#include <vector>

#include "progcast/cohort.hpp"
#include "progcast/training.hpp"
#include "test_util.hpp"

namespace progcast::testing {

inline constexpr auto CN = Diagnosis::kCN;
inline constexpr auto MCI = Diagnosis::kMCI;
inline constexpr auto AD = Diagnosis::kAD;

// Twelve subjects, one per rule plus six that pass.
inline std::vector<SubjectHistory> roster() {
  return {
      make_subject("ad_base", {{0, AD}, {1, AD}}),
      make_subject("cn_ad", {{0, CN}, {1, MCI}, {2, AD}}),
      make_subject("cn_mci_cn", {{0, CN}, {1, MCI}, {2, CN}}),
      make_subject("mci_cn", {{0, MCI}, {1, CN}}),
      make_subject("no_follow", {{0, CN}}),
      make_subject("no_dx_follow", {{0, MCI}, {1, std::nullopt}}),
      make_subject("keep_cn", {{0, CN}, {1, CN}, {2, CN}}),
      make_subject("keep_mci_ad", {{0, MCI}, {1, AD}, {2, AD}}),
      make_subject("keep_cn_mci", {{0, CN}, {2, MCI}, {3, MCI}}),
      make_subject("keep_mci", {{0, MCI}, {3, MCI}}),
      make_subject("keep_gap", {{0, CN}, {1, std::nullopt}, {4, MCI}}),
      make_subject("keep_mci_ad2", {{0, MCI}, {4, AD}}),
  };
}

// Independent enumerator: the label of a target year is the highest stage
// observed up to it once any later stage was seen, otherwise the diagnosis
// recorded in that exact year.
inline std::optional<Diagnosis> oracle_label(const SubjectHistory& s, int year) {
  std::optional<Diagnosis> highest;
  for (const auto& v : s.visits) {
    if (v.year > year || !v.diagnosis) continue;
    if (*v.diagnosis > s.baseline_diagnosis && (!highest || *v.diagnosis > *highest)) highest = v.diagnosis;
  }
  if (highest) return highest;
  const VisitRecord* v = s.visit_at(year);
  return v ? v->diagnosis : std::nullopt;
}

inline std::vector<TrajectorySample> oracle_expand(const std::vector<SubjectHistory>& subjects) {
  std::vector<TrajectorySample> out;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    const auto& s = subjects[i];
    for (const auto& now : s.visits) {
      if (now.diagnosis != CN && now.diagnosis != MCI) continue;
      for (int target = now.year + 1; target <= now.year + 5; ++target) {
        const auto label = oracle_label(s, target);
        if (!label) continue;
        TrajectorySample t;
        t.subject = i;
        t.now_year = now.year;
        for (const auto& v : s.visits) {
          if (v.year <= now.year && v.year >= now.year - 3) t.history.push_back(v.year);
        }
        t.target_year = target;
        t.target = *label;
        t.group = {s.baseline_diagnosis, *label != s.baseline_diagnosis};
        out.push_back(t);
      }
    }
  }
  return out;
}

// O(P*N) pairwise count. Numerator and denominator are integers, so the
// quotient is the correctly rounded value.
inline std::optional<double> pairwise_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  long twice_wins = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j]) continue;
      ++pairs;
      twice_wins += s[i] > s[j] ? 2 : (s[i] == s[j] ? 1 : 0);
    }
  }
  if (pairs == 0) return std::nullopt;
  return static_cast<double>(twice_wins) / static_cast<double>(2 * pairs);
}

}  // namespace progcast::testing

#endif  // PROGCAST_TESTS_ORACLES_HPP_
