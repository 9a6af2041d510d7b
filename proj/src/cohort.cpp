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

#include "progcast/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <unordered_map>

#include "progcast/rng.hpp"

namespace progcast {

const VisitRecord* SubjectHistory::visit_at(int year) const {
  auto it = std::lower_bound(visits.begin(), visits.end(), year,
                             [](const VisitRecord& v, int y) { return v.year < y; });
  if (it == visits.end() || it->year != year) return nullptr;
  return &*it;
}

// ---------------------------------------------------------------------------
// Inclusion / exclusion.

namespace {

bool well_formed(const SubjectHistory& s, std::string* why) {
  if (s.visits.empty() || s.visits.front().year != 0) {
    *why = "no baseline (year 0) visit";
    return false;
  }
  if (!s.visits.front().diagnosis) {
    *why = "baseline visit has no diagnosis";
    return false;
  }
  for (std::size_t i = 1; i < s.visits.size(); ++i) {
    if (s.visits[i].year <= s.visits[i - 1].year) {
      *why = "visit years not strictly increasing";
      return false;
    }
  }
  return true;
}

}  // namespace

Cohort filter_cohort(const std::vector<SubjectHistory>& subjects) {
  Cohort out;
  for (const SubjectHistory& s : subjects) {
    std::string why;
    if (!well_formed(s, &why)) {
      ++out.excluded.malformed;
      out.diagnostics.push_back("subject " + s.subject_id + ": " + why);
      continue;
    }
    const Diagnosis base = *s.visits.front().diagnosis;
    std::vector<Diagnosis> later;
    for (std::size_t i = 1; i < s.visits.size(); ++i) {
      if (s.visits[i].diagnosis) later.push_back(*s.visits[i].diagnosis);
    }
    auto any = [&](Diagnosis d) {
      return std::find(later.begin(), later.end(), d) != later.end();
    };

    if (base == Diagnosis::kAD) {
      ++out.excluded.ad_baseline;
      continue;
    }
    if (base == Diagnosis::kCN && any(Diagnosis::kAD)) {
      ++out.excluded.cn_to_ad;
      continue;
    }
    if (base == Diagnosis::kCN) {
      auto mci = std::find(later.begin(), later.end(), Diagnosis::kMCI);
      if (mci != later.end() && std::find(mci, later.end(), Diagnosis::kCN) != later.end()) {
        ++out.excluded.cn_mci_cn_reversion;
        continue;
      }
    }
    if (base == Diagnosis::kMCI && any(Diagnosis::kCN)) {
      ++out.excluded.mci_to_cn_reversion;
      continue;
    }
    if (later.empty()) {
      ++out.excluded.no_follow_up;
      continue;
    }
    SubjectHistory kept = s;
    kept.baseline_diagnosis = base;
    out.subjects.push_back(std::move(kept));
  }
  return out;
}

LabelTrack carry_forward_labels(const SubjectHistory& subject, int max_year) {
  LabelTrack track(static_cast<std::size_t>(std::max(max_year, -1) + 1));
  Diagnosis highest = subject.baseline_diagnosis;
  bool converted = false;
  for (int y = 0; y <= max_year; ++y) {
    const VisitRecord* v = subject.visit_at(y);
    if (v && v->diagnosis && *v->diagnosis > highest) {
      highest = *v->diagnosis;
      converted = true;
    }
    if (converted) {
      track[y] = highest;
    } else if (v && v->diagnosis) {
      track[y] = *v->diagnosis;
    }
  }
  return track;
}

// ---------------------------------------------------------------------------
// Synthetic cohort generator.

namespace {

struct SyntheticFeature {
  const char* name;
  Modality modality;
  double mean;
  double sd;
  double direction;    // +1 if values grow with progression
  double stage_shift;  // latent shift per diagnostic stage
  double drift_weight;
};

constexpr SyntheticFeature kLongitudinal[] = {
    {"mmse", Modality::kCognitive, 28.0, 2.0, -1.0, 0.8, 1.0},
    {"cdr_sb", Modality::kCognitive, 1.0, 1.2, +1.0, 0.8, 1.0},
    {"adas13", Modality::kCognitive, 12.0, 5.0, +1.0, 0.8, 1.0},
    {"ravlt_immediate", Modality::kCognitive, 38.0, 10.0, -1.0, 0.8, 1.0},
    {"hippocampus", Modality::kMri, 7000.0, 900.0, -1.0, 0.5, 1.0},
    {"ventricles", Modality::kMri, 38000.0, 18000.0, +1.0, 0.5, 1.0},
    {"entorhinal", Modality::kMri, 3600.0, 650.0, -1.0, 0.5, 1.0},
    {"whole_brain", Modality::kMri, 1.0e6, 1.0e5, -1.0, 0.5, 1.0},
    {"abeta", Modality::kCsf, 1000.0, 400.0, -1.0, 0.5, 0.5},
    {"ptau", Modality::kCsf, 25.0, 10.0, +1.0, 0.5, 0.5},
};

void check_probability(double p, const char* field) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw Error(std::string("generator config: ") + field + " must be in [0,1]");
  }
}

// Hazard moved by `delta` on the log-odds scale; 0 and 1 stay fixed.
double shift_log_odds(double p, double delta) {
  if (p <= 0.0 || p >= 1.0) return p;
  return 1.0 / (1.0 + std::exp(-(std::log(p / (1.0 - p)) + delta)));
}

enum class Pattern { kNone, kAdBaseline, kCnToAd, kCnMciCn, kMciToCn, kNoFollowUp };

std::string subject_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "S%05d", i);
  return buf;
}

SubjectHistory generate_subject(const GeneratorConfig& cfg, int index) {
  Rng rng(derive_seed(cfg.seed, {tag(Stream::kGenerator), static_cast<std::uint64_t>(index)}));

  Pattern pattern = Pattern::kNone;
  if (rng.bernoulli(cfg.excludable_fraction)) {
    pattern = static_cast<Pattern>(1 + rng.below(5));
  }

  Diagnosis base = rng.bernoulli(cfg.fraction_cn) ? Diagnosis::kCN : Diagnosis::kMCI;
  if (pattern == Pattern::kCnToAd || pattern == Pattern::kCnMciCn) base = Diagnosis::kCN;
  if (pattern == Pattern::kMciToCn) base = Diagnosis::kMCI;

  const int max_years = cfg.max_follow_up_years;
  const double base_hazard = base == Diagnosis::kCN ? cfg.hazard_cn_to_mci : cfg.hazard_mci_to_ad;
  const bool signal = cfg.history_signal;
  const double risk = rng.normal();
  const double hazard = signal ? shift_log_odds(base_hazard, cfg.risk_effect * risk) : base_hazard;
  // Latent conversion is simulated past the follow-up window so drift can
  // start before a conversion that is never observed.
  int conversion = -1;
  for (int t = 1; t <= max_years + 3; ++t) {
    if (rng.bernoulli(hazard)) {
      conversion = t;
      break;
    }
  }
  int dropout = max_years + 1;
  for (int t = 1; t <= max_years; ++t) {
    if (rng.bernoulli(cfg.dropout_hazard)) {
      dropout = t;
      break;
    }
  }
  const int forced_through = (pattern == Pattern::kCnMciCn) ? 2
                             : (pattern == Pattern::kNone || pattern == Pattern::kNoFollowUp ||
                                pattern == Pattern::kAdBaseline)
                                 ? 0
                                 : 1;
  const Diagnosis next = static_cast<Diagnosis>(std::min(to_index(base) + 1, 2));
  auto stage_at = [&](int t) { return (conversion > 0 && t >= conversion) ? next : base; };

  std::vector<int> years{0};
  for (int t = 1; t <= max_years; ++t) {
    const bool forced = t <= forced_through;
    if (t >= dropout && !forced) break;
    const bool skip = rng.bernoulli(cfg.visit_skip[to_index(stage_at(t))]);
    if (skip && !forced) continue;
    years.push_back(t);
  }
  if (pattern == Pattern::kNoFollowUp) years.resize(1);

  // Static features.
  const double age = std::clamp(rng.normal(73.0, 7.0), 55.0, 95.0);
  const std::string sex = rng.bernoulli(0.5) ? "F" : "M";
  const double education = std::clamp(rng.normal(16.0, 2.7), 6.0, 22.0);
  const double u = rng.uniform();
  const double p0 = base == Diagnosis::kCN ? 0.70 : 0.47;
  const double p1 = base == Diagnosis::kCN ? 0.27 : 0.40;
  const std::string apoe = u < p0 ? "0" : (u < p0 + p1 ? "1" : "2");

  std::vector<double> offsets;
  for (std::size_t j = 0; j < std::size(kLongitudinal); ++j) {
    offsets.push_back(cfg.offset_sd * rng.normal());
  }
  const double strength = signal ? cfg.history_signal_strength : 0.0;
  const double shared_sd = cfg.noise_sd * std::sqrt(cfg.noise_correlation);
  const double own_sd = cfg.noise_sd * std::sqrt(1.0 - cfg.noise_correlation);

  SubjectHistory subject;
  subject.subject_id = subject_name(index);
  subject.baseline_diagnosis = base;
  for (int t : years) {
    VisitRecord v;
    v.subject_id = subject.subject_id;
    v.year = t;
    const Diagnosis stage = stage_at(t);
    v.diagnosis = stage;
    v.features["age"] = {age, true};
    v.features["sex"] = {sex, true};
    v.features["education"] = {education, true};
    v.features["apoe4"] = {apoe, true};

    const bool miss_cogn = rng.bernoulli(cfg.missing_cognitive);
    const bool miss_mri = rng.bernoulli(cfg.missing_mri);
    const bool miss_csf = rng.bernoulli(cfg.missing_csf);
    const double ramp =
        conversion > 0 ? std::clamp((t - (conversion - 3)) / 3.0, 0.0, 1.0) : 0.0;
    const double visit_noise = shared_sd * rng.normal();
    for (std::size_t j = 0; j < std::size(kLongitudinal); ++j) {
      const SyntheticFeature& f = kLongitudinal[j];
      const double z = offsets[j] + risk + f.stage_shift * to_index(stage) +
                       strength * f.drift_weight * ramp + visit_noise + own_sd * rng.normal();
      const bool missing = f.modality == Modality::kCognitive ? miss_cogn
                           : f.modality == Modality::kMri     ? miss_mri
                                                              : miss_csf;
      v.features[f.name] = {missing ? 0.0 : f.mean + f.direction * f.sd * z, !missing};
    }
    subject.visits.push_back(std::move(v));
  }

  auto& visits = subject.visits;
  switch (pattern) {
    case Pattern::kAdBaseline:
      visits.front().diagnosis = Diagnosis::kAD;
      subject.baseline_diagnosis = Diagnosis::kAD;
      break;
    case Pattern::kCnToAd:
      visits.back().diagnosis = Diagnosis::kAD;
      break;
    case Pattern::kCnMciCn:
      visits[1].diagnosis = Diagnosis::kMCI;
      visits[2].diagnosis = Diagnosis::kCN;
      for (std::size_t i = 3; i < visits.size(); ++i) visits[i].diagnosis = Diagnosis::kCN;
      break;
    case Pattern::kMciToCn:
      visits.back().diagnosis = Diagnosis::kCN;
      break;
    case Pattern::kNone:
    case Pattern::kNoFollowUp:
      break;
  }
  return subject;
}

}  // namespace

void GeneratorConfig::validate() const {
  if (n_subjects < 1) throw Error("generator config: n_subjects must be >= 1");
  if (max_follow_up_years < 0) throw Error("generator config: max_follow_up_years must be >= 0");
  check_probability(fraction_cn, "fraction_cn");
  check_probability(hazard_cn_to_mci, "hazard_cn_to_mci");
  check_probability(hazard_mci_to_ad, "hazard_mci_to_ad");
  check_probability(dropout_hazard, "dropout_hazard");
  for (double p : visit_skip) check_probability(p, "visit_skip");
  check_probability(missing_cognitive, "missing_cognitive");
  check_probability(missing_mri, "missing_mri");
  check_probability(missing_csf, "missing_csf");
  check_probability(noise_correlation, "noise_correlation");
  if (!(offset_sd >= 0.0)) throw Error("generator config: offset_sd must be >= 0");
  if (!std::isfinite(risk_effect)) throw Error("generator config: risk_effect must be finite");
  check_probability(excludable_fraction, "excludable_fraction");
  if (!(noise_sd >= 0.0)) throw Error("generator config: noise_sd must be >= 0");
  if (!std::isfinite(history_signal_strength)) {
    throw Error("generator config: history_signal_strength must be finite");
  }
}

nlohmann::json GeneratorConfig::to_json() const {
  return {{"n_subjects", n_subjects},
          {"fraction_cn", fraction_cn},
          {"hazard_cn_to_mci", hazard_cn_to_mci},
          {"hazard_mci_to_ad", hazard_mci_to_ad},
          {"dropout_hazard", dropout_hazard},
          {"visit_skip", visit_skip},
          {"missing_cognitive", missing_cognitive},
          {"missing_mri", missing_mri},
          {"missing_csf", missing_csf},
          {"max_follow_up_years", max_follow_up_years},
          {"history_signal", history_signal},
          {"history_signal_strength", history_signal_strength},
          {"risk_effect", risk_effect},
          {"offset_sd", offset_sd},
          {"noise_sd", noise_sd},
          {"noise_correlation", noise_correlation},
          {"excludable_fraction", excludable_fraction},
          {"seed", seed}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  try {
    get("n_subjects", c.n_subjects);
    get("fraction_cn", c.fraction_cn);
    get("hazard_cn_to_mci", c.hazard_cn_to_mci);
    get("hazard_mci_to_ad", c.hazard_mci_to_ad);
    get("dropout_hazard", c.dropout_hazard);
    if (j.contains("visit_skip")) {
      const auto& vs = j.at("visit_skip");
      if (vs.is_number()) {
        c.visit_skip.fill(vs.get<double>());
      } else {
        vs.get_to(c.visit_skip);
      }
    }
    get("missing_cognitive", c.missing_cognitive);
    get("missing_mri", c.missing_mri);
    get("missing_csf", c.missing_csf);
    get("max_follow_up_years", c.max_follow_up_years);
    get("history_signal", c.history_signal);
    get("history_signal_strength", c.history_signal_strength);
    get("risk_effect", c.risk_effect);
    get("offset_sd", c.offset_sd);
    get("noise_sd", c.noise_sd);
    get("noise_correlation", c.noise_correlation);
    get("excludable_fraction", c.excludable_fraction);
    get("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("generator config: ") + e.what());
  }
  c.validate();
  return c;
}

std::vector<SubjectHistory> generate_synthetic_cohort(const GeneratorConfig& cfg) {
  cfg.validate();
  std::vector<SubjectHistory> out;
  out.reserve(static_cast<std::size_t>(cfg.n_subjects));
  for (int i = 0; i < cfg.n_subjects; ++i) out.push_back(generate_subject(cfg, i));
  return out;
}

// ---------------------------------------------------------------------------
// Splitting.

SubjectSplit split_subjects(const std::vector<SubjectHistory>& cohort, double test_fraction,
                            std::uint64_t seed) {
  if (cohort.empty()) throw Error("split_subjects: empty cohort");
  if (!(test_fraction >= 0.0 && test_fraction <= 1.0)) {
    throw Error("split_subjects: test_fraction must be in [0,1]");
  }
  Rng rng(seed);
  std::vector<bool> is_test(cohort.size(), false);
  SubjectSplit out;
  for (Diagnosis stratum : {Diagnosis::kCN, Diagnosis::kMCI, Diagnosis::kAD}) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
      if (cohort[i].baseline_diagnosis == stratum) members.push_back(i);
    }
    if (members.empty()) continue;
    if (members.size() < 2) {
      out.warnings.push_back("stratum " + std::string(to_string(stratum)) +
                             " has fewer than 2 subjects; kept in train");
      log_warning(out.warnings.back());
      continue;
    }
    rng.shuffle(std::span(members));
    const auto n_test = static_cast<std::size_t>(
        std::llround(test_fraction * static_cast<double>(members.size())));
    for (std::size_t i = 0; i < n_test && i < members.size(); ++i) is_test[members[i]] = true;
  }
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    (is_test[i] ? out.test : out.train).push_back(cohort[i].subject_id);
  }
  return out;
}

std::vector<std::vector<SubjectId>> kfold_partition(const std::vector<SubjectId>& ids,
                                                    const std::vector<int>& strata, int k,
                                                    std::uint64_t seed) {
  if (k < 2) throw Error("kfold_partition: k must be >= 2");
  if (strata.size() != ids.size()) throw Error("kfold_partition: strata size mismatch");
  if (ids.size() < static_cast<std::size_t>(k)) {
    throw Error("kfold_partition: k=" + std::to_string(k) + " exceeds " +
                std::to_string(ids.size()) + " subjects");
  }
  Rng rng(seed);
  std::set<int> labels(strata.begin(), strata.end());
  std::vector<std::vector<std::size_t>> fold_members(static_cast<std::size_t>(k));
  std::size_t cursor = 0;
  for (int label : labels) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (strata[i] == label) members.push_back(i);
    }
    rng.shuffle(std::span(members));
    for (std::size_t m : members) {
      fold_members[cursor % static_cast<std::size_t>(k)].push_back(m);
      ++cursor;
    }
  }
  std::vector<std::vector<SubjectId>> folds(static_cast<std::size_t>(k));
  for (std::size_t f = 0; f < folds.size(); ++f) {
    std::sort(fold_members[f].begin(), fold_members[f].end());
    for (std::size_t m : fold_members[f]) folds[f].push_back(ids[m]);
  }
  return folds;
}

// ---------------------------------------------------------------------------
// I/O.

void write_cohort_jsonl(std::ostream& out, const std::vector<SubjectHistory>& subjects) {
  for (const SubjectHistory& s : subjects) {
    for (const VisitRecord& v : s.visits) {
      nlohmann::json features = nlohmann::json::object();
      for (const auto& [name, fv] : v.features) {
        nlohmann::json value = std::holds_alternative<double>(fv.value)
                                   ? nlohmann::json(std::get<double>(fv.value))
                                   : nlohmann::json(std::get<std::string>(fv.value));
        features[name] = {{"value", value}, {"observed", fv.observed}};
      }
      nlohmann::json line = {
          {"subject_id", v.subject_id},
          {"year", v.year},
          {"diagnosis", v.diagnosis ? nlohmann::json(std::string(to_string(*v.diagnosis)))
                                    : nlohmann::json(nullptr)},
          {"features", features}};
      out << line.dump() << '\n';
    }
  }
}

std::vector<SubjectHistory> read_cohort_jsonl(std::istream& in) {
  std::vector<SubjectHistory> subjects;
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    VisitRecord v;
    try {
      const auto j = nlohmann::json::parse(line);
      v.subject_id = j.at("subject_id").get<std::string>();
      v.year = j.at("year").get<int>();
      if (j.contains("diagnosis") && !j.at("diagnosis").is_null()) {
        v.diagnosis = parse_diagnosis(j.at("diagnosis").get<std::string>());
      }
      if (j.contains("features")) {
        for (const auto& [name, fj] : j.at("features").items()) {
          FeatureValue fv;
          const auto& value = fj.at("value");
          if (value.is_string()) {
            fv.value = value.get<std::string>();
          } else if (value.is_null()) {
            fv.value = 0.0;
          } else {
            fv.value = value.get<double>();
          }
          fv.observed = fj.value("observed", !value.is_null());
          v.features.emplace(name, std::move(fv));
        }
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error("cohort jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    if (v.year < 0) throw Error("cohort jsonl line " + std::to_string(line_no) + ": negative year");
    auto [it, inserted] = index.emplace(v.subject_id, subjects.size());
    if (inserted) {
      subjects.emplace_back();
      subjects.back().subject_id = v.subject_id;
    }
    subjects[it->second].visits.push_back(std::move(v));
  }
  for (SubjectHistory& s : subjects) {
    std::sort(s.visits.begin(), s.visits.end(),
              [](const VisitRecord& a, const VisitRecord& b) { return a.year < b.year; });
    for (std::size_t i = 1; i < s.visits.size(); ++i) {
      if (s.visits[i].year == s.visits[i - 1].year) {
        throw Error("cohort jsonl: duplicate year " + std::to_string(s.visits[i].year) +
                    " for subject " + s.subject_id);
      }
    }
    if (!s.visits.empty() && s.visits.front().year == 0 && s.visits.front().diagnosis) {
      s.baseline_diagnosis = *s.visits.front().diagnosis;
    }
  }
  return subjects;
}

void write_summary_csv(std::ostream& out, const std::vector<SubjectHistory>& subjects,
                       int max_year) {
  out << "group,n_baseline,follow_up_dx";
  for (int y = 1; y <= max_year; ++y) out << ",year_" << y;
  out << '\n';
  for (Diagnosis group : {Diagnosis::kCN, Diagnosis::kMCI}) {
    const Diagnosis converted = static_cast<Diagnosis>(to_index(group) + 1);
    std::vector<int> stable(static_cast<std::size_t>(max_year + 1), 0);
    std::vector<int> conv(static_cast<std::size_t>(max_year + 1), 0);
    int n = 0;
    for (const SubjectHistory& s : subjects) {
      if (s.baseline_diagnosis != group) continue;
      ++n;
      const LabelTrack labels = carry_forward_labels(s, max_year);
      for (int y = 1; y <= max_year; ++y) {
        if (!labels[y]) continue;
        if (*labels[y] == group) ++stable[y];
        if (*labels[y] == converted) ++conv[y];
      }
    }
    for (const auto& [dx, counts] : {std::pair{group, &stable}, std::pair{converted, &conv}}) {
      out << to_string(group) << ',' << n << ',' << to_string(dx);
      for (int y = 1; y <= max_year; ++y) out << ',' << (*counts)[y];
      out << '\n';
    }
  }
}

}  // namespace progcast
