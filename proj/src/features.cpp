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

#include "progcast/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace progcast {

// ---------------------------------------------------------------------------
// Schema.

std::string_view to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::kNumeric:
      return "numeric";
    case FeatureKind::kCategorical:
      return "categorical";
    case FeatureKind::kDiagnosis:
      return "diagnosis";
  }
  return "?";
}

std::string_view to_string(Modality modality) {
  switch (modality) {
    case Modality::kCognitive:
      return "COGN";
    case Modality::kMri:
      return "MRI";
    case Modality::kCsf:
      return "CSF";
    case Modality::kStatic:
      return "STATIC";
  }
  return "?";
}

FeatureKind parse_feature_kind(std::string_view text) {
  if (text == "numeric") return FeatureKind::kNumeric;
  if (text == "categorical") return FeatureKind::kCategorical;
  if (text == "diagnosis") return FeatureKind::kDiagnosis;
  throw Error("unknown feature kind '" + std::string(text) + "'");
}

Modality parse_modality(std::string_view text) {
  if (text == "COGN") return Modality::kCognitive;
  if (text == "MRI") return Modality::kMri;
  if (text == "CSF") return Modality::kCsf;
  if (text == "STATIC") return Modality::kStatic;
  throw Error("unknown modality '" + std::string(text) + "'");
}

int FeatureDescriptor::encoded_width() const {
  return kind == FeatureKind::kCategorical ? static_cast<int>(categories.size()) : 1;
}

FeatureSchema::FeatureSchema(std::vector<FeatureDescriptor> descriptors, std::string age_feature)
    : descriptors_(std::move(descriptors)), age_feature_(std::move(age_feature)) {
  std::set<std::string> names;
  int diagnoses = 0;
  for (const FeatureDescriptor& d : descriptors_) {
    if (!names.insert(d.name).second) throw Error("schema: duplicate feature '" + d.name + "'");
    if (d.kind == FeatureKind::kCategorical && d.categories.empty()) {
      throw Error("schema: categorical feature '" + d.name + "' has no categories");
    }
    if (d.kind == FeatureKind::kDiagnosis) ++diagnoses;
    offsets_.push_back(encoded_width_);
    encoded_width_ += d.encoded_width();
  }
  if (diagnoses > 1) throw Error("schema: more than one diagnosis feature");
  if (!age_feature_.empty()) {
    const int i = find(age_feature_);
    if (i >= 0 && descriptors_[static_cast<std::size_t>(i)].kind != FeatureKind::kNumeric) {
      throw Error("schema: age feature '" + age_feature_ + "' must be numeric");
    }
  }
}

int FeatureSchema::find(std::string_view name) const {
  for (std::size_t i = 0; i < descriptors_.size(); ++i) {
    if (descriptors_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

nlohmann::json FeatureSchema::to_json() const {
  nlohmann::json features = nlohmann::json::array();
  for (const FeatureDescriptor& d : descriptors_) {
    nlohmann::json f = {{"name", d.name},
                        {"kind", std::string(to_string(d.kind))},
                        {"modality", std::string(to_string(d.modality))}};
    if (d.kind == FeatureKind::kCategorical) f["categories"] = d.categories;
    features.push_back(std::move(f));
  }
  return {{"features", features}, {"age_feature", age_feature_}};
}

FeatureSchema FeatureSchema::from_json(const nlohmann::json& j) {
  std::vector<FeatureDescriptor> descriptors;
  try {
    for (const auto& f : j.at("features")) {
      FeatureDescriptor d;
      d.name = f.at("name").get<std::string>();
      d.kind = parse_feature_kind(f.at("kind").get<std::string>());
      d.modality = parse_modality(f.value("modality", std::string("STATIC")));
      if (f.contains("categories")) d.categories = f.at("categories").get<std::vector<std::string>>();
      descriptors.push_back(std::move(d));
    }
    return FeatureSchema(std::move(descriptors), j.value("age_feature", std::string("age")));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("schema: ") + e.what());
  }
}

std::string FeatureSchema::hash() const { return hex64(fnv1a64(to_json().dump())); }

FeatureSchema synthetic_schema() {
  using K = FeatureKind;
  using M = Modality;
  std::vector<FeatureDescriptor> d = {
      {"age", K::kNumeric, {}, M::kStatic},
      {"sex", K::kCategorical, {"F", "M"}, M::kStatic},
      {"education", K::kNumeric, {}, M::kStatic},
      {"apoe4", K::kCategorical, {"0", "1", "2"}, M::kStatic},
      {"diagnosis", K::kDiagnosis, {}, M::kStatic},
      {"mmse", K::kNumeric, {}, M::kCognitive},
      {"cdr_sb", K::kNumeric, {}, M::kCognitive},
      {"adas13", K::kNumeric, {}, M::kCognitive},
      {"ravlt_immediate", K::kNumeric, {}, M::kCognitive},
      {"hippocampus", K::kNumeric, {}, M::kMri},
      {"ventricles", K::kNumeric, {}, M::kMri},
      {"entorhinal", K::kNumeric, {}, M::kMri},
      {"whole_brain", K::kNumeric, {}, M::kMri},
      {"abeta", K::kNumeric, {}, M::kCsf},
      {"ptau", K::kNumeric, {}, M::kCsf},
  };
  return FeatureSchema(std::move(d), "age");
}

// ---------------------------------------------------------------------------
// Imputation statistics.

namespace {

const FeatureValue* lookup(const VisitRecord& visit, const std::string& name) {
  auto it = visit.features.find(name);
  return it == visit.features.end() ? nullptr : &it->second;
}

double numeric_value(const FeatureValue& fv, const FeatureDescriptor& d) {
  if (const double* x = std::get_if<double>(&fv.value)) return *x;
  throw Error("feature '" + d.name + "': expected a number, got '" +
              std::get<std::string>(fv.value) + "'");
}

int category_index(const FeatureValue& fv, const FeatureDescriptor& d) {
  std::string label;
  if (const std::string* s = std::get_if<std::string>(&fv.value)) {
    label = *s;
  } else {
    const double x = std::get<double>(fv.value);
    if (x == std::floor(x) && std::abs(x) < 1e15) {
      label = std::to_string(static_cast<long long>(x));
    } else {
      std::ostringstream os;
      os << x;
      label = os.str();
    }
  }
  for (std::size_t c = 0; c < d.categories.size(); ++c) {
    if (d.categories[c] == label) return static_cast<int>(c);
  }
  throw Error("feature '" + d.name + "': unknown category '" + label + "'");
}

}  // namespace

ImputationStats fit_imputation_stats(std::span<const VisitRecord* const> visits,
                                     const FeatureSchema& schema) {
  const std::size_t n = schema.size();
  ImputationStats stats;
  stats.mean.assign(n, 0.0);
  stats.sd.assign(n, 1.0);
  stats.mode.assign(n, 0);
  stats.constant.assign(n, false);
  stats.degenerate.assign(n, false);

  for (std::size_t i = 0; i < n; ++i) {
    const FeatureDescriptor& d = schema[i];
    if (d.kind == FeatureKind::kDiagnosis) continue;
    if (d.kind == FeatureKind::kNumeric) {
      double sum = 0.0;
      std::size_t count = 0;
      for (const VisitRecord* v : visits) {
        const FeatureValue* fv = lookup(*v, d.name);
        if (fv && fv->observed) {
          sum += numeric_value(*fv, d);
          ++count;
        }
      }
      if (count == 0) {
        stats.degenerate[i] = true;
        stats.constant[i] = true;
        log_warning("feature '" + d.name + "' never observed in training visits");
        continue;
      }
      const double mean = sum / static_cast<double>(count);
      double ss = 0.0;
      for (const VisitRecord* v : visits) {
        const FeatureValue* fv = lookup(*v, d.name);
        if (fv && fv->observed) {
          const double dx = numeric_value(*fv, d) - mean;
          ss += dx * dx;
        }
      }
      const double sd = std::sqrt(ss / static_cast<double>(count));
      stats.mean[i] = mean;
      if (sd > 1e-12 * std::max(1.0, std::abs(mean))) {
        stats.sd[i] = sd;
      } else {
        stats.constant[i] = true;
      }
    } else {
      std::vector<std::size_t> counts(d.categories.size(), 0);
      std::size_t total = 0;
      for (const VisitRecord* v : visits) {
        const FeatureValue* fv = lookup(*v, d.name);
        if (fv && fv->observed) {
          ++counts[static_cast<std::size_t>(category_index(*fv, d))];
          ++total;
        }
      }
      if (total == 0) {
        stats.degenerate[i] = true;
        log_warning("feature '" + d.name + "' never observed in training visits");
        continue;
      }
      // max_element returns the first maximum: ties go to schema order.
      stats.mode[i] = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    }
  }

  // Visit ages.
  const int age_index = schema.age_feature().empty() ? -1 : schema.find(schema.age_feature());
  if (age_index >= 0) {
    double sum = 0.0, ss = 0.0;
    std::size_t count = 0;
    std::vector<double> ages;
    for (const VisitRecord* v : visits) {
      const FeatureValue* fv = lookup(*v, schema.age_feature());
      if (fv && fv->observed) ages.push_back(numeric_value(*fv, schema[age_index]) + v->year);
    }
    for (double a : ages) sum += a;
    count = ages.size();
    if (count > 0) {
      stats.age_mean = sum / static_cast<double>(count);
      for (double a : ages) ss += (a - stats.age_mean) * (a - stats.age_mean);
      const double sd = std::sqrt(ss / static_cast<double>(count));
      stats.age_sd = sd > 1e-12 ? sd : 1.0;
    }
  }
  return stats;
}

ImputationStats fit_imputation_stats(const std::vector<SubjectHistory>& train,
                                     const FeatureSchema& schema) {
  std::vector<const VisitRecord*> visits;
  for (const SubjectHistory& s : train) {
    for (const VisitRecord& v : s.visits) visits.push_back(&v);
  }
  return fit_imputation_stats(std::span<const VisitRecord* const>(visits), schema);
}

nlohmann::json ImputationStats::to_json() const {
  return {{"mean", mean},         {"sd", sd},
          {"mode", mode},         {"constant", constant},
          {"degenerate", degenerate}, {"age_mean", age_mean},
          {"age_sd", age_sd}};
}

ImputationStats ImputationStats::from_json(const nlohmann::json& j) {
  ImputationStats s;
  j.at("mean").get_to(s.mean);
  j.at("sd").get_to(s.sd);
  j.at("mode").get_to(s.mode);
  j.at("constant").get_to(s.constant);
  j.at("degenerate").get_to(s.degenerate);
  j.at("age_mean").get_to(s.age_mean);
  j.at("age_sd").get_to(s.age_sd);
  return s;
}

double subject_baseline_age(const SubjectHistory& subject, const FeatureSchema& schema) {
  if (schema.age_feature().empty() || subject.visits.empty()) return 0.0;
  for (const VisitRecord& v : subject.visits) {
    const FeatureValue* fv = lookup(v, schema.age_feature());
    if (fv && fv->observed) {
      if (const double* x = std::get_if<double>(&fv->value)) return *x;
    }
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Encoding.

VisitEncoding encode_visit(const VisitRecord& visit, const FeatureSchema& schema,
                           const ImputationStats& stats) {
  VisitEncoding enc;
  enc.features = Eigen::VectorXd::Zero(schema.encoded_width());
  enc.mask = Eigen::VectorXd::Zero(schema.mask_width());
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const FeatureDescriptor& d = schema[i];
    const int off = schema.offset(i);
    switch (d.kind) {
      case FeatureKind::kDiagnosis:
        if (visit.diagnosis) {
          enc.features[off] = to_index(*visit.diagnosis);
          enc.mask[static_cast<Eigen::Index>(i)] = 1.0;
        }
        break;
      case FeatureKind::kNumeric: {
        const FeatureValue* fv = lookup(visit, d.name);
        if (fv && fv->observed) {
          const double x = numeric_value(*fv, d);
          enc.features[off] = stats.constant[i] ? 0.0 : (x - stats.mean[i]) / stats.sd[i];
          enc.mask[static_cast<Eigen::Index>(i)] = 1.0;
        }
        break;
      }
      case FeatureKind::kCategorical: {
        const FeatureValue* fv = lookup(visit, d.name);
        int c = stats.mode[i];
        if (fv && fv->observed) {
          c = category_index(*fv, d);
          enc.mask[static_cast<Eigen::Index>(i)] = 1.0;
        }
        enc.features[off + c] = 1.0;
        break;
      }
    }
  }
  return enc;
}

double decode_numeric(double encoded, std::size_t i, const ImputationStats& stats) {
  return stats.constant[i] ? stats.mean[i] : encoded * stats.sd[i] + stats.mean[i];
}

Eigen::VectorXd append_horizon(const VisitEncoding& encoding, double horizon_years) {
  if (!(horizon_years > 0.0)) {
    throw Error("prediction horizon must be positive, got " + std::to_string(horizon_years));
  }
  Eigen::VectorXd token(encoding.features.size() + encoding.mask.size() + 1);
  token << encoding.features, encoding.mask, horizon_years;
  return token;
}

// ---------------------------------------------------------------------------
// Modality cases.

ModalityCase::ModalityCase(std::initializer_list<Modality> modalities) {
  for (Modality m : modalities) bits_ |= 1u << static_cast<unsigned>(m);
}

ModalityCase ModalityCase::complete() {
  return {Modality::kCognitive, Modality::kMri, Modality::kCsf, Modality::kStatic};
}

ModalityCase ModalityCase::mri_only() { return {Modality::kMri, Modality::kCsf, Modality::kStatic}; }

std::string ModalityCase::name() const {
  std::string out;
  for (unsigned m = 0; m < static_cast<unsigned>(kNumModalities); ++m) {
    if (!contains(static_cast<Modality>(m))) continue;
    if (!out.empty()) out += '+';
    out += to_string(static_cast<Modality>(m));
  }
  return out;
}

std::string ModalityCase::label() const {
  if (*this == complete()) return "complete";
  if (*this == mri_only()) return "mri_only";
  return name();
}

ModalityCase ModalityCase::parse(std::string_view text) {
  if (text == "complete") return complete();
  if (text == "mri_only") return mri_only();
  ModalityCase c;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t end = std::min(text.find('+', start), text.size());
    c.bits_ |= 1u << static_cast<unsigned>(parse_modality(text.substr(start, end - start)));
    start = end + 1;
  }
  if (c.bits_ == 0) throw Error("empty modality case");
  return c;
}

VisitRecord apply_modality_case(const VisitRecord& visit, const ModalityCase& modality_case,
                                const FeatureSchema& schema, const ImputationStats& stats) {
  VisitRecord out = visit;
  for (std::size_t i = 0; i < schema.size(); ++i) {
    const FeatureDescriptor& d = schema[i];
    if (d.kind == FeatureKind::kDiagnosis || d.modality == Modality::kStatic) continue;
    if (modality_case.contains(d.modality)) continue;
    FeatureValue imputed;
    imputed.observed = false;
    if (d.kind == FeatureKind::kNumeric) {
      imputed.value = stats.mean[i];
    } else {
      imputed.value = d.categories[static_cast<std::size_t>(stats.mode[i])];
    }
    out.features[d.name] = std::move(imputed);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Token sequences.

int TokenSequence::length() const {
  return static_cast<int>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

namespace {

void check_history_years(std::span<const int> years, int now_year, int target_year) {
  if (years.empty()) throw Error("token sequence: history has no visits");
  if (years.size() > static_cast<std::size_t>(kMaxHistorySlots)) {
    throw Error("token sequence: more than 4 visits");
  }
  if (target_year <= now_year) throw Error("token sequence: target year must follow now");
  for (std::size_t i = 0; i < years.size(); ++i) {
    if (years[i] > now_year || years[i] < now_year - (kMaxHistorySlots - 1)) {
      throw Error("token sequence: visit year " + std::to_string(years[i]) +
                  " outside [now-3, now]");
    }
    if (i > 0 && years[i] <= years[i - 1]) {
      throw Error("token sequence: visit years must be strictly increasing");
    }
  }
}

}  // namespace

TokenSequence build_token_sequence(std::span<const VisitRecord* const> history, int now_year,
                                   int target_year, double baseline_age,
                                   const FeatureSchema& schema, const ImputationStats& stats,
                                   const ModalityCase& modality_case) {
  std::vector<const VisitRecord*> ordered(history.begin(), history.end());
  std::sort(ordered.begin(), ordered.end(),
            [](const VisitRecord* a, const VisitRecord* b) { return a->year < b->year; });
  std::vector<int> years;
  for (const VisitRecord* v : ordered) years.push_back(v->year);
  check_history_years(years, now_year, target_year);

  const auto n = static_cast<Eigen::Index>(ordered.size());
  TokenSequence seq;
  seq.tokens.resize(n, schema.token_width());
  seq.ages.resize(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const VisitRecord& v = *ordered[static_cast<std::size_t>(r)];
    const VisitEncoding enc =
        encode_visit(apply_modality_case(v, modality_case, schema, stats), schema, stats);
    seq.tokens.row(r) = append_horizon(enc, target_year - v.year).transpose();
    seq.ages[r] = baseline_age + v.year;
    seq.positions.push_back(now_year - v.year);
    seq.valid.push_back(1);
  }
  return seq;
}

TokenSequence pad_sequence(const TokenSequence& seq, int slots) {
  if (seq.slots() > slots) throw Error("pad_sequence: sequence longer than slot count");
  TokenSequence out;
  out.tokens = Eigen::MatrixXd::Zero(slots, seq.tokens.cols());
  out.tokens.topRows(seq.slots()) = seq.tokens;
  out.ages = Eigen::VectorXd::Zero(slots);
  out.ages.head(seq.slots()) = seq.ages;
  out.positions = seq.positions;
  out.positions.resize(static_cast<std::size_t>(slots), 0);
  out.valid = seq.valid;
  out.valid.resize(static_cast<std::size_t>(slots), 0);
  return out;
}

EncodedCohort::EncodedCohort(const std::vector<SubjectHistory>& subjects,
                             const FeatureSchema& schema, const ImputationStats& stats,
                             const ModalityCase& modality_case)
    : block_width_(schema.block_width()) {
  blocks_.resize(subjects.size());
  present_.resize(subjects.size());
  baseline_age_.resize(subjects.size());
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const SubjectHistory& subject = subjects[s];
    baseline_age_[s] = subject_baseline_age(subject, schema);
    const int last = subject.visits.empty() ? -1 : subject.visits.back().year;
    blocks_[s].resize(static_cast<std::size_t>(last + 1));
    present_[s].assign(static_cast<std::size_t>(last + 1), 0);
    for (const VisitRecord& v : subject.visits) {
      const VisitEncoding enc =
          encode_visit(apply_modality_case(v, modality_case, schema, stats), schema, stats);
      Eigen::VectorXd block(block_width_);
      block << enc.features, enc.mask;
      blocks_[s][static_cast<std::size_t>(v.year)] = std::move(block);
      present_[s][static_cast<std::size_t>(v.year)] = 1;
    }
  }
}

const Eigen::VectorXd* EncodedCohort::block(std::size_t subject, int year) const {
  if (year < 0 || static_cast<std::size_t>(year) >= present_[subject].size()) return nullptr;
  if (!present_[subject][static_cast<std::size_t>(year)]) return nullptr;
  return &blocks_[subject][static_cast<std::size_t>(year)];
}

TokenSequence EncodedCohort::sequence(std::size_t subject, std::span<const int> years,
                                      int now_year, int target_year) const {
  check_history_years(years, now_year, target_year);
  const auto n = static_cast<Eigen::Index>(years.size());
  TokenSequence seq;
  seq.tokens.resize(n, block_width_ + 1);
  seq.ages.resize(n);
  seq.positions.reserve(years.size());
  seq.valid.assign(years.size(), 1);
  for (Eigen::Index r = 0; r < n; ++r) {
    const int year = years[static_cast<std::size_t>(r)];
    const Eigen::VectorXd* b = block(subject, year);
    if (!b) {
      throw Error("encoded cohort: subject has no visit in year " + std::to_string(year));
    }
    seq.tokens.row(r).head(block_width_) = b->transpose();
    seq.tokens(r, block_width_) = target_year - year;
    seq.ages[r] = baseline_age_[subject] + year;
    seq.positions.push_back(now_year - year);
  }
  return seq;
}

// ---------------------------------------------------------------------------
// Binary cache.

void write_encoded_matrix(const std::string& prefix, const Eigen::MatrixXd& rows,
                          const std::string& schema_hash) {
  static_assert(std::endian::native == std::endian::little,
                "binary formats assume a little-endian host");
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw Error("cannot write " + prefix + ".bin");
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> row_major = rows;
  bin.write(reinterpret_cast<const char*>(row_major.data()),
            static_cast<std::streamsize>(sizeof(double) * row_major.size()));
  std::ofstream side(prefix + ".json");
  if (!side) throw Error("cannot write " + prefix + ".json");
  side << nlohmann::json{{"rows", rows.rows()},
                         {"cols", rows.cols()},
                         {"dtype", "float64-le"},
                         {"order", "row-major"},
                         {"schema_hash", schema_hash}}
              .dump(2)
       << '\n';
}

Eigen::MatrixXd read_encoded_matrix(const std::string& prefix,
                                    const std::string& expected_schema_hash) {
  std::ifstream side(prefix + ".json");
  if (!side) throw Error("cannot read " + prefix + ".json");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(side);
  } catch (const nlohmann::json::exception& e) {
    throw Error("encoded matrix sidecar: " + std::string(e.what()));
  }
  if (meta.value("schema_hash", std::string()) != expected_schema_hash) {
    throw Error("encoded matrix " + prefix + ": schema hash mismatch");
  }
  const auto r = meta.at("rows").get<Eigen::Index>();
  const auto c = meta.at("cols").get<Eigen::Index>();
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> m(r, c);
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw Error("cannot read " + prefix + ".bin");
  bin.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(sizeof(double) * m.size()));
  if (bin.gcount() != static_cast<std::streamsize>(sizeof(double) * m.size())) {
    throw Error("encoded matrix " + prefix + ": truncated data");
  }
  return m;
}

}  // namespace progcast
