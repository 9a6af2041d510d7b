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

#include <gtest/gtest.h>

#include <cmath>

#include "progcast/features.hpp"
#include "test_util.hpp"

namespace progcast {
namespace {

using testing::make_visit;

FeatureSchema two_feature_schema(std::vector<std::string> categories) {
  return FeatureSchema({{"x", FeatureKind::kNumeric, {}, Modality::kCognitive},
                        {"c", FeatureKind::kCategorical, std::move(categories), Modality::kStatic}},
                       "");
}

ImputationStats fit(const std::vector<VisitRecord>& visits, const FeatureSchema& schema) {
  std::vector<const VisitRecord*> ptrs;
  for (const auto& v : visits) ptrs.push_back(&v);
  return fit_imputation_stats(std::span<const VisitRecord* const>(ptrs), schema);
}

VisitRecord visit_with(std::optional<double> x, std::optional<std::string> c) {
  VisitRecord v = make_visit("a", 0, Diagnosis::kCN);
  if (x) v.features["x"] = {*x, true};
  if (c) v.features["c"] = {*c, true};
  return v;
}

TEST(ImputationStats, PopulationMoments) {
  const auto schema = two_feature_schema({"A", "B"});
  const auto stats = fit({visit_with(2.0, "A"), visit_with(4.0, "A"), visit_with(std::nullopt, "B")},
                         schema);
  EXPECT_DOUBLE_EQ(stats.mean[0], 3.0);
  EXPECT_DOUBLE_EQ(stats.sd[0], 1.0);
  EXPECT_EQ(stats.mode[1], 0);
}

TEST(ImputationStats, ModeTieTakesSchemaOrder) {
  const auto schema = two_feature_schema({"B", "A"});
  const auto stats = fit({visit_with(1.0, "A"), visit_with(1.0, "B")}, schema);
  EXPECT_EQ(stats.mode[1], 0);  // "B" comes first in the schema
}

TEST(EncodeVisit, AllMissingIsImputationFixedPoint) {
  const auto schema = two_feature_schema({"A", "B", "C"});
  const auto stats = fit({visit_with(1.0, "C"), visit_with(5.0, "C"), visit_with(3.0, "A")}, schema);
  const VisitEncoding e = encode_visit(visit_with(std::nullopt, std::nullopt), schema, stats);
  EXPECT_EQ(e.features[0], 0.0);
  EXPECT_EQ(e.features.segment(1, 3), Eigen::Vector3d(0.0, 0.0, 1.0));
  EXPECT_TRUE(e.mask.isZero());
}

TEST(EncodeVisit, MeanEncodesToZeroObserved) {
  const auto schema = two_feature_schema({"A"});
  const auto stats = fit({visit_with(1.0, "A"), visit_with(5.0, "A")}, schema);
  const VisitEncoding e = encode_visit(visit_with(3.0, "A"), schema, stats);
  EXPECT_EQ(e.features[0], 0.0);
  EXPECT_EQ(e.mask[0], 1.0);
}

TEST(EncodeVisit, RejectsUnknownCategoryAndWrongType) {
  const auto schema = two_feature_schema({"A"});
  const auto stats = fit({visit_with(1.0, "A")}, schema);
  EXPECT_THROW(encode_visit(visit_with(1.0, "Z"), schema, stats), Error);
  VisitRecord v = visit_with(1.0, "A");
  v.features["x"] = {std::string("oops"), true};
  EXPECT_THROW(encode_visit(v, schema, stats), Error);
}

TEST(Schema, WidthArithmetic) {
  const FeatureSchema s({{"a", FeatureKind::kNumeric, {}, Modality::kCognitive},
                         {"b", FeatureKind::kNumeric, {}, Modality::kMri},
                         {"c", FeatureKind::kNumeric, {}, Modality::kCsf},
                         {"k", FeatureKind::kCategorical, {"1", "2", "3", "4"}, Modality::kStatic},
                         {"dx", FeatureKind::kDiagnosis, {}, Modality::kStatic}},
                        "");
  EXPECT_EQ(s.encoded_width(), 8);
  EXPECT_EQ(s.mask_width(), 5);
  EXPECT_EQ(s.block_width(), 13);
  EXPECT_EQ(s.token_width(), 14);
}

TEST(Schema, BlockOf113GivesToken114) {
  // 50 numerics + one 12-way categorical: features 62, mask 51.
  std::vector<FeatureDescriptor> d;
  for (int i = 0; i < 50; ++i) d.push_back({"n" + std::to_string(i), FeatureKind::kNumeric, {}, Modality::kMri});
  std::vector<std::string> cats;
  for (int i = 0; i < 12; ++i) cats.push_back(std::to_string(i));
  d.push_back({"cat", FeatureKind::kCategorical, cats, Modality::kStatic});
  const FeatureSchema s(d, "");
  ASSERT_EQ(s.block_width(), 113);
  EXPECT_EQ(s.token_width(), 114);
}

TEST(Schema, WidthLawOnRandomSchemas) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<FeatureDescriptor> d;
    int expected_features = 0;
    const int n = 1 + static_cast<int>(rng.below(20));
    for (int i = 0; i < n; ++i) {
      if (rng.bernoulli(0.3)) {
        const int k = 1 + static_cast<int>(rng.below(6));
        std::vector<std::string> cats;
        for (int c = 0; c < k; ++c) cats.push_back("v" + std::to_string(c));
        d.push_back({"f" + std::to_string(i), FeatureKind::kCategorical, cats, Modality::kStatic});
        expected_features += k;
      } else {
        d.push_back({"f" + std::to_string(i), FeatureKind::kNumeric, {}, Modality::kMri});
        expected_features += 1;
      }
    }
    const FeatureSchema s(d, "");
    EXPECT_EQ(s.encoded_width(), expected_features);
    EXPECT_EQ(s.token_width(), s.encoded_width() + s.mask_width() + 1);
    EXPECT_EQ(FeatureSchema::from_json(s.to_json()).hash(), s.hash());
  }
}

TEST(Schema, RejectsDuplicatesAndEmptyVocabulary) {
  EXPECT_THROW(FeatureSchema({{"a", FeatureKind::kNumeric, {}, Modality::kMri},
                              {"a", FeatureKind::kNumeric, {}, Modality::kMri}}, ""),
               Error);
  EXPECT_THROW(FeatureSchema({{"k", FeatureKind::kCategorical, {}, Modality::kStatic}}, ""), Error);
}

struct ToyFixture {
  FeatureSchema schema = testing::toy_schema();
  std::vector<VisitRecord> visits;
  ImputationStats stats;

  explicit ToyFixture(std::uint64_t seed, int n = 200) {
    Rng rng(seed);
    for (int i = 0; i < n; ++i) visits.push_back(testing::random_toy_visit(rng, "s" + std::to_string(i), 0));
    stats = fit(visits, schema);
  }
};

TEST(TokenSequence, HorizonIsTargetMinusVisitYear) {
  ToyFixture f(1);
  VisitRecord v3 = f.visits[0], v5 = f.visits[1];
  v3.year = 3;
  v5.year = 5;
  const VisitRecord* h[] = {&v3, &v5};
  const TokenSequence seq =
      build_token_sequence(h, 5, 8, 70.0, f.schema, f.stats, ModalityCase::complete());
  const int last = f.schema.token_width() - 1;
  EXPECT_EQ(seq.tokens(0, last), 5.0);
  EXPECT_EQ(seq.tokens(1, last), 3.0);
  EXPECT_EQ(seq.positions, (std::vector<int>{2, 0}));
  EXPECT_EQ(seq.ages, Eigen::Vector2d(73.0, 75.0));
}

TEST(TokenSequence, SingleNowVisit) {
  ToyFixture f(2);
  const VisitRecord* h[] = {&f.visits[0]};
  const TokenSequence seq =
      build_token_sequence(h, 0, 1, 70.0, f.schema, f.stats, ModalityCase::complete());
  EXPECT_EQ(seq.slots(), 1);
  EXPECT_EQ(seq.positions, std::vector<int>{0});
  EXPECT_EQ(seq.tokens(0, f.schema.token_width() - 1), 1.0);
}

TEST(TokenSequence, PaddingValidity) {
  ToyFixture f(3);
  std::vector<VisitRecord> v(f.visits.begin(), f.visits.begin() + 4);
  for (int i = 0; i < 4; ++i) v[static_cast<std::size_t>(i)].year = i;
  const VisitRecord* one[] = {&v[3]};
  const VisitRecord* four[] = {&v[0], &v[1], &v[2], &v[3]};
  const auto a = pad_sequence(build_token_sequence(one, 3, 4, 70.0, f.schema, f.stats, ModalityCase::complete()));
  const auto b = pad_sequence(build_token_sequence(four, 3, 4, 70.0, f.schema, f.stats, ModalityCase::complete()));
  EXPECT_EQ(a.valid, (std::vector<std::uint8_t>{1, 0, 0, 0}));
  EXPECT_EQ(b.valid, (std::vector<std::uint8_t>{1, 1, 1, 1}));
  EXPECT_EQ(a.length(), 1);
}

TEST(TokenSequence, RejectsBadHistories) {
  ToyFixture f(4);
  VisitRecord a = f.visits[0], b = f.visits[1];
  a.year = 0;
  b.year = 4;
  const VisitRecord* too_old[] = {&a, &b};
  EXPECT_THROW(build_token_sequence(too_old, 4, 5, 70.0, f.schema, f.stats, ModalityCase::complete()), Error);
  const VisitRecord* one[] = {&b};
  EXPECT_THROW(build_token_sequence(one, 4, 4, 70.0, f.schema, f.stats, ModalityCase::complete()), Error);
  EXPECT_THROW(build_token_sequence({}, 4, 5, 70.0, f.schema, f.stats, ModalityCase::complete()), Error);
  b.year = 0;
  const VisitRecord* dup[] = {&a, &b};
  EXPECT_THROW(build_token_sequence(dup, 0, 1, 70.0, f.schema, f.stats, ModalityCase::complete()), Error);
}

TEST(ModalityCase, CompleteIsIdentity) {
  ToyFixture f(5);
  for (const auto& v : f.visits) {
    EXPECT_EQ(apply_modality_case(v, ModalityCase::complete(), f.schema, f.stats), v);
  }
}

TEST(ModalityCase, MriOnlySuppressesCognitiveScores) {
  ToyFixture f(6);
  VisitRecord v = f.visits[0];
  v.features["mmse"] = {27.0, true};
  const VisitRecord out = apply_modality_case(v, ModalityCase::mri_only(), f.schema, f.stats);
  const int i = f.schema.find("mmse");
  EXPECT_FALSE(out.features.at("mmse").observed);
  const VisitEncoding e = encode_visit(out, f.schema, f.stats);
  EXPECT_EQ(e.mask[i], 0.0);
  EXPECT_EQ(e.features[f.schema.offset(static_cast<std::size_t>(i))], 0.0);
  EXPECT_EQ(out.features.at("hippocampus"), v.features.at("hippocampus"));
}

TEST(ModalityCase, ParseAndLabel) {
  EXPECT_EQ(ModalityCase::parse("complete"), ModalityCase::complete());
  EXPECT_EQ(ModalityCase::parse("mri_only"), ModalityCase::mri_only());
  EXPECT_EQ(ModalityCase::mri_only().label(), "mri_only");
  const ModalityCase c{Modality::kMri, Modality::kCsf, Modality::kStatic};
  EXPECT_EQ(ModalityCase::parse(c.name()), c);
  EXPECT_THROW(ModalityCase::parse("PET"), Error);
}

// Idempotence, commutation with imputation and mask faithfulness over random
// visits and every modality subset.
TEST(ModalityCase, Properties) {
  ToyFixture f(7);
  Rng rng(70);
  for (unsigned bits = 0; bits < 8; ++bits) {
    ModalityCase c{Modality::kStatic};
    std::vector<Modality> kept{Modality::kStatic};
    for (unsigned m = 0; m < 3; ++m) {
      if ((bits >> m) & 1u) kept.push_back(static_cast<Modality>(m));
    }
    if (kept.size() == 2) c = {kept[0], kept[1]};
    if (kept.size() == 3) c = {kept[0], kept[1], kept[2]};
    if (kept.size() == 4) c = {kept[0], kept[1], kept[2], kept[3]};
    for (int i = 0; i < 50; ++i) {
      const VisitRecord v = testing::random_toy_visit(rng, "p", 0);
      const VisitRecord once = apply_modality_case(v, c, f.schema, f.stats);
      EXPECT_EQ(apply_modality_case(once, c, f.schema, f.stats), once);
      const VisitEncoding e = encode_visit(once, f.schema, f.stats);
      for (std::size_t d = 0; d < f.schema.size(); ++d) {
        const auto& desc = f.schema[d];
        if (desc.kind == FeatureKind::kDiagnosis) continue;
        const bool raw = v.features.count(desc.name) && v.features.at(desc.name).observed;
        EXPECT_EQ(e.mask[static_cast<Eigen::Index>(d)], raw && c.contains(desc.modality) ? 1.0 : 0.0);
      }
      // Dropping a feature encodes exactly like never having observed it.
      VisitRecord missing = v;
      for (const auto& desc : f.schema.descriptors()) {
        if (!c.contains(desc.modality) && missing.features.count(desc.name)) {
          missing.features[desc.name].observed = false;
        }
      }
      const VisitEncoding e2 = encode_visit(missing, f.schema, f.stats);
      EXPECT_EQ(e.features, e2.features);
      EXPECT_EQ(e.mask, e2.mask);
    }
  }
}

TEST(EncodeVisit, ZScoreRoundTrip) {
  ToyFixture f(8);
  for (const auto& v : f.visits) {
    const VisitEncoding e = encode_visit(v, f.schema, f.stats);
    for (std::size_t d = 0; d < f.schema.size(); ++d) {
      const auto& desc = f.schema[d];
      if (desc.kind != FeatureKind::kNumeric || !v.features.at(desc.name).observed) continue;
      const double x = std::get<double>(v.features.at(desc.name).value);
      const double back = decode_numeric(e.features[f.schema.offset(d)], d, f.stats);
      EXPECT_NEAR(back, x, 1e-12 * std::max(1.0, std::abs(x)));
    }
  }
}

TEST(EncodeVisit, HeldOutValuesNeverReachStats) {
  ToyFixture train(9);
  ToyFixture held(10, 50);
  const ImputationStats before = fit(train.visits, train.schema);
  std::vector<VisitEncoding> enc_before;
  for (const auto& v : train.visits) enc_before.push_back(encode_visit(v, train.schema, before));
  // Mutating held-out visits changes nothing fitted on the train visits.
  for (auto& v : held.visits) v.features["mmse"] = {1e6, true};
  const ImputationStats after = fit(train.visits, train.schema);
  EXPECT_EQ(after.to_json(), before.to_json());
  for (std::size_t i = 0; i < train.visits.size(); ++i) {
    const VisitEncoding e = encode_visit(train.visits[i], train.schema, after);
    EXPECT_EQ(e.features, enc_before[i].features);
  }
  EXPECT_EQ(ImputationStats::from_json(before.to_json()).to_json(), before.to_json());
}

TEST(EncodedCohort, MatchesDirectTokenization) {
  GeneratorConfig g;
  g.n_subjects = 40;
  const auto subjects = filter_cohort(generate_synthetic_cohort(g)).subjects;
  const FeatureSchema schema = synthetic_schema();
  const ImputationStats stats = fit_imputation_stats(subjects, schema);
  const EncodedCohort enc(subjects, schema, stats, ModalityCase::mri_only());
  for (std::size_t s = 0; s < subjects.size(); ++s) {
    const auto& visits = subjects[s].visits;
    const int now = visits.back().year;
    std::vector<const VisitRecord*> hist;
    std::vector<int> years;
    for (const auto& v : visits) {
      if (v.year >= now - 3) hist.push_back(&v), years.push_back(v.year);
    }
    const TokenSequence a = build_token_sequence(hist, now, now + 2, enc.baseline_age(s), schema,
                                                 stats, ModalityCase::mri_only());
    const TokenSequence b = enc.sequence(s, years, now, now + 2);
    EXPECT_EQ(a.tokens, b.tokens);
    EXPECT_EQ(a.ages, b.ages);
    EXPECT_EQ(a.positions, b.positions);
  }
}

TEST(EncodedMatrix, RoundTripAndHashCheck) {
  const std::string dir = testing::scratch_dir("matrix");
  Eigen::MatrixXd m(3, 4);
  m << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 0.125;
  write_encoded_matrix(dir + "/m", m, "abc");
  EXPECT_EQ(read_encoded_matrix(dir + "/m", "abc"), m);
  EXPECT_THROW(read_encoded_matrix(dir + "/m", "xyz"), Error);
}

}  // namespace
}  // namespace progcast
