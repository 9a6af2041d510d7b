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

#include "progcast/model.hpp"
#include "progcast/nn_ops.hpp"
#include "test_util.hpp"

namespace progcast {
namespace {

using testing::random_sequence;
using testing::small_model;

constexpr int kWidth = 7;

TEST(ModelConfig, ShapesAndLabel) {
  ModelConfig c = small_model(kWidth, 128, 2);
  EXPECT_EQ(c.head_dim(), 64);
  EXPECT_EQ(c.ff_width(), 512);
  EXPECT_EQ(c.label(), "d128-h2-l1-c3");
  c.classifier_hidden = 128;
  EXPECT_EQ(c.label(), "d128-h2-l1-c128x3");
  EXPECT_EQ(ModelConfig::from_json(c.to_json()), c);
  c.heads = 3;
  EXPECT_THROW(c.validate(), Error);
}

TEST(InitParams, ZeroPositionTableAndDeterminism) {
  const ModelConfig c = small_model(kWidth, 16, 2, 2, 5);
  const ModelParams a = init_params(c, 4);
  EXPECT_TRUE(a.view(a.layout().position).isZero());
  EXPECT_EQ(a.view(a.layout().position).rows(), 4);
  EXPECT_EQ(a.values(), init_params(c, 4).values());
  EXPECT_NE(a.values(), init_params(c, 5).values());
}

TEST(InitParams, LayoutCoversTheVector) {
  const ModelConfig c = small_model(kWidth, 16, 4, 2, 8);
  const ParamLayout L = ParamLayout::build(c);
  Eigen::Index next = 0;
  for (const Block& b : L.blocks) {
    EXPECT_EQ(b.offset, next) << b.name;
    next += b.size();
  }
  EXPECT_EQ(next, L.total);
}

TEST(Embedding, ZeroInputAtInitIsZero) {
  const ModelConfig c = small_model(kWidth);
  const ModelParams p = init_params(c, 1);
  TokenSequence seq;
  seq.tokens = Eigen::MatrixXd::Zero(1, kWidth);
  seq.ages = Eigen::VectorXd::Constant(1, c.age_mean);  // normalizes to 0
  seq.positions = {0};
  seq.valid = {1};
  EXPECT_TRUE(embed_sequence(p, seq).isZero());
}

TEST(Embedding, AgeIsAffine) {
  const ModelConfig c = small_model(kWidth);
  const ModelParams p = testing::perturbed_params(c, 2);
  Rng rng(2);
  TokenSequence seq = random_sequence(rng, kWidth, 1);
  seq.tokens.conservativeResize(2, Eigen::NoChange);
  seq.tokens.row(1) = seq.tokens.row(0);
  seq.ages.conservativeResize(2);
  seq.ages[1] = seq.ages[0] + 1.0;
  seq.positions.push_back(seq.positions[0]);
  seq.valid.push_back(1);
  const Eigen::MatrixXd h = embed_sequence(p, seq);
  const Eigen::VectorXd slope = p.vec(p.layout().age_slope);
  EXPECT_TRUE((h.row(1) - h.row(0)).transpose().isApprox(slope / c.age_sd, 1e-12));
}

TEST(Embedding, PositionsIdenticalAtInit) {
  const ModelParams p = init_params(small_model(kWidth), 3);
  Rng rng(3);
  TokenSequence a = random_sequence(rng, kWidth, 1);
  TokenSequence b = a;
  a.positions = {0};
  b.positions = {2};
  EXPECT_EQ(embed_sequence(p, a), embed_sequence(p, b));
  const TokenSequence batch[] = {a, b};
  const Eigen::MatrixXd probs = predict(p, batch);
  EXPECT_EQ(probs.row(0), probs.row(1));
  b.positions = {4};
  EXPECT_THROW(embed_sequence(p, b), Error);
}

TEST(Attention, SingleKeyReturnsValueProjection) {
  const ModelParams p = testing::perturbed_params(small_model(kWidth), 4);
  Rng rng(4);
  const Eigen::MatrixXd hidden = Eigen::MatrixXd::Random(1, 8);
  const std::uint8_t valid[] = {1};
  LayerTrace trace;
  encoder_layer_forward(p, 0, hidden, valid, nullptr, &trace);
  for (const auto& a : trace.attention) EXPECT_DOUBLE_EQ(a(0, 0), 1.0);
  EXPECT_TRUE(trace.heads.isApprox(trace.v, 1e-14));
}

TEST(Attention, PaddedRowsNeverContribute) {
  const ModelParams p = testing::perturbed_params(small_model(kWidth), 5);
  Rng rng(5);
  Eigen::MatrixXd hidden(4, 8);
  for (Eigen::Index i = 0; i < hidden.size(); ++i) hidden.data()[i] = rng.normal();
  const std::uint8_t valid[] = {1, 0, 1, 0};
  const Eigen::MatrixXd a = encoder_layer_forward(p, 0, hidden, valid, nullptr);
  hidden.row(1).setConstant(1e3);
  hidden.row(3).setConstant(-7.0);
  const Eigen::MatrixXd b = encoder_layer_forward(p, 0, hidden, valid, nullptr);
  EXPECT_LE((a.row(0) - b.row(0)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE((a.row(2) - b.row(2)).cwiseAbs().maxCoeff(), 1e-10);
  const std::uint8_t none[] = {0, 0, 0, 0};
  EXPECT_THROW(encoder_layer_forward(p, 0, hidden, none, nullptr), Error);
}

TEST(Attention, IdenticalRowsGiveIdenticalOutputs) {
  const ModelParams p = testing::perturbed_params(small_model(kWidth), 6);
  Eigen::MatrixXd hidden(2, 8);
  hidden.row(0) = Eigen::RowVectorXd::LinSpaced(8, -1.0, 1.0);
  hidden.row(1) = hidden.row(0);
  const std::uint8_t valid[] = {1, 1};
  const Eigen::MatrixXd out = encoder_layer_forward(p, 0, hidden, valid, nullptr);
  EXPECT_EQ(out.row(0), out.row(1));
}

TEST(Pooling, MeanOverValidRows) {
  Eigen::MatrixXd h(3, 2);
  h << 1, 2, 3, 6, 100, -100;
  const std::uint8_t one[] = {1, 0, 0};
  const std::uint8_t two[] = {1, 1, 0};
  EXPECT_EQ(sequence_pool(h, one), Eigen::Vector2d(1, 2));
  EXPECT_EQ(sequence_pool(h, two), Eigen::Vector2d(2, 4));
  h.row(2).setConstant(42.0);
  EXPECT_EQ(sequence_pool(h, two), Eigen::Vector2d(2, 4));
}

TEST(Softmax, Basics) {
  EXPECT_TRUE(nn::softmax(Eigen::Vector3d(0, 0, 0)).isApprox(Eigen::Vector3d::Constant(1.0 / 3.0)));
  EXPECT_NEAR(nn::softmax(Eigen::Vector3d(1, 1, 1 + 800.0))[2], 1.0, 1e-15);
  Rng rng(7);
  for (int i = 0; i < 100; ++i) {
    const Eigen::Vector3d z(rng.normal(), rng.normal(), rng.normal());
    const double c = rng.uniform(-50.0, 50.0);
    EXPECT_TRUE(nn::softmax(z).isApprox(nn::softmax((z.array() + c).matrix()), 1e-12));
  }
}

std::vector<TokenSequence> random_batch(Rng& rng, int n) {
  std::vector<TokenSequence> batch;
  for (int i = 0; i < n; ++i) batch.push_back(random_sequence(rng, kWidth, 1 + static_cast<int>(rng.below(4))));
  return batch;
}

TEST(Forward, DistributionsAndDeterminism) {
  const ModelParams p = testing::perturbed_params(small_model(kWidth, 8, 2, 2, 6), 8);
  Rng rng(8);
  const auto batch = random_batch(rng, 20);
  const Eigen::MatrixXd a = predict(p, batch);
  EXPECT_EQ(a, predict(p, batch));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-12);
    EXPECT_GT(a.row(i).minCoeff(), 0.0);
  }
}

TEST(Forward, BatchingAndPaddingInvariance) {
  const ModelParams p = testing::perturbed_params(small_model(kWidth, 8, 2, 2, 6), 9);
  Rng rng(9);
  const auto batch = random_batch(rng, 12);
  const Eigen::MatrixXd together = predict(p, batch);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const TokenSequence alone[] = {batch[i]};
    TokenSequence padded = pad_sequence(batch[i]);
    for (int r = batch[i].slots(); r < padded.slots(); ++r) {
      padded.tokens.row(r).setConstant(rng.normal() * 50.0);
      padded.ages[r] = 200.0;
    }
    const TokenSequence pad_batch[] = {padded};
    const auto row = static_cast<Eigen::Index>(i);
    EXPECT_LE((predict(p, alone).row(0) - together.row(row)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LE((predict(p, pad_batch).row(0) - together.row(row)).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Forward, TokenOrderIsIrrelevantGivenEncodings) {
  const ModelParams p = testing::perturbed_params(small_model(kWidth, 8, 2, 2, 6), 10);
  Rng rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    const TokenSequence seq = random_sequence(rng, kWidth, 4);
    TokenSequence rev = seq;
    for (int r = 0; r < 4; ++r) {
      rev.tokens.row(r) = seq.tokens.row(3 - r);
      rev.ages[r] = seq.ages[3 - r];
      rev.positions[static_cast<std::size_t>(r)] = seq.positions[static_cast<std::size_t>(3 - r)];
    }
    const TokenSequence both[] = {seq, rev};
    const Eigen::MatrixXd out = predict(p, both);
    EXPECT_LE((out.row(0) - out.row(1)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Forward, TrainModeNeedsRngWhenDropping) {
  ModelConfig c = small_model(kWidth);
  c.dropout = 0.5;
  const ModelParams p = init_params(c, 11);
  Rng rng(11);
  const auto batch = random_batch(rng, 3);
  EXPECT_THROW(forward(p, batch, true, nullptr), Error);
  Rng d1(1), d2(1);
  EXPECT_EQ(forward(p, batch, true, &d1).probabilities, forward(p, batch, true, &d2).probabilities);
}

TEST(Backward, MatchesFiniteDifferences) {
  Rng rng(12);
  const auto batch = random_batch(rng, 5);
  EXPECT_LT(testing::gradient_check(testing::perturbed_params(small_model(kWidth), 12), batch, 1, 0), 1e-4);
}

TEST(Backward, MatchesFiniteDifferencesDeepWithDropout) {
  ModelConfig c = small_model(kWidth, 8, 2, 2, 5);
  c.dropout = 0.3;
  Rng rng(13);
  const auto batch = random_batch(rng, 4);
  EXPECT_LT(testing::gradient_check(testing::perturbed_params(c, 13), batch, 2, 0), 1e-4);
}

TEST(Backward, CrossEntropyGradientAtLogits) {
  const ModelParams p = testing::perturbed_params(small_model(kWidth), 14);
  Rng rng(14);
  const auto batch = random_batch(rng, 1);
  const ForwardResult fr = forward(p, batch, false, nullptr);
  const int y = 1;
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(1, kNumClasses);
  d(0, y) = -1.0 / fr.probabilities(0, y);  // d(-log p_y)/dp
  const Eigen::VectorXd g = backward(fr.trace, d);
  Eigen::Vector3d expected = fr.probabilities.row(0).transpose();
  expected[y] -= 1.0;
  EXPECT_TRUE(vector_view(g, p.layout().c2_b).isApprox(expected, 1e-12));
}

TEST(Backward, UnusedParametersGetZeroGradient) {
  const ModelParams p = testing::perturbed_params(small_model(kWidth), 15);
  Rng rng(15);
  TokenSequence seq = random_sequence(rng, kWidth, 2);
  seq.positions = {0, 1};
  const TokenSequence batch[] = {seq};
  const ForwardResult fr = forward(p, batch, false, nullptr);
  const Eigen::VectorXd g = backward(fr.trace, Eigen::MatrixXd::Ones(1, 3) + Eigen::MatrixXd::Random(1, 3));
  const auto pos = block_view(g, p.layout().position);
  EXPECT_TRUE(pos.row(2).isZero());
  EXPECT_TRUE(pos.row(3).isZero());
  EXPECT_FALSE(pos.row(0).isZero());
}

TEST(Backward, StaleTraceIsRejected) {
  ModelParams p = init_params(small_model(kWidth), 16);
  Rng rng(16);
  const auto batch = random_batch(rng, 2);
  const ForwardResult fr = forward(p, batch, false, nullptr);
  p.mutable_values()[0] += 1.0;
  EXPECT_THROW(backward(fr.trace, Eigen::MatrixXd::Ones(2, 3)), Error);
}

TEST(Checkpoint, RoundTrip) {
  const std::string dir = testing::scratch_dir("ckpt");
  const ModelParams p = testing::perturbed_params(small_model(kWidth, 8, 2, 2, 4), 17);
  save_checkpoint(dir + "/m", p, {{"fold", 3}});
  nlohmann::json meta;
  const ModelParams q = load_checkpoint(dir + "/m", &meta);
  EXPECT_EQ(q.config(), p.config());
  EXPECT_EQ(q.values(), p.values());
  EXPECT_EQ(meta.at("fold"), 3);
  EXPECT_THROW(load_checkpoint(dir + "/missing"), Error);
}

}  // namespace
}  // namespace progcast
