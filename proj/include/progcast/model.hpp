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

// Horizon-conditioned transformer encoder classifier over visit tokens:
//
//   token -> linear projection + position table + affine age encoding
//         -> L post-norm encoder layers (masked multi-head attention, FFN)
//         -> mean pooling over valid tokens -> classifier -> softmax(3)
//
// Parameters live in one flat vector so that the optimizer, the L2 penalty,
// checkpoints and gradient checks all work on a single array.

#ifndef PROGCAST_MODEL_HPP_
#define PROGCAST_MODEL_HPP_

#include <Eigen/Dense>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "progcast/features.hpp"
#include "progcast/nn_ops.hpp"
#include "progcast/rng.hpp"

namespace progcast {

struct ModelConfig {
  int token_width = 0;
  int hidden = 128;
  int heads = 1;
  int layers = 1;
  // Width of the classifier's hidden layer; 0 selects a single linear layer
  // (the "[3]" head), 128 the "[128, 3]" head.
  int classifier_hidden = 0;
  double dropout = 0.5;
  int max_positions = kMaxHistorySlots;
  // Ages are z-scored with these before the age encoding.
  double age_mean = 0.0;
  double age_sd = 1.0;
  std::string schema_hash;

  int ff_width() const { return 4 * hidden; }
  int head_dim() const { return hidden / heads; }
  // Throws Error on inconsistent shapes.
  void validate() const;
  // Compact architecture label, e.g. "d16-h2-l1-c3".
  std::string label() const;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// A named slice of the flat parameter vector holding a column-major matrix.
struct Block {
  enum class Role { kWeight, kBias, kGain, kPosition };

  std::string name;
  Eigen::Index offset = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
  Role role = Role::kWeight;

  Eigen::Index size() const { return rows * cols; }
};

struct LayerBlocks {
  Block wq, bq, wk, bk, wv, bv, wo, bo;
  Block ln1_gain, ln1_bias;
  Block ff1_w, ff1_b, ff2_w, ff2_b;
  Block ln2_gain, ln2_bias;
};

struct ParamLayout {
  Block in_w, in_b;       // hidden x token_width, hidden
  Block position;         // max_positions x hidden
  Block age_slope, age_bias;
  std::vector<LayerBlocks> layers;
  Block c1_w, c1_b;       // empty for the single-layer head
  Block c2_w, c2_b;       // 3 x (classifier_hidden or hidden)
  std::vector<Block> blocks;  // declaration order
  Eigen::Index total = 0;

  static ParamLayout build(const ModelConfig& config);
};

template <typename Flat>
auto block_view(Flat& flat, const Block& b) {
  using Scalar = typename std::remove_const_t<Flat>::Scalar;
  if constexpr (std::is_const_v<Flat>) {
    return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>(
        flat.data() + b.offset, b.rows, b.cols);
  } else {
    return Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>>(
        flat.data() + b.offset, b.rows, b.cols);
  }
}

template <typename Flat>
auto vector_view(Flat& flat, const Block& b) {
  using Scalar = typename std::remove_const_t<Flat>::Scalar;
  if constexpr (std::is_const_v<Flat>) {
    return Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(flat.data() + b.offset,
                                                                      b.size());
  } else {
    return Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(flat.data() + b.offset, b.size());
  }
}

class ModelParams {
 public:
  explicit ModelParams(ModelConfig config);

  const ModelConfig& config() const { return config_; }
  const ParamLayout& layout() const { return layout_; }
  const Eigen::VectorXd& values() const { return values_; }
  // Any mutable access invalidates outstanding forward traces.
  Eigen::VectorXd& mutable_values();
  std::uint64_t version() const { return version_; }

  auto view(const Block& b) const { return block_view(values_, b); }
  auto vec(const Block& b) const { return vector_view(values_, b); }

 private:
  ModelConfig config_;
  ParamLayout layout_;
  Eigen::VectorXd values_;
  std::uint64_t version_;
};

// Scaled-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases,
// unit layer-norm gains and an all-zero position table.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Forward / backward.

struct LayerTrace {
  Eigen::MatrixXd input, q, k, v;
  std::vector<Eigen::MatrixXd> attention;  // per head, n x n
  Eigen::MatrixXd heads;                   // concatenated head outputs
  Eigen::MatrixXd attn_mask;               // dropout mask (empty in eval)
  nn::LayerNormCache<double> ln1;
  Eigen::MatrixXd y1, ff_pre, ff_act;
  Eigen::MatrixXd ff_mask;
  nn::LayerNormCache<double> ln2;
};

struct SequenceTrace {
  Eigen::MatrixXd tokens;         // valid rows only
  Eigen::VectorXd ages;           // normalized
  std::vector<int> positions;
  std::vector<LayerTrace> layers;
  Eigen::VectorXd pooled;
  Eigen::VectorXd cls_pre, cls_mask, cls_act;  // hidden classifier layer
  Eigen::VectorXd logits;
  Eigen::VectorXd probs;
};

struct ForwardTrace {
  const ModelParams* params = nullptr;
  std::uint64_t params_version = 0;
  bool train_mode = false;
  std::vector<SequenceTrace> sequences;
};

// Hidden states after the input embedding, one row per slot. Padding rows
// are embedded like any other row and must be masked downstream.
// Throws Error on a position index outside the table.
Eigen::MatrixXd embed_sequence(const ModelParams& params, const TokenSequence& seq);

// One encoder layer over the valid rows of `hidden`. With `rng` non-null,
// inverted dropout is applied to the attention and feed-forward outputs.
// Throws Error if no position is valid.
Eigen::MatrixXd encoder_layer_forward(const ModelParams& params, int layer,
                                      const Eigen::MatrixXd& hidden,
                                      std::span<const std::uint8_t> valid, Rng* dropout_rng,
                                      LayerTrace* trace = nullptr);

// Mean over valid rows. Throws Error if there are none.
Eigen::VectorXd sequence_pool(const Eigen::MatrixXd& hidden, std::span<const std::uint8_t> valid);

// Class probabilities (CN, MCI, AD). Throws Error on non-finite logits.
Eigen::VectorXd classify(const ModelParams& params, const Eigen::VectorXd& pooled);

struct ForwardResult {
  Eigen::MatrixXd probabilities;  // batch x 3
  ForwardTrace trace;
};

// Dropout is active only in train mode (dropout_rng must then be non-null).
ForwardResult forward(const ModelParams& params, std::span<const TokenSequence> batch,
                      bool train_mode, Rng* dropout_rng);

// Eval-mode probabilities without keeping a trace.
Eigen::MatrixXd predict(const ModelParams& params, std::span<const TokenSequence> batch);

// Exact reverse-mode gradient of sum_i <d_probs.row(i), probs_i> with respect
// to every parameter. Throws Error if the parameters changed since forward.
Eigen::VectorXd backward(const ForwardTrace& trace, const Eigen::MatrixXd& d_probs);

// ---------------------------------------------------------------------------
// Checkpoints: `<prefix>.json` (config, block table, metadata) and
// `<prefix>.bin` (little-endian float64 values in block order).

void save_checkpoint(const std::string& prefix, const ModelParams& params,
                     const nlohmann::json& metadata = nlohmann::json::object());
ModelParams load_checkpoint(const std::string& prefix, nlohmann::json* metadata = nullptr);

}  // namespace progcast

#endif  // PROGCAST_MODEL_HPP_
