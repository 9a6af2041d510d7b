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

#include "progcast/model.hpp"

#include <atomic>
#include <bit>
#include <cmath>
#include <fstream>

namespace progcast {
namespace {

std::atomic<std::uint64_t> g_next_version{1};

std::uint64_t fresh_version() { return g_next_version.fetch_add(1, std::memory_order_relaxed); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and layout.

void ModelConfig::validate() const {
  if (token_width < 1) throw Error("model config: token_width must be positive");
  if (hidden < 1 || heads < 1 || layers < 1) {
    throw Error("model config: hidden, heads and layers must be positive");
  }
  if (hidden % heads != 0) {
    throw Error("model config: hidden=" + std::to_string(hidden) + " not divisible by heads=" +
                std::to_string(heads));
  }
  if (classifier_hidden < 0) throw Error("model config: classifier_hidden must be >= 0");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("model config: dropout must be in [0,1)");
  if (max_positions < 1) throw Error("model config: max_positions must be positive");
  if (!(age_sd > 0.0)) throw Error("model config: age_sd must be positive");
}

std::string ModelConfig::label() const {
  return "d" + std::to_string(hidden) + "-h" + std::to_string(heads) + "-l" +
         std::to_string(layers) + "-c" +
         (classifier_hidden > 0 ? std::to_string(classifier_hidden) + "x3" : std::string("3"));
}

nlohmann::json ModelConfig::to_json() const {
  return {{"token_width", token_width},
          {"hidden", hidden},
          {"heads", heads},
          {"layers", layers},
          {"classifier_hidden", classifier_hidden},
          {"dropout", dropout},
          {"max_positions", max_positions},
          {"age_mean", age_mean},
          {"age_sd", age_sd},
          {"schema_hash", schema_hash}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.token_width = j.value("token_width", c.token_width);
    c.hidden = j.value("hidden", c.hidden);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.classifier_hidden = j.value("classifier_hidden", c.classifier_hidden);
    c.dropout = j.value("dropout", c.dropout);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.age_mean = j.value("age_mean", c.age_mean);
    c.age_sd = j.value("age_sd", c.age_sd);
    c.schema_hash = j.value("schema_hash", c.schema_hash);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("model config: ") + e.what());
  }
  return c;
}

ParamLayout ParamLayout::build(const ModelConfig& config) {
  config.validate();
  ParamLayout L;
  auto add = [&L](std::string name, Eigen::Index rows, Eigen::Index cols, Block::Role role) {
    Block b{std::move(name), L.total, rows, cols, role};
    L.total += b.size();
    L.blocks.push_back(b);
    return b;
  };
  using R = Block::Role;
  const Eigen::Index d = config.hidden;
  const Eigen::Index f = config.ff_width();
  L.in_w = add("input.weight", d, config.token_width, R::kWeight);
  L.in_b = add("input.bias", d, 1, R::kBias);
  L.position = add("position.table", config.max_positions, d, R::kPosition);
  L.age_slope = add("age.slope", d, 1, R::kWeight);
  L.age_bias = add("age.bias", d, 1, R::kBias);
  for (int l = 0; l < config.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerBlocks lb;
    lb.wq = add(p + "attn.q.weight", d, d, R::kWeight);
    lb.bq = add(p + "attn.q.bias", d, 1, R::kBias);
    lb.wk = add(p + "attn.k.weight", d, d, R::kWeight);
    lb.bk = add(p + "attn.k.bias", d, 1, R::kBias);
    lb.wv = add(p + "attn.v.weight", d, d, R::kWeight);
    lb.bv = add(p + "attn.v.bias", d, 1, R::kBias);
    lb.wo = add(p + "attn.out.weight", d, d, R::kWeight);
    lb.bo = add(p + "attn.out.bias", d, 1, R::kBias);
    lb.ln1_gain = add(p + "norm1.gain", d, 1, R::kGain);
    lb.ln1_bias = add(p + "norm1.bias", d, 1, R::kBias);
    lb.ff1_w = add(p + "ff1.weight", f, d, R::kWeight);
    lb.ff1_b = add(p + "ff1.bias", f, 1, R::kBias);
    lb.ff2_w = add(p + "ff2.weight", d, f, R::kWeight);
    lb.ff2_b = add(p + "ff2.bias", d, 1, R::kBias);
    lb.ln2_gain = add(p + "norm2.gain", d, 1, R::kGain);
    lb.ln2_bias = add(p + "norm2.bias", d, 1, R::kBias);
    L.layers.push_back(std::move(lb));
  }
  Eigen::Index cls_in = d;
  if (config.classifier_hidden > 0) {
    L.c1_w = add("classifier.hidden.weight", config.classifier_hidden, d, R::kWeight);
    L.c1_b = add("classifier.hidden.bias", config.classifier_hidden, 1, R::kBias);
    cls_in = config.classifier_hidden;
  }
  L.c2_w = add("classifier.out.weight", kNumClasses, cls_in, R::kWeight);
  L.c2_b = add("classifier.out.bias", kNumClasses, 1, R::kBias);
  return L;
}

ModelParams::ModelParams(ModelConfig config)
    : config_(std::move(config)),
      layout_(ParamLayout::build(config_)),
      values_(Eigen::VectorXd::Zero(layout_.total)),
      version_(fresh_version()) {}

Eigen::VectorXd& ModelParams::mutable_values() {
  version_ = fresh_version();
  return values_;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams params(config);
  Rng rng(seed);
  Eigen::VectorXd& v = params.mutable_values();
  for (const Block& b : params.layout().blocks) {
    auto m = block_view(v, b);
    switch (b.role) {
      case Block::Role::kWeight: {
        // Blocks are stored (fan_out x fan_in).
        const double bound = std::sqrt(6.0 / static_cast<double>(b.rows + b.cols));
        for (Eigen::Index c = 0; c < b.cols; ++c) {
          for (Eigen::Index r = 0; r < b.rows; ++r) m(r, c) = rng.uniform(-bound, bound);
        }
        break;
      }
      case Block::Role::kGain:
        m.setOnes();
        break;
      case Block::Role::kBias:
      case Block::Role::kPosition:
        m.setZero();
        break;
    }
  }
  return params;
}

// ---------------------------------------------------------------------------
// Forward.

namespace {

Eigen::MatrixXd dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Eigen::MatrixXd m(rows, cols);
  const double keep_scale = 1.0 / (1.0 - p);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = rng.bernoulli(p) ? 0.0 : keep_scale;
  }
  return m;
}

struct Compact {
  Eigen::MatrixXd tokens;
  Eigen::VectorXd ages;  // normalized
  std::vector<int> positions;
};

void check_position(const ModelConfig& config, int p) {
  if (p < 0 || p >= config.max_positions) {
    throw Error("position index " + std::to_string(p) + " outside [0, " +
                std::to_string(config.max_positions - 1) + "]");
  }
}

Compact compact(const ModelParams& params, const TokenSequence& seq) {
  const ModelConfig& cfg = params.config();
  if (seq.tokens.cols() != cfg.token_width) {
    throw Error("token width " + std::to_string(seq.tokens.cols()) + " does not match model (" +
                std::to_string(cfg.token_width) + ")");
  }
  Compact c;
  const int n = seq.length();
  if (n == 0) throw Error("sequence has no valid tokens");
  c.tokens.resize(n, seq.tokens.cols());
  c.ages.resize(n);
  Eigen::Index r = 0;
  for (Eigen::Index i = 0; i < seq.tokens.rows(); ++i) {
    if (!seq.valid[static_cast<std::size_t>(i)]) continue;
    const int p = seq.positions[static_cast<std::size_t>(i)];
    check_position(cfg, p);
    c.tokens.row(r) = seq.tokens.row(i);
    c.ages[r] = (seq.ages[i] - cfg.age_mean) / cfg.age_sd;
    c.positions.push_back(p);
    ++r;
  }
  return c;
}

Eigen::MatrixXd embed_rows(const ModelParams& params, const Eigen::MatrixXd& tokens,
                           const Eigen::VectorXd& ages_z, const std::vector<int>& positions) {
  const ParamLayout& L = params.layout();
  Eigen::MatrixXd x = nn::linear_rows(tokens, params.view(L.in_w), params.vec(L.in_b));
  const auto pos = params.view(L.position);
  const auto slope = params.vec(L.age_slope);
  const auto bias = params.vec(L.age_bias);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    x.row(r) += pos.row(positions[static_cast<std::size_t>(r)]);
    x.row(r) += (ages_z[r] * slope + bias).transpose();
  }
  return x;
}

// Encoder layer over rows that are all valid.
Eigen::MatrixXd layer_core(const ModelParams& params, int layer, const Eigen::MatrixXd& x,
                           Rng* rng, LayerTrace* tr) {
  const ModelConfig& cfg = params.config();
  const LayerBlocks& B = params.layout().layers[static_cast<std::size_t>(layer)];
  const Eigen::Index n = x.rows();
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Eigen::MatrixXd q = nn::linear_rows(x, params.view(B.wq), params.vec(B.bq));
  Eigen::MatrixXd k = nn::linear_rows(x, params.view(B.wk), params.vec(B.bk));
  Eigen::MatrixXd v = nn::linear_rows(x, params.view(B.wv), params.vec(B.bv));
  Eigen::MatrixXd heads(n, cfg.hidden);
  for (int h = 0; h < cfg.heads; ++h) {
    const auto qh = q.middleCols(h * dh, dh);
    const auto kh = k.middleCols(h * dh, dh);
    const auto vh = v.middleCols(h * dh, dh);
    Eigen::MatrixXd scores = (qh * kh.transpose()) * scale;
    Eigen::MatrixXd attn = nn::softmax_rows(scores);
    heads.middleCols(h * dh, dh) = attn * vh;
    if (tr) tr->attention.push_back(std::move(attn));
  }
  Eigen::MatrixXd z = nn::linear_rows(heads, params.view(B.wo), params.vec(B.bo));
  Eigen::MatrixXd attn_mask;
  if (rng && cfg.dropout > 0.0) {
    attn_mask = dropout_mask(n, cfg.hidden, cfg.dropout, *rng);
    z = z.cwiseProduct(attn_mask);
  }
  nn::LayerNormCache<double> ln1;
  Eigen::MatrixXd y1 =
      nn::layer_norm(x + z, params.vec(B.ln1_gain), params.vec(B.ln1_bias), tr ? &ln1 : nullptr);

  Eigen::MatrixXd ff_pre = nn::linear_rows(y1, params.view(B.ff1_w), params.vec(B.ff1_b));
  Eigen::MatrixXd ff_act = nn::relu(ff_pre);
  Eigen::MatrixXd ff_out = nn::linear_rows(ff_act, params.view(B.ff2_w), params.vec(B.ff2_b));
  Eigen::MatrixXd ff_mask;
  if (rng && cfg.dropout > 0.0) {
    ff_mask = dropout_mask(n, cfg.hidden, cfg.dropout, *rng);
    ff_out = ff_out.cwiseProduct(ff_mask);
  }
  nn::LayerNormCache<double> ln2;
  Eigen::MatrixXd out = nn::layer_norm(y1 + ff_out, params.vec(B.ln2_gain),
                                       params.vec(B.ln2_bias), tr ? &ln2 : nullptr);
  if (tr) {
    tr->input = x;
    tr->q = std::move(q);
    tr->k = std::move(k);
    tr->v = std::move(v);
    tr->heads = std::move(heads);
    tr->attn_mask = std::move(attn_mask);
    tr->ln1 = std::move(ln1);
    tr->y1 = std::move(y1);
    tr->ff_pre = std::move(ff_pre);
    tr->ff_act = std::move(ff_act);
    tr->ff_mask = std::move(ff_mask);
    tr->ln2 = std::move(ln2);
  }
  return out;
}

Eigen::VectorXd logits_core(const ModelParams& params, const Eigen::VectorXd& pooled, Rng* rng,
                            SequenceTrace* tr) {
  const ModelConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  Eigen::VectorXd logits;
  if (cfg.classifier_hidden > 0) {
    Eigen::VectorXd pre = params.view(L.c1_w) * pooled + params.vec(L.c1_b);
    Eigen::VectorXd act = pre.cwiseMax(0.0);
    Eigen::VectorXd mask;
    if (rng && cfg.dropout > 0.0) {
      mask = dropout_mask(act.size(), 1, cfg.dropout, *rng);
      act = act.cwiseProduct(mask);
    }
    logits = params.view(L.c2_w) * act + params.vec(L.c2_b);
    if (tr) {
      tr->cls_pre = std::move(pre);
      tr->cls_mask = std::move(mask);
      tr->cls_act = std::move(act);
    }
  } else {
    logits = params.view(L.c2_w) * pooled + params.vec(L.c2_b);
  }
  if (!logits.allFinite()) throw Error("classifier produced non-finite logits");
  return logits;
}

Eigen::VectorXd forward_sequence(const ModelParams& params, const TokenSequence& seq, Rng* rng,
                                 SequenceTrace* tr) {
  Compact c = compact(params, seq);
  Eigen::MatrixXd x = embed_rows(params, c.tokens, c.ages, c.positions);
  if (tr) tr->layers.resize(static_cast<std::size_t>(params.config().layers));
  for (int l = 0; l < params.config().layers; ++l) {
    x = layer_core(params, l, x, rng, tr ? &tr->layers[static_cast<std::size_t>(l)] : nullptr);
  }
  Eigen::VectorXd pooled = x.colwise().mean().transpose();
  Eigen::VectorXd logits = logits_core(params, pooled, rng, tr);
  Eigen::VectorXd probs = nn::softmax(logits);
  if (tr) {
    tr->tokens = std::move(c.tokens);
    tr->ages = std::move(c.ages);
    tr->positions = std::move(c.positions);
    tr->pooled = std::move(pooled);
    tr->logits = std::move(logits);
    tr->probs = probs;
  }
  return probs;
}

}  // namespace

Eigen::MatrixXd embed_sequence(const ModelParams& params, const TokenSequence& seq) {
  const ModelConfig& cfg = params.config();
  if (seq.tokens.cols() != cfg.token_width) throw Error("token width does not match model");
  Eigen::VectorXd ages_z = (seq.ages.array() - cfg.age_mean) / cfg.age_sd;
  for (int p : seq.positions) check_position(cfg, p);
  return embed_rows(params, seq.tokens, ages_z, seq.positions);
}

Eigen::MatrixXd encoder_layer_forward(const ModelParams& params, int layer,
                                      const Eigen::MatrixXd& hidden,
                                      std::span<const std::uint8_t> valid, Rng* dropout_rng,
                                      LayerTrace* trace) {
  std::vector<Eigen::Index> rows;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) rows.push_back(static_cast<Eigen::Index>(i));
  }
  if (rows.empty()) throw Error("encoder layer: all positions are padding");
  // Excluding padded rows from the keys is the same as masking their scores
  // to -inf; padded outputs are passed through unchanged.
  Eigen::MatrixXd x(static_cast<Eigen::Index>(rows.size()), hidden.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) x.row(static_cast<Eigen::Index>(r)) = hidden.row(rows[r]);
  Eigen::MatrixXd y = layer_core(params, layer, x, dropout_rng, trace);
  Eigen::MatrixXd out = hidden;
  for (std::size_t r = 0; r < rows.size(); ++r) out.row(rows[r]) = y.row(static_cast<Eigen::Index>(r));
  return out;
}

Eigen::VectorXd sequence_pool(const Eigen::MatrixXd& hidden, std::span<const std::uint8_t> valid) {
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(hidden.cols());
  int n = 0;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (!valid[i]) continue;
    sum += hidden.row(static_cast<Eigen::Index>(i)).transpose();
    ++n;
  }
  if (n == 0) throw Error("sequence_pool: no valid tokens");
  return sum / n;
}

Eigen::VectorXd classify(const ModelParams& params, const Eigen::VectorXd& pooled) {
  if (!pooled.allFinite()) throw Error("classify: non-finite pooled vector");
  return nn::softmax(logits_core(params, pooled, nullptr, nullptr));
}

ForwardResult forward(const ModelParams& params, std::span<const TokenSequence> batch,
                      bool train_mode, Rng* dropout_rng) {
  if (train_mode && !dropout_rng && params.config().dropout > 0.0) {
    throw Error("forward: train mode requires a dropout rng");
  }
  ForwardResult result;
  result.probabilities.resize(static_cast<Eigen::Index>(batch.size()), kNumClasses);
  result.trace.params = &params;
  result.trace.params_version = params.version();
  result.trace.train_mode = train_mode;
  result.trace.sequences.resize(batch.size());
  Rng* rng = train_mode ? dropout_rng : nullptr;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    result.probabilities.row(static_cast<Eigen::Index>(i)) =
        forward_sequence(params, batch[i], rng, &result.trace.sequences[i]).transpose();
  }
  return result;
}

Eigen::MatrixXd predict(const ModelParams& params, std::span<const TokenSequence> batch) {
  Eigen::MatrixXd probs(static_cast<Eigen::Index>(batch.size()), kNumClasses);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    probs.row(static_cast<Eigen::Index>(i)) =
        forward_sequence(params, batch[i], nullptr, nullptr).transpose();
  }
  return probs;
}

// ---------------------------------------------------------------------------
// Backward.

namespace {

Eigen::MatrixXd layer_backward(const ModelParams& params, int layer, const LayerTrace& tr,
                               const Eigen::MatrixXd& d_out, Eigen::VectorXd& grad) {
  const ModelConfig& cfg = params.config();
  const LayerBlocks& B = params.layout().layers[static_cast<std::size_t>(layer)];
  const int dh = cfg.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  auto g_ln2_gain = vector_view(grad, B.ln2_gain);
  auto g_ln2_bias = vector_view(grad, B.ln2_bias);
  Eigen::MatrixXd d_r2 =
      nn::layer_norm_backward(d_out, tr.ln2, params.vec(B.ln2_gain), g_ln2_gain, g_ln2_bias);

  Eigen::MatrixXd d_ff_out = tr.ff_mask.size() ? Eigen::MatrixXd(d_r2.cwiseProduct(tr.ff_mask)) : d_r2;
  block_view(grad, B.ff2_w) += d_ff_out.transpose() * tr.ff_act;
  vector_view(grad, B.ff2_b) += d_ff_out.colwise().sum().transpose();
  Eigen::MatrixXd d_ff_act = d_ff_out * params.view(B.ff2_w);
  Eigen::MatrixXd d_ff_pre =
      (tr.ff_pre.array() > 0.0).select(d_ff_act, Eigen::MatrixXd::Zero(d_ff_act.rows(), d_ff_act.cols()));
  block_view(grad, B.ff1_w) += d_ff_pre.transpose() * tr.y1;
  vector_view(grad, B.ff1_b) += d_ff_pre.colwise().sum().transpose();
  Eigen::MatrixXd d_y1 = d_r2 + d_ff_pre * params.view(B.ff1_w);

  auto g_ln1_gain = vector_view(grad, B.ln1_gain);
  auto g_ln1_bias = vector_view(grad, B.ln1_bias);
  Eigen::MatrixXd d_r1 =
      nn::layer_norm_backward(d_y1, tr.ln1, params.vec(B.ln1_gain), g_ln1_gain, g_ln1_bias);

  Eigen::MatrixXd d_z = tr.attn_mask.size() ? Eigen::MatrixXd(d_r1.cwiseProduct(tr.attn_mask)) : d_r1;
  block_view(grad, B.wo) += d_z.transpose() * tr.heads;
  vector_view(grad, B.bo) += d_z.colwise().sum().transpose();
  Eigen::MatrixXd d_heads = d_z * params.view(B.wo);

  const Eigen::Index n = tr.input.rows();
  Eigen::MatrixXd d_q(n, cfg.hidden), d_k(n, cfg.hidden), d_v(n, cfg.hidden);
  for (int h = 0; h < cfg.heads; ++h) {
    const Eigen::MatrixXd& attn = tr.attention[static_cast<std::size_t>(h)];
    const auto dh_out = d_heads.middleCols(h * dh, dh);
    const auto qh = tr.q.middleCols(h * dh, dh);
    const auto kh = tr.k.middleCols(h * dh, dh);
    const auto vh = tr.v.middleCols(h * dh, dh);
    Eigen::MatrixXd d_attn = dh_out * vh.transpose();
    d_v.middleCols(h * dh, dh) = attn.transpose() * dh_out;
    Eigen::MatrixXd d_scores = nn::softmax_rows_backward(attn, d_attn) * scale;
    d_q.middleCols(h * dh, dh) = d_scores * kh;
    d_k.middleCols(h * dh, dh) = d_scores.transpose() * qh;
  }
  block_view(grad, B.wq) += d_q.transpose() * tr.input;
  vector_view(grad, B.bq) += d_q.colwise().sum().transpose();
  block_view(grad, B.wk) += d_k.transpose() * tr.input;
  vector_view(grad, B.bk) += d_k.colwise().sum().transpose();
  block_view(grad, B.wv) += d_v.transpose() * tr.input;
  vector_view(grad, B.bv) += d_v.colwise().sum().transpose();

  Eigen::MatrixXd d_x = d_r1;
  d_x += d_q * params.view(B.wq);
  d_x += d_k * params.view(B.wk);
  d_x += d_v * params.view(B.wv);
  return d_x;
}

}  // namespace

Eigen::VectorXd backward(const ForwardTrace& trace, const Eigen::MatrixXd& d_probs) {
  if (!trace.params) throw Error("backward: empty trace");
  const ModelParams& params = *trace.params;
  if (params.version() != trace.params_version) {
    throw Error("backward: parameters changed since the forward pass");
  }
  if (d_probs.rows() != static_cast<Eigen::Index>(trace.sequences.size()) ||
      d_probs.cols() != kNumClasses) {
    throw Error("backward: upstream gradient shape mismatch");
  }
  const ModelConfig& cfg = params.config();
  const ParamLayout& L = params.layout();
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(L.total);

  for (std::size_t i = 0; i < trace.sequences.size(); ++i) {
    const SequenceTrace& st = trace.sequences[i];
    const Eigen::VectorXd d_logits =
        nn::softmax_backward(st.probs, d_probs.row(static_cast<Eigen::Index>(i)).transpose());
    Eigen::VectorXd d_pooled;
    if (cfg.classifier_hidden > 0) {
      block_view(grad, L.c2_w) += d_logits * st.cls_act.transpose();
      vector_view(grad, L.c2_b) += d_logits;
      Eigen::VectorXd d_act = params.view(L.c2_w).transpose() * d_logits;
      if (st.cls_mask.size()) d_act = d_act.cwiseProduct(st.cls_mask);
      const Eigen::VectorXd d_pre =
          (st.cls_pre.array() > 0.0).select(d_act, Eigen::VectorXd::Zero(d_act.size()));
      block_view(grad, L.c1_w) += d_pre * st.pooled.transpose();
      vector_view(grad, L.c1_b) += d_pre;
      d_pooled = params.view(L.c1_w).transpose() * d_pre;
    } else {
      block_view(grad, L.c2_w) += d_logits * st.pooled.transpose();
      vector_view(grad, L.c2_b) += d_logits;
      d_pooled = params.view(L.c2_w).transpose() * d_logits;
    }

    const Eigen::Index n = st.tokens.rows();
    Eigen::MatrixXd d_x = (d_pooled / static_cast<double>(n)).transpose().replicate(n, 1);
    for (int l = cfg.layers - 1; l >= 0; --l) {
      d_x = layer_backward(params, l, st.layers[static_cast<std::size_t>(l)], d_x, grad);
    }

    block_view(grad, L.in_w) += d_x.transpose() * st.tokens;
    vector_view(grad, L.in_b) += d_x.colwise().sum().transpose();
    auto g_pos = block_view(grad, L.position);
    for (Eigen::Index r = 0; r < n; ++r) g_pos.row(st.positions[static_cast<std::size_t>(r)]) += d_x.row(r);
    vector_view(grad, L.age_slope) += d_x.transpose() * st.ages;
    vector_view(grad, L.age_bias) += d_x.colwise().sum().transpose();
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Checkpoints.

void save_checkpoint(const std::string& prefix, const ModelParams& params,
                     const nlohmann::json& metadata) {
  static_assert(std::endian::native == std::endian::little,
                "checkpoint format assumes a little-endian host");
  nlohmann::json blocks = nlohmann::json::array();
  for (const Block& b : params.layout().blocks) {
    blocks.push_back({{"name", b.name}, {"offset", b.offset}, {"rows", b.rows}, {"cols", b.cols}});
  }
  const nlohmann::json manifest = {{"format", "progcast-checkpoint-v1"},
                                   {"config", params.config().to_json()},
                                   {"dtype", "float64-le"},
                                   {"order", "column-major per block"},
                                   {"total", params.layout().total},
                                   {"blocks", blocks},
                                   {"metadata", metadata}};
  {
    std::ofstream bin(prefix + ".bin", std::ios::binary);
    if (!bin) throw Error("cannot write " + prefix + ".bin");
    bin.write(reinterpret_cast<const char*>(params.values().data()),
              static_cast<std::streamsize>(sizeof(double) * params.values().size()));
    if (!bin) throw Error("failed writing " + prefix + ".bin");
  }
  std::ofstream js(prefix + ".json");
  if (!js) throw Error("cannot write " + prefix + ".json");
  js << manifest.dump(2) << '\n';
}

ModelParams load_checkpoint(const std::string& prefix, nlohmann::json* metadata) {
  std::ifstream js(prefix + ".json");
  if (!js) throw Error("cannot read " + prefix + ".json");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint " + prefix + ": " + e.what());
  }
  ModelParams params(ModelConfig::from_json(manifest.at("config")));
  const auto& blocks = manifest.at("blocks");
  const ParamLayout& L = params.layout();
  if (blocks.size() != L.blocks.size() || manifest.at("total").get<Eigen::Index>() != L.total) {
    throw Error("checkpoint " + prefix + ": block table does not match config");
  }
  for (std::size_t i = 0; i < L.blocks.size(); ++i) {
    const Block& b = L.blocks[i];
    const auto& jb = blocks[i];
    if (jb.at("name").get<std::string>() != b.name || jb.at("offset").get<Eigen::Index>() != b.offset ||
        jb.at("rows").get<Eigen::Index>() != b.rows || jb.at("cols").get<Eigen::Index>() != b.cols) {
      throw Error("checkpoint " + prefix + ": block '" + b.name + "' does not match config");
    }
  }
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!bin) throw Error("cannot read " + prefix + ".bin");
  Eigen::VectorXd& values = params.mutable_values();
  bin.read(reinterpret_cast<char*>(values.data()),
           static_cast<std::streamsize>(sizeof(double) * values.size()));
  if (bin.gcount() != static_cast<std::streamsize>(sizeof(double) * values.size())) {
    throw Error("checkpoint " + prefix + ": truncated parameter file");
  }
  if (metadata) *metadata = manifest.value("metadata", nlohmann::json::object());
  return params;
}

}  // namespace progcast
