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

// Dense building blocks shared by the forward and backward passes. Rows are
// tokens, columns are features.

#ifndef PROGCAST_NN_OPS_HPP_
#define PROGCAST_NN_OPS_HPP_

#include <Eigen/Dense>
#include <type_traits>

namespace progcast::nn {

inline constexpr double kLayerNormEps = 1e-5;

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

// Numerically stable softmax of a vector.
template <typename Derived>
Vec<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& z) {
  using Scalar = typename Derived::Scalar;
  const Scalar m = z.maxCoeff();
  Vec<Scalar> e = (z.array() - m).exp().matrix();
  return e / e.sum();
}

// Row-wise softmax.
template <typename Derived>
Mat<typename Derived::Scalar> softmax_rows(const Eigen::MatrixBase<Derived>& s) {
  using Scalar = typename Derived::Scalar;
  Mat<Scalar> out(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const Scalar m = s.row(r).maxCoeff();
    out.row(r) = (s.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

// Vector-Jacobian product of softmax: given y = softmax(z) and dL/dy,
// returns dL/dz = y * (dy - <dy, y>).
template <typename DerivedY, typename DerivedG>
Vec<typename DerivedY::Scalar> softmax_backward(const Eigen::MatrixBase<DerivedY>& y,
                                                const Eigen::MatrixBase<DerivedG>& dy) {
  return (y.array() * (dy.array() - dy.dot(y))).matrix();
}

template <typename DerivedA, typename DerivedG>
Mat<typename DerivedA::Scalar> softmax_rows_backward(const Eigen::MatrixBase<DerivedA>& y,
                                                     const Eigen::MatrixBase<DerivedG>& dy) {
  using Scalar = typename DerivedA::Scalar;
  Mat<Scalar> out(y.rows(), y.cols());
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const Scalar inner = dy.row(r).dot(y.row(r));
    out.row(r) = (y.row(r).array() * (dy.row(r).array() - inner)).matrix();
  }
  return out;
}

template <typename Derived>
Mat<typename Derived::Scalar> relu(const Eigen::MatrixBase<Derived>& x) {
  return x.cwiseMax(typename Derived::Scalar(0));
}

// Affine map applied to every row: x * W^T + 1 * b^T with W stored (out x in).
template <typename DX, typename DW, typename DB>
Mat<typename DX::Scalar> linear_rows(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DW>& w,
                                     const Eigen::MatrixBase<DB>& b) {
  Mat<typename DX::Scalar> y = x * w.transpose();
  y.rowwise() += b.transpose();
  return y;
}

template <typename Scalar>
struct LayerNormCache {
  Mat<Scalar> xhat;  // normalized input
  Vec<Scalar> rstd;  // 1 / sqrt(var + eps) per row
};

// Per-row layer normalization with gain g and bias b.
template <typename DX, typename DG, typename DB>
Mat<typename DX::Scalar> layer_norm(const Eigen::MatrixBase<DX>& x, const Eigen::MatrixBase<DG>& g,
                                    const Eigen::MatrixBase<DB>& b,
                                    LayerNormCache<typename DX::Scalar>* cache) {
  using Scalar = typename DX::Scalar;
  const auto n = x.rows();
  const auto d = x.cols();
  Mat<Scalar> xhat(n, d);
  Vec<Scalar> rstd(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const Scalar mean = x.row(r).mean();
    const auto centered = (x.row(r).array() - mean).matrix();
    const Scalar var = centered.squaredNorm() / static_cast<Scalar>(d);
    rstd[r] = Scalar(1) / std::sqrt(var + Scalar(kLayerNormEps));
    xhat.row(r) = centered * rstd[r];
  }
  Mat<Scalar> y = (xhat.array().rowwise() * g.transpose().array()).matrix();
  y.rowwise() += b.transpose();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

// Returns dL/dx and accumulates dL/dg, dL/db.
template <typename DY, typename DG, typename Scalar>
Mat<Scalar> layer_norm_backward(const Eigen::MatrixBase<DY>& dy, const LayerNormCache<Scalar>& cache,
                                const Eigen::MatrixBase<DG>& g,
                                Eigen::Ref<Vec<std::type_identity_t<Scalar>>> dg,
                                Eigen::Ref<Vec<std::type_identity_t<Scalar>>> db) {
  const auto n = dy.rows();
  const auto d = static_cast<Scalar>(dy.cols());
  dg += (dy.array() * cache.xhat.array()).colwise().sum().transpose().matrix();
  db += dy.colwise().sum().transpose();
  Mat<Scalar> dxhat = (dy.array().rowwise() * g.transpose().array()).matrix();
  Mat<Scalar> dx(n, dy.cols());
  for (Eigen::Index r = 0; r < n; ++r) {
    const Scalar mean_dxhat = dxhat.row(r).sum() / d;
    const Scalar mean_dxhat_xhat = dxhat.row(r).dot(cache.xhat.row(r)) / d;
    dx.row(r) = cache.rstd[r] * (dxhat.row(r).array() - mean_dxhat -
                                 cache.xhat.row(r).array() * mean_dxhat_xhat)
                                    .matrix();
  }
  return dx;
}

}  // namespace progcast::nn

#endif  // PROGCAST_NN_OPS_HPP_
