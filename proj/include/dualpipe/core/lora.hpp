// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>

#include "dualpipe/core/ops.hpp"
#include "dualpipe/core/rng.hpp"
#include "dualpipe/core/tensor.hpp"

namespace dualpipe {

/// Trainable low-rank pair attached beside one frozen weight W (d_out x d_in).
/// The adapted product is W x + (alpha / rank) * B (A x).
template <typename T>
struct LoraAdapter {
  Tensor<T> A;  // rank x d_in
  Tensor<T> B;  // d_out x rank
  std::size_t rank = 0;
  T alpha = T(1);

  T scale() const { return rank == 0 ? T(0) : alpha / static_cast<T>(rank); }
  std::size_t d_in() const { return A.cols(); }
  std::size_t d_out() const { return B.rows(); }

  /// A ~ N(0, 1/d_in), B = 0, so a fresh adapter contributes nothing.
  static LoraAdapter init(std::size_t d_in, std::size_t d_out, std::size_t rank, T alpha, Rng& rng) {
    if (alpha <= T(0)) throw ConfigError("LoRA alpha must be positive");
    LoraAdapter a;
    a.rank = rank;
    a.alpha = alpha;
    a.A = Tensor<T>::matrix(rank, d_in);
    a.B = Tensor<T>::matrix(d_out, rank);
    const double sd = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (auto& v : a.A.vec()) v = static_cast<T>(rng.normal(0.0, sd));
    return a;
  }

  void validate_for(const Tensor<T>& W) const {
    if (A.rows() != rank || B.cols() != rank)
      throw DimensionError("LoRA factor shapes do not agree with rank " + std::to_string(rank));
    if (rank > 0 && (A.cols() != W.cols() || B.rows() != W.rows()))
      throw DimensionError("LoRA factors " + shape_str(A.shape()) + "/" + shape_str(B.shape()) +
                           " do not fit weight " + shape_str(W.shape()));
  }
};

/// Unmerged adapted projection of the rows of x (n x d_in) -> n x d_out.
/// With rank 0 this is exactly the plain product x W^T.
template <typename T>
Tensor<T> lora_linear(const Tensor<T>& W, const LoraAdapter<T>& adapter, const Tensor<T>& x) {
  adapter.validate_for(W);
  Tensor<T> h = ops::matmul_nt(x, W);
  if (adapter.rank == 0) return h;
  const Tensor<T> low = ops::matmul_nt(ops::matmul_nt(x, adapter.A), adapter.B);
  const T s = adapter.scale();
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += s * low[i];
  return h;
}

}  // namespace dualpipe
