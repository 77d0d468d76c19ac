// SPDX-License-Identifier: Apache-2.0

// Forward kernels over rank-2 tensors. The autodiff tape in graph.hpp reuses
// these for its forward pass, so every op has exactly one forward definition.

#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "dualpipe/core/tensor.hpp"

namespace dualpipe::ops {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
CMapMat<T> view(const Tensor<T>& t) {
  return CMapMat<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
template <typename T>
MapMat<T> view(Tensor<T>& t) {
  return MapMat<T>(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

/// a[n x k] * b[k x m]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.rows())
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::matrix(a.rows(), b.cols());
  if (a.cols() > 0) view(out).noalias() = view(a) * view(b);
  return out;
}

/// a[n x k] * b[m x k]^T, i.e. rows of `a` through a weight stored out x in.
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.cols() != b.cols())
    throw DimensionError("matmul_nt: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
  Tensor<T> out = Tensor<T>::matrix(a.rows(), b.rows());
  if (a.cols() > 0) view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

/// a[k x n]^T * b[k x m]
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rows() != b.rows())
    throw DimensionError("matmul_tn: " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::matrix(a.cols(), b.cols());
  if (a.rows() > 0) view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  Tensor<T> out = Tensor<T>::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
  return out;
}

/// x[n x d] + bias[1 x d] broadcast over rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols())
    throw DimensionError("add_row: bias " + shape_str(bias.shape()) + " for " + shape_str(x.shape()));
  Tensor<T> out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) += bias[j];
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}
template <typename T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}
template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F f) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

/// Row-wise softmax with the row maximum subtracted first.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row_span(i);
    auto o = out.row_span(i);
    const T mx = *std::max_element(in.begin(), in.end());
    T sum = 0;
    for (std::size_t j = 0; j < in.size(); ++j) sum += (o[j] = std::exp(in[j] - mx));
    for (auto& v : o) v /= sum;
  }
  return out;
}

template <typename T>
Tensor<T> log_softmax_rows(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row_span(i);
    auto o = out.row_span(i);
    const T mx = *std::max_element(in.begin(), in.end());
    T sum = 0;
    for (T v : in) sum += std::exp(v - mx);
    const T lse = mx + std::log(sum);
    for (std::size_t j = 0; j < in.size(); ++j) o[j] = in[j] - lse;
  }
  return out;
}

/// Per-row normalization with population variance, then gamma/beta affine.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.cols();
  if (d == 0) throw DimensionError("layer_norm: zero-width input");
  if (gamma.size() != d || beta.size() != d) throw DimensionError("layer_norm: gamma/beta width mismatch");
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto in = x.row_span(i);
    T mean = 0;
    for (T v : in) mean += v;
    mean /= T(d);
    T var = 0;
    for (T v : in) var += (v - mean) * (v - mean);
    var /= T(d);
    const T inv = T(1) / std::sqrt(var + eps);
    auto o = out.row_span(i);
    for (std::size_t j = 0; j < d; ++j) o[j] = (in[j] - mean) * inv * gamma[j] + beta[j];
  }
  return out;
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> ids) {
  Tensor<T> out = Tensor<T>::matrix(ids.size(), table.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= table.rows())
      throw DimensionError("embedding: id " + std::to_string(ids[i]) + " out of range " +
                           std::to_string(table.rows()));
    std::copy_n(table.row_span(ids[i]).data(), table.cols(), out.row_span(i).data());
  }
  return out;
}

/// Mean negative log-likelihood over rows whose target != ignore_index.
/// Returns 0 when every row is ignored.
template <typename T>
T cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets, std::int32_t ignore_index = -1) {
  if (targets.size() != logits.rows()) throw DimensionError("cross_entropy: target count != rows");
  const Tensor<T> lp = log_softmax_rows(logits);
  T sum = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == ignore_index) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= logits.cols())
      throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
    sum -= lp.at(i, targets[i]);
    ++count;
  }
  return count ? sum / T(count) : T(0);
}

}  // namespace dualpipe::ops
