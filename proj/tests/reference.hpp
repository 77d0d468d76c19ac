// SPDX-License-Identifier: Apache-2.0

// Plain-loop double-precision reference implementations used as test oracles.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dualpipe/core/tensor.hpp"
#include "dualpipe/model/config.hpp"

namespace ref {

using Mat = std::vector<std::vector<double>>;

template <typename T>
Mat from(const dualpipe::Tensor<T>& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = static_cast<double>(t.at(i, j));
  return m;
}

inline Mat zeros(std::size_t r, std::size_t c) { return Mat(r, std::vector<double>(c, 0.0)); }

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat out = zeros(a.size(), b.empty() ? 0 : b[0].size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t k = 0; k < b.size(); ++k)
      for (std::size_t j = 0; j < b[0].size(); ++j) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline Mat transpose(const Mat& a) {
  Mat out = zeros(a.empty() ? 0 : a[0].size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) out[j][i] = a[i][j];
  return out;
}

inline Mat add(Mat a, const Mat& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
  return a;
}

inline Mat scale(Mat a, double s) {
  for (auto& r : a)
    for (auto& v : r) v *= s;
  return a;
}

/// x W^T + b, with an empty `b` meaning no bias.
inline Mat linear(const Mat& x, const Mat& W, const Mat& b) {
  Mat y = matmul(x, transpose(W));
  if (!b.empty())
    for (auto& r : y)
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[0][j];
  return y;
}

inline Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, double eps = 1e-5) {
  Mat y = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double mean = 0, var = 0;
    for (double v : x[i]) mean += v;
    mean /= static_cast<double>(x[i].size());
    for (double v : x[i]) var += (v - mean) * (v - mean);
    var /= static_cast<double>(x[i].size());
    for (std::size_t j = 0; j < x[i].size(); ++j) y[i][j] = (x[i][j] - mean) / std::sqrt(var + eps) * g[0][j] + b[0][j];
  }
  return y;
}

inline std::vector<double> softmax(const std::vector<double>& s) {
  double mx = s[0];
  for (double v : s) mx = std::max(mx, v);
  std::vector<double> p(s.size());
  double z = 0;
  for (std::size_t i = 0; i < s.size(); ++i) z += p[i] = std::exp(s[i] - mx);
  for (auto& v : p) v /= z;
  return p;
}

inline Mat mha(const Mat& q, const Mat& k, const Mat& v, std::size_t heads, bool causal) {
  const std::size_t n = q.size(), m = k.size(), d = q[0].size(), dh = d / heads;
  Mat out = zeros(n, d);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t limit = causal ? m - n + i + 1 : m;
      std::vector<double> s(limit);
      for (std::size_t j = 0; j < limit; ++j) {
        for (std::size_t c = 0; c < dh; ++c) s[j] += q[i][h * dh + c] * k[j][h * dh + c];
        s[j] /= std::sqrt(static_cast<double>(dh));
      }
      const auto p = softmax(s);
      for (std::size_t j = 0; j < limit; ++j)
        for (std::size_t c = 0; c < dh; ++c) out[i][h * dh + c] += p[j] * v[j][h * dh + c];
    }
  return out;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

inline Mat map(Mat a, double (*f)(double)) {
  for (auto& r : a)
    for (auto& v : r) v = f(v);
  return a;
}

inline Mat sinusoid_table(std::size_t len, std::size_t d) {
  Mat t = zeros(len, d);
  const std::size_t half = d / 2;
  for (std::size_t p = 0; p < len; ++p)
    for (std::size_t i = 0; i < half; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half - 1));
      t[p][i] = std::sin(static_cast<double>(p) * rate);
      t[p][half + i] = std::cos(static_cast<double>(p) * rate);
    }
  return t;
}

/// Looks up a named weight; an unknown name yields an empty matrix.
using Weights = std::function<Mat(const std::string&)>;

/// Pre-norm encoder up to (not including) the final layer norm.
inline Mat encoder_stack(const Weights& w, const dualpipe::ModelConfig& cfg, const Mat& feats) {
  Mat x = add(linear(feats, w("enc.in.w"), w("enc.in.b")), sinusoid_table(feats.size(), cfg.d_model));
  for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    auto proj = [&](const Mat& in, const std::string& name) { return linear(in, w(p + name + ".w"), w(p + name + ".b")); };
    const Mat h = layer_norm(x, w(p + "ln1.g"), w(p + "ln1.b"));
    const Mat a = mha(proj(h, "attn.q"), proj(h, "attn.k"), proj(h, "attn.v"), cfg.n_heads, false);
    x = add(x, proj(a, "attn.o"));
    const Mat h2 = layer_norm(x, w(p + "ln2.g"), w(p + "ln2.b"));
    x = add(x, proj(map(proj(h2, "ff.w1"), gelu), "ff.w2"));
  }
  return x;
}

inline double max_rel_diff(const Mat& a, const Mat& b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j)
      worst = std::max(worst, std::abs(a[i][j] - b[i][j]) / std::max(1.0, std::abs(b[i][j])));
  return worst;
}

}  // namespace ref
