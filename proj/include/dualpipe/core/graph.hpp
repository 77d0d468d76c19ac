// SPDX-License-Identifier: Apache-2.0

// Reverse-mode tape over the handful of layers the models in this library
// need. Every op computes its value eagerly; when any input requires a
// gradient the op also records an analytic backward closure. Nodes that do
// not depend on a trainable leaf never get a gradient, so frozen weights are
// never differentiated.

#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <unordered_map>
#include <vector>

#include "dualpipe/core/ops.hpp"
#include "dualpipe/core/parameter.hpp"
#include "dualpipe/core/rng.hpp"

namespace dualpipe {

struct Var {
  std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
  bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

template <typename T>
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  // ---- leaves ---------------------------------------------------------------

  Var constant(Tensor<T> value) { return push(std::move(value), false, {}); }

  /// Constant leaf that aliases `value`; the tensor must outlive the graph.
  Var ref(const Tensor<T>& value) {
    Var v = push(Tensor<T>{}, false, {});
    nodes_[v.id].external = &value;
    return v;
  }

  Var input(Tensor<T> value, bool requires_grad) {
    return push(std::move(value), requires_grad && grad_enabled_, {});
  }

  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(const Parameter<T>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return it->second;
    Var v = push(Tensor<T>{}, p.trainable && grad_enabled_, {});
    nodes_[v.id].external = &p.value;
    param_nodes_.emplace(&p, v);
    return v;
  }

  const Tensor<T>& value(Var v) const {
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }
  const Tensor<T>& grad(Var v) const { return nodes_.at(v.id).grad; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Adds the gradient of every trainable parameter leaf into `buf`.
  void collect_param_grads(GradBuffer<T>& buf) const {
    for (const auto& [p, v] : param_nodes_) {
      const Node& n = nodes_[v.id];
      if (n.requires_grad && !n.grad.empty()) buf.accumulate(p->index, n.grad);
    }
  }

  // ---- ops --------------------------------------------------------------------

  /// x[n x in] W[out x in]^T (+ b[1 x out])
  Var linear(Var x, Var W, Var b = {}) {
    Tensor<T> y = ops::matmul_nt(value(x), value(W));
    if (b.valid()) y = ops::add_row(y, value(b));
    return push_op(std::move(y), {x, W, b}, [x, W, b](Graph& g, const Tensor<T>& dy) {
      g.acc_nn(x, dy, g.value(W));
      g.acc_tn(W, dy, g.value(x));
      if (b.valid() && g.requires_grad(b)) g.acc(b, colsum(dy));
    });
  }

  /// Adapted projection x W^T + b + scale * (x A^T) B^T, evaluated unmerged.
  Var lora_linear(Var x, Var W, Var b, Var A, Var B, T scale) {
    Var base = linear(x, W, b);
    if (value(A).rows() == 0) return base;
    return add(base, this->scale(linear(linear(x, A), B), scale));
  }

  Var matmul(Var a, Var b) {
    return push_op(ops::matmul(value(a), value(b)), {a, b}, [a, b](Graph& g, const Tensor<T>& dy) {
      if (g.requires_grad(a)) g.acc(a, ops::matmul_nt(dy, g.value(b)));
      g.acc_tn(b, g.value(a), dy);
    });
  }

  Var add(Var a, Var b) {
    return push_op(ops::add(value(a), value(b)), {a, b}, [a, b](Graph& g, const Tensor<T>& dy) {
      g.acc(a, dy);
      g.acc(b, dy);
    });
  }

  /// x[n x d] + r[1 x d] broadcast over rows.
  Var add_row(Var x, Var r) {
    return push_op(ops::add_row(value(x), value(r)), {x, r}, [x, r](Graph& g, const Tensor<T>& dy) {
      g.acc(x, dy);
      if (g.requires_grad(r)) g.acc(r, colsum(dy));
    });
  }

  Var mul(Var a, Var b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    require_same_shape(va, vb, "mul");
    Tensor<T> y = va;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= vb[i];
    return push_op(std::move(y), {a, b}, [a, b](Graph& g, const Tensor<T>& dy) {
      if (g.requires_grad(a)) g.acc(a, hadamard(dy, g.value(b)));
      if (g.requires_grad(b)) g.acc(b, hadamard(dy, g.value(a)));
    });
  }

  Var scale(Var a, T s) {
    Tensor<T> y = value(a);
    for (auto& v : y.vec()) v *= s;
    return push_op(std::move(y), {a}, [a, s](Graph& g, const Tensor<T>& dy) {
      Tensor<T> d = dy;
      for (auto& v : d.vec()) v *= s;
      g.acc(a, d);
    });
  }

  Var gelu(Var x) {
    return push_op(ops::map(value(x), [](T v) { return ops::gelu(v); }), {x}, [x](Graph& g, const Tensor<T>& dy) {
      const Tensor<T>& vx = g.value(x);
      Tensor<T> d = dy;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= ops::gelu_grad(vx[i]);
      g.acc(x, d);
    });
  }

  Var sigmoid(Var x) {
    Var y = push_op(ops::map(value(x), [](T v) { return ops::sigmoid(v); }), {x}, {});
    set_backward(y, [x, y](Graph& g, const Tensor<T>& dy) {
      const Tensor<T>& s = g.value(y);
      Tensor<T> d = dy;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= s[i] * (T(1) - s[i]);
      g.acc(x, d);
    });
    return y;
  }

  Var tanh(Var x) {
    Var y = push_op(ops::map(value(x), [](T v) { return std::tanh(v); }), {x}, {});
    set_backward(y, [x, y](Graph& g, const Tensor<T>& dy) {
      const Tensor<T>& t = g.value(y);
      Tensor<T> d = dy;
      for (std::size_t i = 0; i < d.size(); ++i) d[i] *= T(1) - t[i] * t[i];
      g.acc(x, d);
    });
    return y;
  }

  Var layer_norm(Var x, Var gamma, Var beta, T eps = T(1e-5)) {
    const Tensor<T>& vx = value(x);
    Var y = push_op(ops::layer_norm(vx, value(gamma), value(beta), eps), {x, gamma, beta}, {});
    set_backward(y, [x, gamma, beta, eps](Graph& g, const Tensor<T>& dy) {
      const Tensor<T>& in = g.value(x);
      const Tensor<T>& gm = g.value(gamma);
      const std::size_t n = in.rows(), d = in.cols();
      Tensor<T> dx(in.shape()), dg(gm.shape()), db(gm.shape());
      std::vector<T> xhat(d), dxhat(d);
      for (std::size_t i = 0; i < n; ++i) {
        auto r = in.row_span(i);
        T mean = 0;
        for (T v : r) mean += v;
        mean /= T(d);
        T var = 0;
        for (T v : r) var += (v - mean) * (v - mean);
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        T sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (std::size_t j = 0; j < d; ++j) {
          xhat[j] = (r[j] - mean) * inv;
          const T gy = dy.at(i, j);
          dg[j] += gy * xhat[j];
          db[j] += gy;
          dxhat[j] = gy * gm[j];
          sum_dxhat += dxhat[j];
          sum_dxhat_xhat += dxhat[j] * xhat[j];
        }
        for (std::size_t j = 0; j < d; ++j)
          dx.at(i, j) = inv * (dxhat[j] - (sum_dxhat + xhat[j] * sum_dxhat_xhat) / T(d));
      }
      g.acc(x, dx);
      g.acc(gamma, dg);
      g.acc(beta, db);
    });
    return y;
  }

  Var softmax_rows(Var x) {
    Var y = push_op(ops::softmax_rows(value(x)), {x}, {});
    set_backward(y, [x, y](Graph& g, const Tensor<T>& dy) {
      const Tensor<T>& p = g.value(y);
      Tensor<T> dx(p.shape());
      for (std::size_t i = 0; i < p.rows(); ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < p.cols(); ++j) dot += dy.at(i, j) * p.at(i, j);
        for (std::size_t j = 0; j < p.cols(); ++j) dx.at(i, j) = p.at(i, j) * (dy.at(i, j) - dot);
      }
      g.acc(x, dx);
    });
    return y;
  }

  Var transpose(Var x) {
    return push_op(ops::transpose(value(x)), {x},
                   [x](Graph& g, const Tensor<T>& dy) { g.acc(x, ops::transpose(dy)); });
  }

  Var concat_cols(Var a, Var b) {
    const Tensor<T>& va = value(a);
    const Tensor<T>& vb = value(b);
    if (va.rows() != vb.rows()) throw DimensionError("concat_cols: row mismatch");
    const std::size_t ca = va.cols(), cb = vb.cols();
    Tensor<T> y = Tensor<T>::matrix(va.rows(), ca + cb);
    for (std::size_t i = 0; i < va.rows(); ++i) {
      std::copy_n(va.row_span(i).data(), ca, y.row_span(i).data());
      std::copy_n(vb.row_span(i).data(), cb, y.row_span(i).data() + ca);
    }
    return push_op(std::move(y), {a, b}, [a, b, ca, cb](Graph& g, const Tensor<T>& dy) {
      if (g.requires_grad(a)) g.acc(a, slice(dy, 0, ca));
      if (g.requires_grad(b)) g.acc(b, slice(dy, ca, cb));
    });
  }

  Var slice_cols(Var x, std::size_t start, std::size_t len) {
    const Tensor<T>& vx = value(x);
    if (start + len > vx.cols()) throw DimensionError("slice_cols out of range");
    const std::size_t total = vx.cols();
    return push_op(slice(vx, start, len), {x}, [x, start, len, total](Graph& g, const Tensor<T>& dy) {
      Tensor<T> d = Tensor<T>::matrix(dy.rows(), total);
      for (std::size_t i = 0; i < dy.rows(); ++i) std::copy_n(dy.row_span(i).data(), len, d.row_span(i).data() + start);
      g.acc(x, d);
    });
  }

  /// Stacks equally wide nodes vertically.
  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: nothing to stack");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    std::vector<std::size_t> offsets;
    for (Var p : parts) {
      if (value(p).cols() != cols) throw DimensionError("concat_rows: width mismatch");
      offsets.push_back(rows);
      rows += value(p).rows();
    }
    Tensor<T> y = Tensor<T>::matrix(rows, cols);
    bool rg = false;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Tensor<T>& v = value(parts[k]);
      std::copy_n(v.data(), v.size(), y.data() + offsets[k] * cols);
      rg = rg || requires_grad(parts[k]);
    }
    Backward back;
    if (rg)
      back = [parts, offsets, cols](Graph& g, const Tensor<T>& dy) {
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (!g.requires_grad(parts[k])) continue;
          Tensor<T> d(g.value(parts[k]).shape());
          std::copy_n(dy.data() + offsets[k] * cols, d.size(), d.data());
          g.acc(parts[k], d);
        }
      };
    return push(std::move(y), rg, std::move(back));
  }

  /// Rows [start, start + len) of x.
  Var slice_rows(Var x, std::size_t start, std::size_t len) {
    const Tensor<T>& vx = value(x);
    if (start + len > vx.rows()) throw DimensionError("slice_rows out of range");
    const std::size_t cols = vx.cols(), total = vx.rows();
    Tensor<T> y = Tensor<T>::matrix(len, cols);
    std::copy_n(vx.data() + start * cols, len * cols, y.data());
    return push_op(std::move(y), {x}, [x, start, len, cols, total](Graph& g, const Tensor<T>& dy) {
      Tensor<T> d = Tensor<T>::matrix(total, cols);
      std::copy_n(dy.data(), len * cols, d.data() + start * cols);
      g.acc(x, d);
    });
  }

  Var embedding(Var table, std::span<const std::int32_t> ids) {
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    return push_op(ops::embedding(value(table), ids), {table}, [table, saved](Graph& g, const Tensor<T>& dy) {
      Tensor<T> d(g.value(table).shape());
      for (std::size_t i = 0; i < saved.size(); ++i) {
        auto src = dy.row_span(i);
        auto dst = d.row_span(static_cast<std::size_t>(saved[i]));
        for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
      }
      g.acc(table, d);
    });
  }

  /// Multi-head scaled dot-product attention. q: n x d, k/v: m x d. With
  /// `causal`, query row i (absolute position m - n + i) sees keys 0..m-n+i.
  Var attention(Var q, Var k, Var v, std::size_t n_heads, bool causal) {
    const Tensor<T>& Q = value(q);
    const Tensor<T>& K = value(k);
    const Tensor<T>& V = value(v);
    const std::size_t n = Q.rows(), m = K.rows(), d = Q.cols();
    if (K.cols() != d || V.cols() != d || V.rows() != m) throw DimensionError("attention: q/k/v shape mismatch");
    if (n_heads == 0 || d % n_heads != 0) throw DimensionError("attention: width not divisible by head count");
    if (m == 0) throw DimensionError("attention: empty key set");
    if (causal && n > m) throw DimensionError("attention: causal query longer than keys");
    const std::size_t dh = d / n_heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    const std::size_t offset = m - n;

    auto probs = std::make_shared<std::vector<ops::RowMat<T>>>(n_heads);
    Tensor<T> out = Tensor<T>::matrix(n, d);
    auto qm = ops::view(Q);
    auto km = ops::view(K);
    auto vm = ops::view(V);
    auto om = ops::view(out);
    for (std::size_t h = 0; h < n_heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      const auto w = static_cast<Eigen::Index>(dh);
      ops::RowMat<T> s = (qm.middleCols(c0, w) * km.middleCols(c0, w).transpose()) * inv_sqrt;
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t limit = causal ? offset + i + 1 : m;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < limit; ++j) mx = std::max(mx, s(i, j));
        T sum = 0;
        for (std::size_t j = 0; j < m; ++j) {
          const T e = j < limit ? std::exp(s(i, j) - mx) : T(0);
          s(i, j) = e;
          sum += e;
        }
        for (std::size_t j = 0; j < m; ++j) s(i, j) /= sum;
      }
      om.middleCols(c0, w).noalias() = s * vm.middleCols(c0, w);
      (*probs)[h] = std::move(s);
    }
    return push_op(std::move(out), {q, k, v}, [q, k, v, probs, n_heads, dh, inv_sqrt](Graph& g, const Tensor<T>& dy) {
      const Tensor<T>& Qv = g.value(q);
      const Tensor<T>& Kv = g.value(k);
      const Tensor<T>& Vv = g.value(v);
      Tensor<T> dq(Qv.shape()), dk(Kv.shape()), dv(Vv.shape());
      auto dym = ops::view(dy);
      auto qm2 = ops::view(Qv);
      auto km2 = ops::view(Kv);
      auto vm2 = ops::view(Vv);
      auto dqm = ops::view(dq);
      auto dkm = ops::view(dk);
      auto dvm = ops::view(dv);
      for (std::size_t h = 0; h < n_heads; ++h) {
        const auto c0 = static_cast<Eigen::Index>(h * dh);
        const auto w = static_cast<Eigen::Index>(dh);
        const ops::RowMat<T>& P = (*probs)[h];
        ops::RowMat<T> dP = dym.middleCols(c0, w) * vm2.middleCols(c0, w).transpose();
        dvm.middleCols(c0, w).noalias() = P.transpose() * dym.middleCols(c0, w);
        ops::RowMat<T> dS(P.rows(), P.cols());
        for (Eigen::Index i = 0; i < P.rows(); ++i) {
          T dot = 0;
          for (Eigen::Index j = 0; j < P.cols(); ++j) dot += dP(i, j) * P(i, j);
          for (Eigen::Index j = 0; j < P.cols(); ++j) dS(i, j) = P(i, j) * (dP(i, j) - dot) * inv_sqrt;
        }
        dqm.middleCols(c0, w).noalias() = dS * km2.middleCols(c0, w);
        dkm.middleCols(c0, w).noalias() = dS.transpose() * qm2.middleCols(c0, w);
      }
      if (g.requires_grad(q)) g.acc(q, dq);
      if (g.requires_grad(k)) g.acc(k, dk);
      if (g.requires_grad(v)) g.acc(v, dv);
    });
  }

  struct AdditiveAttention {
    Var context;  // 1 x d
    Var weights;  // 1 x m, no gradient
  };

  /// One head of additive attention: e = tanh(keys + q) v^T, a = softmax(e),
  /// context = a mem. keys: m x a, q: 1 x a, v: 1 x a, mem: m x d.
  AdditiveAttention additive_attention(Var keys, Var q, Var v, Var mem) {
    const Tensor<T>& K = value(keys);
    const Tensor<T>& Q = value(q);
    const Tensor<T>& Vs = value(v);
    const Tensor<T>& M = value(mem);
    const std::size_t m = K.rows(), a = K.cols();
    if (m == 0) throw DimensionError("additive_attention: empty memory");
    if (Q.rows() != 1 || Q.cols() != a || Vs.size() != a || M.rows() != m)
      throw DimensionError("additive_attention: shape mismatch");
    auto u = std::make_shared<Tensor<T>>(Tensor<T>::matrix(m, a));
    auto w = std::make_shared<Tensor<T>>(Tensor<T>::matrix(1, m));
    auto um = ops::view(*u);
    auto wm = ops::view(*w);
    um = (ops::view(K).rowwise() + ops::view(Q).row(0)).array().tanh();
    wm.noalias() = ops::view(Vs) * um.transpose();
    wm = (wm.array() - wm.maxCoeff()).exp();
    wm /= wm.sum();
    Tensor<T> ctx = ops::matmul(*w, M);
    Var out = push_op(std::move(ctx), {keys, q, v, mem}, [keys, q, v, mem, u, w](Graph& g, const Tensor<T>& dy) {
      const auto U = ops::view(*u);
      const auto W = ops::view(*w);
      // de = a * (da - <a, da>), da = dy mem^T
      ops::RowMat<T> de = ops::view(dy) * ops::view(g.value(mem)).transpose();
      de = (W.array() * (de.array() - (de.array() * W.array()).sum())).matrix();
      g.acc_tn(mem, *w, dy);
      if (g.requires_grad(v)) {
        Tensor<T> dv(g.value(v).shape());
        ops::view(dv).noalias() = de * U;
        g.acc(v, std::move(dv));
      }
      if (!g.requires_grad(q) && !g.requires_grad(keys)) return;
      Tensor<T> dz(u->shape());
      auto dzm = ops::view(dz);
      dzm.noalias() = de.transpose() * ops::view(g.value(v));
      dzm.array() *= T(1) - U.array().square();
      if (g.requires_grad(q)) {
        Tensor<T> dq = Tensor<T>::matrix(1, u->cols());
        ops::view(dq) = dzm.colwise().sum();
        g.acc(q, std::move(dq));
      }
      g.acc(keys, std::move(dz));
    });
    return {out, constant(*w)};
  }

  /// LSTM cell on pre-activation gates [i f g o] (1 x 4H) and cell c (1 x H);
  /// returns [h' c'] as one 1 x 2H node.
  Var lstm_cell(Var gates, Var c) {
    const Tensor<T>& G = value(gates);
    const Tensor<T>& C = value(c);
    const std::size_t H = C.size();
    if (G.size() != 4 * H) throw DimensionError("lstm_cell: gates must be 4x the cell width");
    auto act = std::make_shared<Tensor<T>>(Tensor<T>::matrix(1, 5 * H));  // i f g o tanh(c')
    Tensor<T> y = Tensor<T>::matrix(1, 2 * H);
    for (std::size_t k = 0; k < H; ++k) {
      const T i = ops::sigmoid(G[k]), f = ops::sigmoid(G[H + k]), u = std::tanh(G[2 * H + k]),
              o = ops::sigmoid(G[3 * H + k]);
      const T c2 = f * C[k] + i * u;
      const T th = std::tanh(c2);
      (*act)[k] = i;
      (*act)[H + k] = f;
      (*act)[2 * H + k] = u;
      (*act)[3 * H + k] = o;
      (*act)[4 * H + k] = th;
      y[k] = o * th;
      y[H + k] = c2;
    }
    return push_op(std::move(y), {gates, c}, [gates, c, act, H](Graph& g, const Tensor<T>& dy) {
      const Tensor<T>& Cv = g.value(c);
      Tensor<T> dg = Tensor<T>::matrix(1, 4 * H), dc = Tensor<T>::matrix(1, H);
      for (std::size_t k = 0; k < H; ++k) {
        const T i = (*act)[k], f = (*act)[H + k], u = (*act)[2 * H + k], o = (*act)[3 * H + k],
                th = (*act)[4 * H + k];
        const T dh = dy[k];
        const T dc2 = dy[H + k] + dh * o * (T(1) - th * th);
        dg[k] = dc2 * u * i * (T(1) - i);
        dg[H + k] = dc2 * Cv[k] * f * (T(1) - f);
        dg[2 * H + k] = dc2 * i * (T(1) - u * u);
        dg[3 * H + k] = dh * th * o * (T(1) - o);
        dc[k] = dc2 * f;
      }
      if (g.requires_grad(gates)) g.acc(gates, std::move(dg));
      if (g.requires_grad(c)) g.acc(c, std::move(dc));
    });
  }

  /// Summed (not averaged) negative log-likelihood over rows whose target is
  /// not `ignore_index`, as a 1 x 1 node. Callers divide by the token count.
  Var cross_entropy_sum(Var logits, std::span<const std::int32_t> targets, std::int32_t ignore_index = -1) {
    const Tensor<T>& z = value(logits);
    if (targets.size() != z.rows()) throw DimensionError("cross_entropy: target count != rows");
    auto lp = std::make_shared<Tensor<T>>(ops::log_softmax_rows(z));
    T sum = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i] == ignore_index) continue;
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= z.cols())
        throw DimensionError("cross_entropy: target " + std::to_string(targets[i]) + " out of range");
      sum -= lp->at(i, targets[i]);
    }
    std::vector<std::int32_t> saved(targets.begin(), targets.end());
    return push_op(Tensor<T>({1, 1}, sum), {logits}, [logits, lp, saved, ignore_index](Graph& g, const Tensor<T>& dy) {
      const T seed = dy[0];
      Tensor<T> d(lp->shape());
      for (std::size_t i = 0; i < saved.size(); ++i) {
        if (saved[i] == ignore_index) continue;
        for (std::size_t j = 0; j < d.cols(); ++j) d.at(i, j) = std::exp(lp->at(i, j)) * seed;
        d.at(i, saved[i]) -= seed;
      }
      g.acc(logits, d);
    });
  }

  /// Inverted dropout; identity when p == 0.
  Var dropout(Var x, T p, Rng& rng) {
    if (p <= T(0)) return x;
    if (p >= T(1)) throw ConfigError("dropout probability must be < 1");
    Tensor<T> mask(value(x).shape());
    for (auto& m : mask.vec()) m = rng.uniform() < static_cast<double>(p) ? T(0) : T(1) / (T(1) - p);
    return mul(x, constant(std::move(mask)));
  }

  Var sum_all(Var x) {
    T s = 0;
    for (T v : value(x).vec()) s += v;
    return push_op(Tensor<T>({1, 1}, s), {x}, [x](Graph& g, const Tensor<T>& dy) {
      g.acc(x, Tensor<T>(g.value(x).shape(), dy[0]));
    });
  }

  // ---- backward ---------------------------------------------------------------

  /// Backpropagates from a 1 x 1 node.
  void backward(Var loss, T seed = T(1)) {
    if (value(loss).size() != 1) throw DimensionError("backward: loss must be a scalar");
    if (!requires_grad(loss)) return;
    nodes_[loss.id].grad = Tensor<T>(value(loss).shape(), seed);
    // nodes are appended in evaluation order, so reverse order is topological
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      if (!n.grad.all_finite()) n.grad.check_finite("gradient of graph node " + std::to_string(i));
      n.backward(*this, n.grad);
    }
  }

 private:
  using Backward = std::function<void(Graph&, const Tensor<T>&)>;

  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;  // parameter leaves alias the store
    Tensor<T> grad;
    bool requires_grad = false;
    Backward backward;
  };

  static Tensor<T> colsum(const Tensor<T>& dy) {
    Tensor<T> s = Tensor<T>::matrix(1, dy.cols());
    for (std::size_t i = 0; i < dy.rows(); ++i)
      for (std::size_t j = 0; j < dy.cols(); ++j) s[j] += dy.at(i, j);
    return s;
  }
  static Tensor<T> hadamard(const Tensor<T>& a, const Tensor<T>& b) {
    Tensor<T> y = a;
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b[i];
    return y;
  }
  static Tensor<T> slice(const Tensor<T>& x, std::size_t start, std::size_t len) {
    Tensor<T> y = Tensor<T>::matrix(x.rows(), len);
    for (std::size_t i = 0; i < x.rows(); ++i) std::copy_n(x.row_span(i).data() + start, len, y.row_span(i).data());
    return y;
  }

  Var push(Tensor<T> value, bool requires_grad, Backward backward) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  Var push_op(Tensor<T> value, std::initializer_list<Var> inputs, Backward backward) {
    bool rg = false;
    for (Var in : inputs)
      if (in.valid() && nodes_[in.id].requires_grad) rg = true;
    return push(std::move(value), rg, rg ? std::move(backward) : Backward{});
  }

  void set_backward(Var v, Backward b) {
    if (nodes_[v.id].requires_grad) nodes_[v.id].backward = std::move(b);
  }

  void acc(Var v, Tensor<T> g) {
    if (!v.valid()) return;
    Node& n = nodes_[v.id];
    if (!n.requires_grad) return;
    if (n.grad.empty()) {
      n.grad = std::move(g);
      return;
    }
    require_same_shape(n.grad, g, "gradient accumulation");
    for (std::size_t i = 0; i < g.size(); ++i) n.grad[i] += g[i];
  }

  // grad(v) += a b, written straight into an existing gradient
  void acc_nn(Var v, const Tensor<T>& a, const Tensor<T>& b) {
    if (!v.valid() || !nodes_[v.id].requires_grad) return;
    Tensor<T>& gr = nodes_[v.id].grad;
    if (gr.empty()) {
      gr = ops::matmul(a, b);
      return;
    }
    if (a.cols() != b.rows() || gr.rows() != a.rows() || gr.cols() != b.cols())
      throw DimensionError("gradient accumulation: product shape mismatch");
    if (a.cols() > 0) ops::view(gr).noalias() += ops::view(a) * ops::view(b);
  }

  // grad(v) += a^T b
  void acc_tn(Var v, const Tensor<T>& a, const Tensor<T>& b) {
    if (!v.valid() || !nodes_[v.id].requires_grad) return;
    Tensor<T>& gr = nodes_[v.id].grad;
    if (gr.empty()) {
      gr = ops::matmul_tn(a, b);
      return;
    }
    if (a.rows() != b.rows() || gr.rows() != a.cols() || gr.cols() != b.cols())
      throw DimensionError("gradient accumulation: product shape mismatch");
    if (a.rows() > 0) ops::view(gr).noalias() += ops::view(a).transpose() * ops::view(b);
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter<T>*, Var> param_nodes_;
};

}  // namespace dualpipe
