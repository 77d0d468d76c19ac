// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <numeric>

#include "dualpipe/core/gradcheck.hpp"
#include "dualpipe/core/graph.hpp"
#include "dualpipe/core/lora.hpp"
#include "dualpipe/core/ops.hpp"
#include "dualpipe/core/optim.hpp"
#include "dualpipe/core/rng.hpp"

using namespace dualpipe;

namespace {

Tensor<double> random_matrix(Rng& rng, std::size_t r, std::size_t c, double sd = 1.0) {
  Tensor<double> t = Tensor<double>::matrix(r, c);
  for (auto& v : t.vec()) v = rng.normal(0.0, sd);
  return t;
}

// Straightforward reference matmul; independent of the Eigen kernel.
Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  Tensor<double> out = Tensor<double>::matrix(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

}  // namespace

TEST(Tensor, StorageIsAlignedForVectorKernels) {
  const std::size_t align = EIGEN_MAX_ALIGN_BYTES > 0 ? EIGEN_MAX_ALIGN_BYTES : 16;
  for (std::size_t n = 1; n < 40; ++n) {
    Tensor<float> a = Tensor<float>::matrix(1, n);
    const Tensor<float> b = a;
    const Tensor<double> c({n, 1}, std::vector<double>(n, 1.0));
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(a.data()) % align, 0u);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(b.data()) % align, 0u);
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(c.data()) % align, 0u);
  }
}

TEST(Rng, CounterStreamIsPinned) {
  // splitmix64 finalizer of seed + i * golden gamma, computed independently
  Rng rng(42);
  EXPECT_EQ(rng.next_u64(), 0xbdd732262feb6e95ULL);
  EXPECT_EQ(rng.next_u64(), 0x28efe333b266f103ULL);
  EXPECT_EQ(rng.next_u64(), 0x47526757130f9f52ULL);
}

TEST(Rng, SameSeedSameStreamAndDerivedStreamsDiffer) {
  Rng a(7), b(7);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  EXPECT_NE(Rng(7).derive(1).next_u64(), Rng(7).derive(2).next_u64());
  Rng u(3);
  for (int i = 0; i < 1000; ++i) {
    const auto k = u.uniform_int(-2, 5);
    ASSERT_GE(k, -2);
    ASSERT_LE(k, 5);
  }
}

TEST(LoraLinear, ZeroBIsExactlyThePlainProduct) {
  Rng rng(1);
  const auto W = random_matrix(rng, 6, 5);
  const auto x = random_matrix(rng, 3, 5);
  auto ad = LoraAdapter<double>::init(5, 6, 3, 2.0, rng);
  EXPECT_TRUE(bitwise_equal(lora_linear(W, ad, x), ops::matmul_nt(x, W)));
}

TEST(LoraLinear, RankZeroIsExactlyThePlainProduct) {
  Rng rng(2);
  const auto W = random_matrix(rng, 4, 4);
  const auto x = random_matrix(rng, 2, 4);
  auto ad = LoraAdapter<double>::init(4, 4, 0, 1.0, rng);
  EXPECT_TRUE(bitwise_equal(lora_linear(W, ad, x), ops::matmul_nt(x, W)));
}

TEST(LoraLinear, HandExample) {
  LoraAdapter<double> ad;
  ad.rank = 1;
  ad.alpha = 1;
  ad.A = Tensor<double>::from_rows({{1, 0}});
  ad.B = Tensor<double>::from_rows({{2}, {0}});
  const auto W = Tensor<double>::from_rows({{1, 0}, {0, 1}});
  const auto h = lora_linear(W, ad, Tensor<double>::row({3, 4}));
  EXPECT_DOUBLE_EQ(h[0], 9.0);
  EXPECT_DOUBLE_EQ(h[1], 4.0);
}

TEST(LoraLinear, MatchesMergedMatrixOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 8, r = 2;
    const double alpha = 4.0;
    const auto W = random_matrix(rng, d, d);
    LoraAdapter<double> ad = LoraAdapter<double>::init(d, d, r, alpha, rng);
    ad.B = random_matrix(rng, d, r);
    const auto x = random_matrix(rng, 3, d);
    // oracle: materialize W + (alpha/r) B A, then a plain product
    Tensor<double> merged = W;
    const auto BA = naive_matmul(ad.B, ad.A);
    for (std::size_t i = 0; i < merged.size(); ++i) merged[i] += alpha / double(r) * BA[i];
    const auto expect = naive_matmul(x, ops::transpose(merged));
    const auto got = lora_linear(W, ad, x);
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_LE(std::abs(got[i] - expect[i]), 1e-5 * (1 + std::abs(expect[i])));
  }
}

TEST(LoraLinear, ShapeMismatchIsDimensionError) {
  Rng rng(4);
  const auto W = random_matrix(rng, 4, 3);
  auto ad = LoraAdapter<double>::init(5, 4, 2, 1.0, rng);
  EXPECT_THROW(lora_linear(W, ad, random_matrix(rng, 1, 3)), DimensionError);
  auto ok = LoraAdapter<double>::init(3, 4, 2, 1.0, rng);
  EXPECT_THROW(lora_linear(W, ok, random_matrix(rng, 1, 5)), DimensionError);
}

TEST(LayerNorm, Examples) {
  const auto one = Tensor<double>::row({1, 1});
  const auto zero = Tensor<double>::row({0, 0});
  const auto y = ops::layer_norm(Tensor<double>::row({1, -1}), one, zero, 0.0);
  EXPECT_DOUBLE_EQ(y[0], 1.0);
  EXPECT_DOUBLE_EQ(y[1], -1.0);
  const auto c = ops::layer_norm(Tensor<double>::row({3, 3, 3}), Tensor<double>::row({2, 5, 7}),
                                 Tensor<double>::row({0.5, -1, 4}), 1e-5);
  EXPECT_DOUBLE_EQ(c[0], 0.5);
  EXPECT_DOUBLE_EQ(c[1], -1.0);
  EXPECT_DOUBLE_EQ(c[2], 4.0);
  EXPECT_THROW(ops::layer_norm(Tensor<double>::matrix(1, 0), Tensor<double>::matrix(1, 0),
                               Tensor<double>::matrix(1, 0)),
               DimensionError);
}

TEST(LayerNorm, MatchesTwoPassReference) {
  Rng rng(5);
  const auto x = random_matrix(rng, 1, 16, 3.0);
  const auto g = random_matrix(rng, 1, 16);
  const auto b = random_matrix(rng, 1, 16);
  double mean = 0;
  for (double v : x.vec()) mean += v;
  mean /= 16;
  double var = 0;
  for (double v : x.vec()) var += (v - mean) * (v - mean);
  var /= 16;
  const auto y = ops::layer_norm(x, g, b, 1e-5);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(y[j], (x[j] - mean) / std::sqrt(var + 1e-5) * g[j] + b[j], 1e-6);
}

TEST(Ops, MatmulVariantsMatchNaive) {
  Rng rng(6);
  const auto a = random_matrix(rng, 5, 7);
  const auto b = random_matrix(rng, 7, 3);
  const auto ref = naive_matmul(a, b);
  const auto m = ops::matmul(a, b);
  const auto nt = ops::matmul_nt(a, ops::transpose(b));
  const auto tn = ops::matmul_tn(ops::transpose(a), b);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    EXPECT_NEAR(m[i], ref[i], 1e-12);
    EXPECT_NEAR(nt[i], ref[i], 1e-12);
    EXPECT_NEAR(tn[i], ref[i], 1e-12);
  }
  EXPECT_THROW(ops::matmul(a, a), DimensionError);
}

TEST(Ops, SoftmaxSumsToOneAndIsShiftInvariant) {
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    auto x = random_matrix(rng, 3, 9, 5.0);
    const auto p = ops::softmax_rows(x);
    for (std::size_t i = 0; i < 3; ++i) {
      double s = 0;
      for (double v : p.row_span(i)) s += v;
      EXPECT_NEAR(s, 1.0, 1e-6);
    }
    auto shifted = x;
    for (auto& v : shifted.vec()) v += 123.0;
    const auto q = ops::softmax_rows(shifted);
    for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(p[i], q[i], 1e-9);
  }
  // large logits stay finite because the row max is subtracted
  const auto big = ops::softmax_rows(Tensor<float>::row({1000.f, 999.f}));
  EXPECT_TRUE(big.all_finite());
}

TEST(Ops, ElementwiseActivationsMatchReferences) {
  for (double x : {-4.0, -1.0, -0.1, 0.0, 0.3, 2.0, 6.0}) {
    EXPECT_NEAR(ops::gelu(x), x * 0.5 * std::erfc(-x / std::sqrt(2.0)), 1e-12);
    EXPECT_NEAR(ops::sigmoid(x), 1.0 / (1.0 + std::exp(-x)), 1e-12);
    const double h = 1e-6;
    EXPECT_NEAR(ops::gelu_grad(x), (ops::gelu(x + h) - ops::gelu(x - h)) / (2 * h), 1e-6);
  }
  EXPECT_NEAR(ops::sigmoid(-800.0), 0.0, 1e-300);
}

TEST(Ops, EmbeddingAndCrossEntropy) {
  const auto table = Tensor<double>::from_rows({{1, 2}, {3, 4}, {5, 6}});
  const std::vector<std::int32_t> ids{2, 0};
  const auto e = ops::embedding(table, ids);
  EXPECT_EQ(e, Tensor<double>::from_rows({{5, 6}, {1, 2}}));
  const std::vector<std::int32_t> bad{3};
  EXPECT_THROW(ops::embedding(table, bad), DimensionError);

  const auto logits = Tensor<double>::from_rows({{0, 0, 0}, {1, 2, 3}, {9, 9, 9}});
  const std::vector<std::int32_t> targets{1, 2, -1};
  // hand computation: row0 -> log 3; row1 -> log(e+e^2+e^3) - 3; row2 ignored
  const double r1 = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  EXPECT_NEAR(ops::cross_entropy(logits, targets, -1), (std::log(3.0) + r1) / 2.0, 1e-12);
  const std::vector<std::int32_t> all_ignored{-1, -1, -1};
  EXPECT_EQ(ops::cross_entropy(logits, all_ignored, -1), 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<double> p = Tensor<double>::row({0.5});
  AdamState<double> s;
  adam_step(p, Tensor<double>::row({1.0}), s, 0.01);
  EXPECT_NEAR(p[0], 0.5 - 0.01, 1e-9);
  EXPECT_EQ(s.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParameter) {
  Tensor<double> p = Tensor<double>::row({0.5, -2});
  AdamState<double> s;
  adam_step(p, Tensor<double>::row({0, 0}), s, 0.1);
  EXPECT_EQ(p, Tensor<double>::row({0.5, -2}));
}

TEST(Adam, TwoStepsFollowTextbookRecurrence) {
  Tensor<double> p = Tensor<double>::row({1.0});
  AdamState<double> s;
  const double g1 = 0.4, g2 = -1.5, lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  adam_step(p, Tensor<double>::row({g1}), s, lr);
  adam_step(p, Tensor<double>::row({g2}), s, lr);
  // hand recurrence
  double m = 0, v = 0, w = 1.0;
  m = b1 * m + (1 - b1) * g1;
  v = b2 * v + (1 - b2) * g1 * g1;
  w -= lr * (m / (1 - b1)) / (std::sqrt(v / (1 - b2)) + eps);
  m = b1 * m + (1 - b1) * g2;
  v = b2 * v + (1 - b2) * g2 * g2;
  w -= lr * (m / (1 - b1 * b1)) / (std::sqrt(v / (1 - b2 * b2)) + eps);
  EXPECT_NEAR(p[0], w, 1e-12);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  Tensor<double> p = Tensor<double>::row({1.0});
  AdamState<double> s;
  try {
    adam_step(p, Tensor<double>::row({NAN}), s, 0.1, "enc.0.attn.q.w");
    FAIL() << "expected NonFiniteError";
  } catch (const NonFiniteError& e) {
    EXPECT_NE(std::string(e.what()).find("enc.0.attn.q.w"), std::string::npos);
  }
}

TEST(TriStage, Examples) {
  TriStageSchedule s{1e-3, 100};
  EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(s, 5), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(s, 10), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(s, 30), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(s, 50), 1e-3);
  EXPECT_DOUBLE_EQ(lr_at(s, 75), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(s, 100), 0.0);
  EXPECT_THROW(lr_at(s, 101), ConfigError);
}

TEST(TriStage, ContinuousAtStageBoundaries) {
  for (std::uint64_t total : {10u, 100u, 1000u, 20000u}) {
    TriStageSchedule s{7e-4, total};
    const double slope = s.peak_lr / (0.1 * double(total));
    for (std::uint64_t t = 1; t <= total; ++t) ASSERT_LE(std::abs(lr_at(s, t) - lr_at(s, t - 1)), slope * 1.0000001);
    EXPECT_EQ(lr_at(s, total), 0.0);
  }
}

TEST(GradCheck, SquareFunction) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>::row({3.0}));
  auto loss = [](const ParamStore<double>& p) { return p[0].value[0] * p[0].value[0]; };
  auto grad = [](const ParamStore<double>& p) {
    GradBuffer<double> g(p);
    g[0][0] = 2 * p[0].value[0];
    return g;
  };
  const auto rep = grad_check(loss, grad, ps, {.tol = 1e-8});
  EXPECT_TRUE(rep.pass) << rep.max_rel_error;
  EXPECT_NEAR(grad(ps)[0][0], 6.0, 0.0);
}

TEST(GradCheck, LoraLinearSquaredLoss) {
  Rng rng(11);
  ParamStore<double> ps;
  ps.add("W", random_matrix(rng, 5, 4), false);
  ps.add("A", random_matrix(rng, 2, 4));
  ps.add("B", random_matrix(rng, 5, 2));
  const auto x = random_matrix(rng, 3, 4);
  const auto target = random_matrix(rng, 3, 5);
  auto forward = [&](Graph<double>& g, const ParamStore<double>& p) {
    Var h = g.lora_linear(g.ref(x), g.param(p[0]), Var{}, g.param(p[1]), g.param(p[2]), 1.5);
    Var diff = g.add(h, g.constant([&] {
      auto t = target;
      for (auto& v : t.vec()) v = -v;
      return t;
    }()));
    return g.sum_all(g.mul(diff, diff));
  };
  auto loss = [&](const ParamStore<double>& p) {
    Graph<double> g(false);
    return g.value(forward(g, p))[0];
  };
  auto grad = [&](const ParamStore<double>& p) {
    Graph<double> g;
    Var l = forward(g, p);
    g.backward(l);
    GradBuffer<double> buf(p);
    g.collect_param_grads(buf);
    return buf;
  };
  const auto rep = grad_check(loss, grad, ps);
  EXPECT_TRUE(rep.pass) << rep.worst_param << " " << rep.max_rel_error;
  // frozen W never receives a gradient slot
  EXPECT_TRUE(grad(ps)[0].empty());
}

TEST(GradCheck, NonFiniteObjectiveThrows) {
  ParamStore<double> ps;
  ps.add("w", Tensor<double>::row({1.0}));
  auto loss = [](const ParamStore<double>&) { return std::nan(""); };
  auto grad = [](const ParamStore<double>& p) { return GradBuffer<double>(p); };
  EXPECT_THROW(grad_check(loss, grad, ps), NonFiniteError);
}

namespace {

// weighted sum keeps every output element in the objective
Var weighted(Graph<double>& g, Var y, const Tensor<double>& w) { return g.sum_all(g.mul(y, g.constant(w))); }

template <typename Forward>
GradCheckReport check_graph(ParamStore<double>& ps, Forward forward) {
  auto loss = [&](const ParamStore<double>& p) {
    Graph<double> g(false);
    return g.value(forward(g, p))[0];
  };
  auto grad = [&](const ParamStore<double>& p) {
    Graph<double> g;
    Var l = forward(g, p);
    g.backward(l);
    GradBuffer<double> buf(p);
    g.collect_param_grads(buf);
    return buf;
  };
  return grad_check(loss, grad, ps);
}

}  // namespace

TEST(AdditiveAttention, MatchesComposedOps) {
  Rng rng(21);
  const auto keys = random_matrix(rng, 7, 4), q = random_matrix(rng, 1, 4), v = random_matrix(rng, 1, 4);
  const auto mem = random_matrix(rng, 7, 5);
  Graph<double> g(false);
  auto fused = g.additive_attention(g.ref(keys), g.ref(q), g.ref(v), g.ref(mem));
  Var e = g.linear(g.tanh(g.add_row(g.ref(keys), g.ref(q))), g.ref(v));
  Var a = g.softmax_rows(g.transpose(e));
  Var ctx = g.matmul(a, g.ref(mem));
  for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(g.value(fused.weights)[i], g.value(a)[i], 1e-14);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(g.value(fused.context)[i], g.value(ctx)[i], 1e-14);
  EXPECT_NEAR(std::accumulate(g.value(fused.weights).vec().begin(), g.value(fused.weights).vec().end(), 0.0), 1.0,
              1e-14);
  EXPECT_THROW(g.additive_attention(g.ref(keys), g.ref(v), g.ref(v), g.ref(q)), DimensionError);
}

TEST(AdditiveAttention, GradientsMatchFiniteDifferences) {
  Rng rng(22);
  ParamStore<double> ps;
  ps.add("keys", random_matrix(rng, 6, 3));
  ps.add("q", random_matrix(rng, 1, 3));
  ps.add("v", random_matrix(rng, 1, 3));
  ps.add("mem", random_matrix(rng, 6, 4));
  const auto w = random_matrix(rng, 1, 4);
  const auto rep = check_graph(ps, [&](Graph<double>& g, const ParamStore<double>& p) {
    auto h = g.additive_attention(g.param(p[0]), g.param(p[1]), g.param(p[2]), g.param(p[3]));
    return weighted(g, h.context, w);
  });
  EXPECT_TRUE(rep.pass) << rep.worst_param << " " << rep.max_rel_error;
}

TEST(LstmCell, MatchesGateFormulas) {
  Rng rng(23);
  const std::size_t H = 3;
  const auto gates = random_matrix(rng, 1, 4 * H), c = random_matrix(rng, 1, H);
  Graph<double> g(false);
  const auto& y = g.value(g.lstm_cell(g.ref(gates), g.ref(c)));
  auto sig = [](double x) { return 1.0 / (1.0 + std::exp(-x)); };
  for (std::size_t k = 0; k < H; ++k) {
    const double c2 = sig(gates[H + k]) * c[k] + sig(gates[k]) * std::tanh(gates[2 * H + k]);
    EXPECT_NEAR(y[H + k], c2, 1e-14);
    EXPECT_NEAR(y[k], sig(gates[3 * H + k]) * std::tanh(c2), 1e-14);
  }
  EXPECT_THROW(g.lstm_cell(g.ref(c), g.ref(c)), DimensionError);
}

TEST(LstmCell, GradientsMatchFiniteDifferences) {
  Rng rng(24);
  ParamStore<double> ps;
  ps.add("gates", random_matrix(rng, 1, 8));
  ps.add("c", random_matrix(rng, 1, 2));
  const auto w = random_matrix(rng, 1, 4);
  const auto rep = check_graph(ps, [&](Graph<double>& g, const ParamStore<double>& p) {
    return weighted(g, g.lstm_cell(g.param(p[0]), g.param(p[1])), w);
  });
  EXPECT_TRUE(rep.pass) << rep.worst_param << " " << rep.max_rel_error;
}
