// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dualpipe/core/parameter.hpp"

namespace dualpipe {

template <typename T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::uint64_t step = 0;
  T beta1 = T(0.9);
  T beta2 = T(0.999);
  T eps = T(1e-8);

  static AdamState zeros_like(const Tensor<T>& param) {
    AdamState s;
    s.m = Tensor<T>(param.shape());
    s.v = Tensor<T>(param.shape());
    return s;
  }
};

/// One bias-corrected Adam update in place. `name` is used in diagnostics.
template <typename T>
void adam_step(Tensor<T>& param, const Tensor<T>& grad, AdamState<T>& state, T lr, const std::string& name = "param") {
  require_same_shape(param, grad, "adam_step");
  if (state.m.empty() && param.size() != 0) state = AdamState<T>::zeros_like(param);
  require_same_shape(param, state.m, "adam_step state");
  grad.check_finite("gradient of " + name);
  ++state.step;
  const T c1 = T(1) - std::pow(state.beta1, static_cast<T>(state.step));
  const T c2 = T(1) - std::pow(state.beta2, static_cast<T>(state.step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const T g = grad[i];
    state.m[i] = state.beta1 * state.m[i] + (T(1) - state.beta1) * g;
    state.v[i] = state.beta2 * state.v[i] + (T(1) - state.beta2) * g * g;
    const T mhat = state.m[i] / c1;
    const T vhat = state.v[i] / c2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
  }
}

/// Linear warmup over the first 10% of steps, flat for the next 40%, then
/// linear decay to zero over the last 50%.
struct TriStageSchedule {
  double peak_lr = 1e-3;
  std::uint64_t total_steps = 1;
  double warmup_frac = 0.10;
  double const_frac = 0.40;
  double decay_frac = 0.50;

  void validate() const {
    if (!(peak_lr > 0)) throw ConfigError("schedule peak_lr must be positive");
    if (total_steps == 0) throw ConfigError("schedule total_steps must be positive");
    if (std::abs(warmup_frac + const_frac + decay_frac - 1.0) > 1e-12)
      throw ConfigError("schedule stage fractions must sum to 1");
  }
};

inline double lr_at(const TriStageSchedule& s, std::uint64_t step) {
  s.validate();
  if (step > s.total_steps)
    throw ConfigError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(s.total_steps));
  const double total = static_cast<double>(s.total_steps);
  const double t = static_cast<double>(step);
  const double warm_end = s.warmup_frac * total;
  const double const_end = (s.warmup_frac + s.const_frac) * total;
  if (t < warm_end) return s.peak_lr * t / warm_end;
  if (t <= const_end) return s.peak_lr;
  const double decay_len = total - const_end;
  return s.peak_lr * std::max(0.0, (total - t) / decay_len);
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clipping norm.
template <typename T>
double clip_grad_norm(GradBuffer<T>& grads, double max_norm) {
  double sq = 0;
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (T v : grads[i].vec()) sq += static_cast<double>(v) * static_cast<double>(v);
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) grads.scale(static_cast<T>(max_norm / norm));
  return norm;
}

/// Adam over every trainable parameter of a store.
template <typename T>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(const ParamStore<T>& store) : states_(store.size()) {}

  void step(ParamStore<T>& store, const GradBuffer<T>& grads, T lr) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (!store[i].trainable) continue;
      adam_step(store[i].value, grads[i], states_[i], lr, store[i].name);
    }
  }

  const AdamState<T>& state(std::size_t i) const { return states_[i]; }

 private:
  std::vector<AdamState<T>> states_;
};

}  // namespace dualpipe
