// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dualpipe/core/parameter.hpp"

namespace dualpipe {

struct GradCheckEntry {
  std::string param;
  double max_rel_error = 0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  double max_rel_error = 0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  bool pass = false;
  std::vector<GradCheckEntry> per_param;
};

struct GradCheckOptions {
  double tol = 1e-4;
  double step = 1e-5;
  /// Relative errors use max(|analytic|, |numeric|, floor) as denominator.
  double floor = 1e-5;
  /// 0 checks every entry; otherwise an evenly strided subset per tensor.
  std::size_t max_entries_per_param = 0;
};

/// Central finite differences against an analytic gradient, in double
/// precision. `loss` evaluates the scalar objective at the current parameter
/// values; `analytic` returns the gradient of every trainable parameter.
inline GradCheckReport grad_check(const std::function<double(const ParamStore<double>&)>& loss,
                                  const std::function<GradBuffer<double>(const ParamStore<double>&)>& analytic,
                                  ParamStore<double>& params, const GradCheckOptions& opt = {}) {
  const double base = loss(params);
  if (!std::isfinite(base)) throw NonFiniteError("grad_check: objective is not finite");
  const GradBuffer<double> grads = analytic(params);
  GradCheckReport rep;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& prm = params[p];
    if (!prm.trainable) continue;
    GradCheckEntry entry{prm.name, 0.0, 0};
    const std::size_t n = prm.value.size();
    const std::size_t stride =
        opt.max_entries_per_param == 0 || n <= opt.max_entries_per_param ? 1 : n / opt.max_entries_per_param;
    for (std::size_t i = 0; i < n; i += stride) {
      const double orig = prm.value[i];
      prm.value[i] = orig + opt.step;
      const double up = loss(params);
      prm.value[i] = orig - opt.step;
      const double down = loss(params);
      prm.value[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down)) throw NonFiniteError("grad_check: objective is not finite");
      const double numeric = (up - down) / (2 * opt.step);
      const double a = grads[p][i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opt.floor});
      ++entry.checked;
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
      if (rep.checked == 0 || rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = prm.name;
        rep.worst_index = i;
      }
      ++rep.checked;
    }
    rep.per_param.push_back(entry);
  }
  rep.pass = rep.checked > 0 && rep.max_rel_error <= opt.tol;
  return rep;
}

}  // namespace dualpipe
