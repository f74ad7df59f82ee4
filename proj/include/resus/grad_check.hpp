// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "resus/mat.hpp"

namespace resus {

// Central finite differences against analytic gradients. The loss closure
// must recompute the scalar from the current parameter contents; grads must
// already hold the analytic values for the same point.
template <typename T>
struct GradCheckParam {
  std::string name;
  MatT<T>* value;
  const MatT<T>* grad;
};

// Default steps: 1e-3 for float, 1e-6 for double.
template <typename T>
constexpr T default_fd_step() {
  return std::is_same_v<T, float> ? T(1e-3) : T(1e-6);
}

// Returns max over parameter entries of |analytic - numeric| / max(1, |numeric|).
template <typename T>
double grad_check(const std::function<double()>& loss, const std::vector<GradCheckParam<T>>& params,
                  T h = default_fd_step<T>()) {
  double worst = 0.0;
  for (const auto& p : params) {
    for (std::size_t i = 0; i < p.value->size(); ++i) {
      const T saved = p.value->a[i];
      const T up = saved + h;    // realized steps: the stored perturbation is
      const T down = saved - h;  // rounded, so divide by what actually moved
      p.value->a[i] = up;
      const double fp = loss();
      p.value->a[i] = down;
      const double fm = loss();
      p.value->a[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw std::runtime_error("grad_check: non-finite loss while perturbing " + p.name + "[" + std::to_string(i) +
                                 "]");
      const double numeric = (fp - fm) / (static_cast<double>(up) - static_cast<double>(down));
      const double analytic = static_cast<double>(p.grad->a[i]);
      const double rel = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace resus
