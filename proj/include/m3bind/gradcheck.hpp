#pragma once

#include <functional>

#include "m3bind/tensor.hpp"

namespace m3bind {

// Central-difference gradient of a scalar function, coordinate by coordinate.
// Independent of the tape: the oracle all backward passes are checked against.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  if (!(h > 0.0)) throw ValueError("finite_diff_grad: h must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

// Largest floored relative error between two gradients; the acceptance bound
// for autodiff correctness is 1e-4 on this metric.
inline double max_rel_error(const Tensor& a, const Tensor& b, double floor = 1e-8) {
  detail::require_same_shape(a, b, "max_rel_error");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max(std::abs(b[i]), floor);
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace m3bind
