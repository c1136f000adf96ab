#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "dydit/primitives.hpp"

namespace dydit {

/// Compares the reverse-mode gradient of `fn` at `point` with central
/// differences. Returns max_i |analytic_i - fd_i| / (|fd_i| + 1e-8).
///
/// `point` is perturbed in place and restored; `fn` may close over it (for
/// example when the point is a model parameter).
template <typename T>
double finite_difference_check(const std::function<BasicTensor<T>(const BasicTensor<T>&)>& fn,
                               BasicTensor<T> point, double eps) {
  require(eps > 0, "finite_difference_check: eps must be positive");
  require(point.is_leaf(), "finite_difference_check: point must be a leaf tensor");
  const bool had_requires_grad = point.requires_grad();
  point.set_requires_grad(true);
  point.zero_grad();

  auto loss = fn(point);
  require(loss.numel() == 1, "finite_difference_check: fn must return a scalar, got shape ", shape_str(loss.shape()));
  std::vector<double> analytic(static_cast<std::size_t>(point.numel()), 0.0);
  if (!loss.is_leaf()) {
    reverse_accumulate(loss);
    if (point.has_grad()) std::copy(point.grad().begin(), point.grad().end(), analytic.begin());
  }
  point.zero_grad();

  auto evaluate = [&]() {
    NoGradGuard guard;
    return static_cast<double>(fn(point).item());
  };

  double worst = 0;
  auto values = point.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    // Divide by the representable step, not the nominal one.
    values[i] = static_cast<T>(saved + eps);
    const double hi = values[i];
    const double up = evaluate();
    values[i] = static_cast<T>(saved - eps);
    const double lo = values[i];
    const double down = evaluate();
    values[i] = saved;
    const double fd = (up - down) / (hi - lo);
    worst = std::max(worst, std::abs(analytic[i] - fd) / (std::abs(fd) + 1e-8));
  }
  point.set_requires_grad(had_requires_grad);
  return worst;
}

}  // namespace dydit
