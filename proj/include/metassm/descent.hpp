#pragma once

#include <cmath>
#include <concepts>
#include <string>
#include <utility>

#include "metassm/errors.hpp"
#include "metassm/param_vector.hpp"

namespace metassm {

/// A differentiable loss over a batch type with exact Hessian-vector products.
template <class O>
concept Objective = requires(const O& o, const ParamVector& w, const typename O::Batch& b,
                             double& out) {
  { o.loss(w, b) } -> std::convertible_to<double>;
  { o.gradient(w, b) } -> std::same_as<ParamVector>;
  { o.loss_and_gradient(w, b, out) } -> std::same_as<ParamVector>;
  { o.hvp(w, b, w) } -> std::same_as<ParamVector>;
};

/// `steps` gradient steps on loss(psi) + (gamma / 2) ||psi - anchor||^2 starting
/// from `start`. gamma = 0 gives plain gradient descent.
template <Objective O>
ParamVector proximal_descent(const O& obj, const ParamVector& anchor, ParamVector start,
                             const typename O::Batch& batch, double gamma, double beta,
                             int steps) {
  if (steps < 0) throw ConfigError("descent: steps must be non-negative");
  if (!(beta > 0.0)) throw ConfigError("descent: learning rate must be positive");
  if (gamma < 0.0) throw ConfigError("descent: gamma must be non-negative");
  ParamVector psi = std::move(start);
  for (int m = 1; m <= steps; ++m) {
    double loss = 0.0;
    ParamVector g = obj.loss_and_gradient(psi, batch, loss);
    if (!std::isfinite(loss) || !g.values().allFinite()) {
      throw NumericalError("descent: non-finite loss at step " + std::to_string(m));
    }
    if (gamma > 0.0) g = axpy(gamma, psi - anchor, g);
    psi = axpy(-beta, g, psi);
  }
  return psi;
}

template <Objective O>
ParamVector proximal_descent(const O& obj, const ParamVector& anchor,
                             const typename O::Batch& batch, double gamma, double beta,
                             int steps) {
  return proximal_descent(obj, anchor, anchor, batch, gamma, beta, steps);
}

}  // namespace metassm
