#pragma once

#include <functional>
#include <string>
#include <vector>

#include "jointlk/optim.hpp"
#include "jointlk/tensor.hpp"

namespace jointlk {

// Central finite-difference gradient checking. The check is independent of the
// tape: it perturbs raw input values and re-evaluates the forward closure.
//
// Relative error is |analytic - fd| / max(|analytic|, |fd|, 1e-4); the floor
// makes near-zero gradients compare absolutely instead of amplifying
// quadrature noise.

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst;  // which input/element was worst
};

// `build` must construct the whole computation on the given tape from the given
// leaves (created with requires_grad=true) and return a scalar loss.
FdReport check_gradients(
    const std::function<Tensor(Tape&, const std::vector<Tensor>&)>& build,
    const std::vector<Shape>& shapes, std::vector<std::vector<double>> values,
    double h = 1e-5);

// Same idea over a ParamStore: `loss_of` evaluates the scalar loss for the
// given parameter values. Analytic gradients come from one tape built by
// `build_loss`.
FdReport check_param_gradients(
    const std::function<Tensor(Tape&, std::map<std::string, Tensor>&)>& build_loss,
    ParamStore store, double h = 1e-5);

double rel_err(double a, double b);

}  // namespace jointlk
