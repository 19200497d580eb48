#pragma once

#include <functional>
#include <string>
#include <vector>

#include "accent/layers.h"

namespace accent {

/// Central-difference gradient of a scalar function of the given parameters.
/// Each entry is perturbed in place by +-step and restored exactly.
std::vector<Matrix> finite_difference_grad(const std::function<double()>& f,
                                           const std::vector<Parameter*>& params,
                                           double step = 1e-5);

/// |a-b| / max(1e-8, |a|+|b|) with |.| the Euclidean norm over the tensor.
double relative_error(const Matrix& analytic, const Matrix& numeric);

struct GradCheckResult {
  std::string name;
  double worst_relative_error = 0.0;
  std::string worst_param;
  bool passed = false;
};

/// Zeroes grads, runs `loss_and_backward` once to fill analytic gradients,
/// then compares every parameter against finite differences of `loss`.
GradCheckResult check_gradients(const std::string& name,
                                const std::function<double()>& loss,
                                const std::function<void()>& loss_and_backward,
                                const std::vector<Parameter*>& params,
                                double tolerance = 1e-4);

}  // namespace accent
