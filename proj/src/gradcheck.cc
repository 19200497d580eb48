#include "accent/gradcheck.h"

#include <algorithm>
#include <cmath>

namespace accent {

std::vector<Matrix> finite_difference_grad(const std::function<double()>& f,
                                           const std::vector<Parameter*>& params,
                                           double step) {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (Parameter* p : params) {
    Matrix g(p->value.rows(), p->value.cols());
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      double& v = p->value.data()[i];
      const double saved = v;
      v = saved + step;
      const double up = f();
      v = saved - step;
      const double down = f();
      v = saved;
      g.data()[i] = (up - down) / (2.0 * step);
    }
    out.push_back(std::move(g));
  }
  return out;
}

double relative_error(const Matrix& analytic, const Matrix& numeric) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i], b = numeric.data()[i];
    diff += (a - b) * (a - b);
    na += a * a;
    nb += b * b;
  }
  return std::sqrt(diff) / std::max(1e-8, std::sqrt(na) + std::sqrt(nb));
}

GradCheckResult check_gradients(const std::string& name,
                                const std::function<double()>& loss,
                                const std::function<void()>& loss_and_backward,
                                const std::vector<Parameter*>& params, double tolerance) {
  for (Parameter* p : params) p->zero_grad();
  loss_and_backward();
  const auto numeric = finite_difference_grad(loss, params);

  GradCheckResult result;
  result.name = name;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double err = relative_error(params[i]->grad, numeric[i]);
    if (i == 0 || err > result.worst_relative_error) {
      result.worst_relative_error = err;
      result.worst_param = params[i]->name;
    }
  }
  result.passed = result.worst_relative_error < tolerance;
  return result;
}

}  // namespace accent
