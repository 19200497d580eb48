#include "accent/losses.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "accent/errors.h"
#include "accent/model.h"

namespace accent {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_labels(const Matrix& log_probs, std::span<const int> labels) {
  if (labels.empty()) throw InputError("ctc: label sequence is empty");
  for (int l : labels) {
    if (l == kBlank) throw InputError("ctc: labels contain the blank token");
    if (l < 0 || static_cast<std::size_t>(l) >= log_probs.cols())
      throw InputError("ctc: label " + std::to_string(l) + " outside vocabulary of " +
                       std::to_string(log_probs.cols()));
  }
}

struct Lattice {
  std::vector<int> ext;      // blank-augmented labels
  Matrix alpha, beta;        // T x S, log domain; beta excludes frame t's emission
  double log_likelihood = kNegInf;
};

Lattice forward_backward(const Matrix& lp, std::span<const int> labels) {
  check_labels(lp, labels);
  const std::size_t T = lp.rows();
  if (T < ctc_min_frames(labels)) {
    throw InfeasibleError("ctc: " + std::to_string(labels.size()) + " labels need at least " +
                          std::to_string(ctc_min_frames(labels)) + " frames, got " +
                          std::to_string(T));
  }
  Lattice lat;
  lat.ext.push_back(kBlank);
  for (int l : labels) {
    lat.ext.push_back(l);
    lat.ext.push_back(kBlank);
  }
  const auto& ext = lat.ext;
  const std::size_t S = ext.size();
  auto can_skip = [&ext](std::size_t s) {
    return s >= 2 && ext[s] != kBlank && ext[s] != ext[s - 2];
  };

  lat.alpha = Matrix(T, S, kNegInf);
  Matrix& a = lat.alpha;
  a(0, 0) = lp(0, kBlank);
  a(0, 1) = lp(0, static_cast<std::size_t>(ext[1]));
  for (std::size_t t = 1; t < T; ++t) {
    for (std::size_t s = 0; s < S; ++s) {
      double acc = a(t - 1, s);
      if (s >= 1) acc = log_add_exp(acc, a(t - 1, s - 1));
      if (can_skip(s)) acc = log_add_exp(acc, a(t - 1, s - 2));
      a(t, s) = acc == kNegInf ? kNegInf : acc + lp(t, static_cast<std::size_t>(ext[s]));
    }
  }
  lat.log_likelihood = log_add_exp(a(T - 1, S - 1), a(T - 1, S - 2));

  lat.beta = Matrix(T, S, kNegInf);
  Matrix& b = lat.beta;
  b(T - 1, S - 1) = 0.0;
  b(T - 1, S - 2) = 0.0;
  for (std::size_t t = T - 1; t-- > 0;) {
    for (std::size_t s = 0; s < S; ++s) {
      auto step = [&](std::size_t s2) {
        return b(t + 1, s2) + lp(t + 1, static_cast<std::size_t>(ext[s2]));
      };
      double acc = step(s);
      if (s + 1 < S) acc = log_add_exp(acc, step(s + 1));
      if (s + 2 < S && can_skip(s + 2)) acc = log_add_exp(acc, step(s + 2));
      b(t, s) = acc;
    }
  }
  return lat;
}

}  // namespace

std::size_t ctc_min_frames(std::span<const int> labels) {
  std::size_t n = labels.size();
  for (std::size_t i = 1; i < labels.size(); ++i)
    if (labels[i] == labels[i - 1]) ++n;
  return n;
}

Matrix ctc_posteriors(const Matrix& log_probs, std::span<const int> labels) {
  const Lattice lat = forward_backward(log_probs, labels);
  Matrix post(log_probs.rows(), log_probs.cols());
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    for (std::size_t s = 0; s < lat.ext.size(); ++s) {
      const double occ = lat.alpha(t, s) + lat.beta(t, s);
      if (occ == kNegInf) continue;
      post(t, static_cast<std::size_t>(lat.ext[s])) += std::exp(occ - lat.log_likelihood);
    }
  }
  return post;
}

LossWithGrad ctc_loss(const Matrix& log_probs, std::span<const int> labels) {
  const Lattice lat = forward_backward(log_probs, labels);
  Matrix grad(log_probs.rows(), log_probs.cols());
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    for (std::size_t s = 0; s < lat.ext.size(); ++s) {
      const double occ = lat.alpha(t, s) + lat.beta(t, s);
      if (occ == kNegInf) continue;
      grad(t, static_cast<std::size_t>(lat.ext[s])) -= std::exp(occ - lat.log_likelihood);
    }
  }
  return {-lat.log_likelihood, std::move(grad)};
}

double ctc_brute_force(const Matrix& log_probs, std::span<const int> labels) {
  const std::size_t T = log_probs.rows(), V = log_probs.cols();
  double paths = 1.0;
  for (std::size_t t = 0; t < T; ++t) paths *= static_cast<double>(V);
  if (paths > 1e6) {
    throw GuardError("ctc_brute_force: " + std::to_string(V) + "^" + std::to_string(T) +
                     " paths exceeds the 1e6 enumeration guard");
  }
  const auto total = static_cast<std::size_t>(paths);
  std::vector<double> matched;
  std::vector<int> collapsed;
  for (std::size_t index = 0; index < total; ++index) {
    collapsed.clear();
    std::size_t code = index;
    int prev = -1;
    double score = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t sym = code % V;
      code /= V;
      score += log_probs(t, sym);
      if (static_cast<int>(sym) != prev && static_cast<int>(sym) != kBlank)
        collapsed.push_back(static_cast<int>(sym));
      prev = static_cast<int>(sym);
    }
    if (std::equal(collapsed.begin(), collapsed.end(), labels.begin(), labels.end()))
      matched.push_back(score);
  }
  return -log_sum_exp(matched);
}

LossWithGrad s2s_loss(const Matrix& log_probs, std::span<const int> targets) {
  if (log_probs.rows() != targets.size()) {
    throw DimensionError("s2s_loss: " + std::to_string(log_probs.rows()) + " rows for " +
                         std::to_string(targets.size()) + " targets");
  }
  const double n = static_cast<double>(targets.size());
  LossWithGrad out{0.0, Matrix(log_probs.rows(), log_probs.cols())};
  for (std::size_t j = 0; j < targets.size(); ++j) {
    const auto col = static_cast<std::size_t>(targets[j]);
    out.loss -= log_probs(j, col);
    out.grad(j, col) = -1.0 / n;
  }
  out.loss /= n;
  return out;
}

std::vector<int> s2s_targets(std::span<const int> tokens) {
  std::vector<int> out(tokens.begin(), tokens.end());
  out.push_back(kEos);
  return out;
}

double jca_loss(double l_ctc, double l_s2s, double lambda_ctc) {
  if (!(lambda_ctc >= 0.0 && lambda_ctc <= 1.0))
    throw ConfigError("lambda_ctc must lie in [0, 1], got " + std::to_string(lambda_ctc));
  if (lambda_ctc == 0.0) return l_s2s;
  if (lambda_ctc == 1.0) return l_ctc;
  return lambda_ctc * l_ctc + (1.0 - lambda_ctc) * l_s2s;
}

MseWithGrad coeff_mse(const CoefficientVector& alpha_ref, const CoefficientVector& alpha) {
  if (alpha_ref.size() != alpha.size()) {
    throw ConfigError("coeff_mse: reference has " + std::to_string(alpha_ref.size()) +
                      " entries, prediction " + std::to_string(alpha.size()));
  }
  const double n = static_cast<double>(alpha.size());
  MseWithGrad out{0.0, std::vector<double>(alpha.size())};
  for (std::size_t k = 0; k < alpha.size(); ++k) {
    const double d = alpha.values[k] - alpha_ref.values[k];
    out.loss += d * d;
    out.grad[k] = 2.0 * d / n;
  }
  out.loss /= n;
  return out;
}

double mtl_loss(double l_jca, double l_mse, double gamma_mtl) {
  if (!(gamma_mtl >= 0.0))
    throw ConfigError("gamma_mtl must be >= 0, got " + std::to_string(gamma_mtl));
  return l_jca + gamma_mtl * l_mse;
}

LossBreakdown LossBreakdown::make(double l_ctc, double l_s2s, double l_mse, double lambda_ctc,
                                  double gamma_mtl) {
  LossBreakdown b;
  b.l_ctc = l_ctc;
  b.l_s2s = l_s2s;
  b.l_mse = l_mse;
  b.lambda_ctc = lambda_ctc;
  b.gamma_mtl = gamma_mtl;
  b.l_jca = jca_loss(l_ctc, l_s2s, lambda_ctc);
  b.l_mtl = mtl_loss(b.l_jca, l_mse, gamma_mtl);
  return b;
}

bool LossBreakdown::consistent(double tol) const {
  const double jca = lambda_ctc * l_ctc + (1.0 - lambda_ctc) * l_s2s;
  const double mtl = l_jca + gamma_mtl * l_mse;
  const double lo = std::min(l_ctc, l_s2s), hi = std::max(l_ctc, l_s2s);
  return std::abs(jca - l_jca) <= tol && std::abs(mtl - l_mtl) <= tol && l_jca >= lo - tol &&
         l_jca <= hi + tol;
}

}  // namespace accent
