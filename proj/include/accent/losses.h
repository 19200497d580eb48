#pragma once

#include <span>
#include <vector>

#include "accent/adapters.h"
#include "accent/matrix.h"

namespace accent {

struct LossWithGrad {
  double loss = 0.0;
  Matrix grad;  // same shape as the scored input
};

/// Minimum frames needed to align `labels`: one per label plus a blank
/// between each pair of equal neighbours.
std::size_t ctc_min_frames(std::span<const int> labels);

/// Negative log-likelihood of `labels` under per-frame log-probabilities,
/// via the log-domain forward-backward over the blank-augmented lattice.
/// The gradient is taken wrt `log_probs` treated as free inputs.
LossWithGrad ctc_loss(const Matrix& log_probs, std::span<const int> labels);

/// Per-frame label posteriors (T x V) from the forward-backward pass; each
/// row sums to one.
Matrix ctc_posteriors(const Matrix& log_probs, std::span<const int> labels);

/// Enumerates all V^T frame paths. Returns +inf when no path collapses to
/// `labels`. Refuses instances with V^T > 1e6.
double ctc_brute_force(const Matrix& log_probs, std::span<const int> labels);

/// Mean per-row NLL of `targets` (length = rows) under `log_probs`.
LossWithGrad s2s_loss(const Matrix& log_probs, std::span<const int> targets);

/// Teacher-forced scoring targets: content tokens followed by eos.
std::vector<int> s2s_targets(std::span<const int> tokens);

double jca_loss(double l_ctc, double l_s2s, double lambda_ctc);

struct MseWithGrad {
  double loss = 0.0;
  std::vector<double> grad;  // wrt alpha
};

/// (1/n) sum_k (ref_k - alpha_k)^2.
MseWithGrad coeff_mse(const CoefficientVector& alpha_ref, const CoefficientVector& alpha);

double mtl_loss(double l_jca, double l_mse, double gamma_mtl);

struct LossBreakdown {
  double l_ctc = 0.0;
  double l_s2s = 0.0;
  double l_jca = 0.0;
  double l_mse = 0.0;
  double l_mtl = 0.0;
  double lambda_ctc = 0.3;
  double gamma_mtl = 0.01;

  static LossBreakdown make(double l_ctc, double l_s2s, double l_mse, double lambda_ctc,
                            double gamma_mtl);
  /// Checks the joint and multi-task identities within `tol`.
  bool consistent(double tol = 1e-12) const;
};

}  // namespace accent
