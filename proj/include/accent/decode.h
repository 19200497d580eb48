#pragma once

#include <functional>
#include <span>
#include <vector>

#include "accent/matrix.h"

namespace accent {

/// Best-path decoding: per-frame argmax (ties to the lowest id), merge
/// repeats, drop blanks.
std::vector<int> ctc_greedy(const Matrix& log_probs);

/// CTC prefix recursion state for one label prefix: per-frame log mass of
/// alignments whose collapse equals the prefix, split by whether the last
/// frame emitted blank or the prefix's final token.
struct CtcPrefixState {
  std::vector<int> prefix;
  std::vector<double> nonblank;
  std::vector<double> blank;
  double prefix_score = 0.0;  // log P(collapse starts with prefix)

  /// log P(collapse == prefix) over the full utterance.
  double full_score() const;
};

CtcPrefixState ctc_prefix_initial(const Matrix& log_probs);

/// Extends `state` by `new_token` (never blank) and returns the new state,
/// whose prefix_score is the extended prefix log-probability.
CtcPrefixState ctc_prefix_score(const CtcPrefixState& state, const Matrix& log_probs,
                                int new_token);

struct Hypothesis {
  std::vector<int> tokens;
  double s2s_score = 0.0;
  double ctc_score = 0.0;
  double joint_score = 0.0;
  bool ended = false;
  CtcPrefixState ctc_prefix_state;
};

/// w * ctc + (1 - w) * s2s, with a zero-weight term dropped entirely so an
/// impossible (-inf) score under a disabled scorer does not poison the sum.
double interpolate_scores(double ctc_weight, double ctc, double s2s);

/// Total order: higher joint score, then shorter, then lexicographically
/// smaller tokens, then ended before live.
bool ranks_before(const Hypothesis& a, const Hypothesis& b);

struct DecodeConfig {
  std::size_t beam = 10;
  double ctc_weight = 0.3;
  std::size_t max_len = 8;

  void validate() const;
};

/// Log-probabilities over the full vocabulary for the token after `prefix`.
using NextTokenScorer = std::function<std::vector<double>(std::span<const int> prefix)>;

/// Step-synchronous beam search over decoder tokens with CTC prefix scores
/// interpolated at every expansion. Returns the best ended hypothesis.
Hypothesis joint_beam_search(const NextTokenScorer& scorer, const Matrix& ctc_log_probs,
                             const DecodeConfig& config);

/// Picks the single best joint expansion at every step.
Hypothesis greedy_joint_decode(const NextTokenScorer& scorer, const Matrix& ctc_log_probs,
                               const DecodeConfig& config);

std::size_t edit_distance(std::span<const int> ref, std::span<const int> hyp);
/// Levenshtein distance over len(ref).
double token_error_rate(std::span<const int> ref, std::span<const int> hyp);

}  // namespace accent
