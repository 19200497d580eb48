#include "accent/decode.h"

#include <algorithm>
#include <limits>

#include "accent/errors.h"
#include "accent/model.h"

namespace accent {
namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

Hypothesis expand(const Hypothesis& h, const std::vector<double>& next, const Matrix& lp,
                  int token, double ctc_weight) {
  Hypothesis out;
  out.tokens = h.tokens;
  out.s2s_score = h.s2s_score + next[static_cast<std::size_t>(token)];
  if (token == kEos) {
    out.ended = true;
    out.ctc_score = h.ctc_prefix_state.full_score();
    out.ctc_prefix_state = h.ctc_prefix_state;
  } else {
    out.tokens.push_back(token);
    out.ctc_prefix_state = ctc_prefix_score(h.ctc_prefix_state, lp, token);
    out.ctc_score = out.ctc_prefix_state.prefix_score;
  }
  out.joint_score = interpolate_scores(ctc_weight, out.ctc_score, out.s2s_score);
  return out;
}

std::vector<Hypothesis> expansions(const Hypothesis& h, const NextTokenScorer& scorer,
                                   const Matrix& lp, const DecodeConfig& config) {
  const std::vector<double> next = scorer(h.tokens);
  if (next.size() != lp.cols()) {
    throw DimensionError("decoder scores " + std::to_string(next.size()) +
                         " tokens, CTC posteriors cover " + std::to_string(lp.cols()));
  }
  std::vector<Hypothesis> out;
  out.push_back(expand(h, next, lp, kEos, config.ctc_weight));
  if (h.tokens.size() < config.max_len) {
    for (int c = kEos + 1; c < static_cast<int>(lp.cols()); ++c)
      out.push_back(expand(h, next, lp, c, config.ctc_weight));
  }
  return out;
}

Hypothesis initial_hypothesis(const Matrix& lp) {
  Hypothesis h;
  h.ctc_prefix_state = ctc_prefix_initial(lp);
  return h;
}

}  // namespace

std::vector<int> ctc_greedy(const Matrix& log_probs) {
  std::vector<int> out;
  int prev = -1;
  for (std::size_t t = 0; t < log_probs.rows(); ++t) {
    auto row = log_probs.row(t);
    const int best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best != prev && best != kBlank) out.push_back(best);
    prev = best;
  }
  return out;
}

double CtcPrefixState::full_score() const {
  return log_add_exp(nonblank.back(), blank.back());
}

CtcPrefixState ctc_prefix_initial(const Matrix& log_probs) {
  const std::size_t T = log_probs.rows();
  CtcPrefixState s;
  s.nonblank.assign(T, kNegInf);
  s.blank.resize(T);
  double acc = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    acc += log_probs(t, kBlank);
    s.blank[t] = acc;
  }
  return s;
}

CtcPrefixState ctc_prefix_score(const CtcPrefixState& state, const Matrix& log_probs,
                                int new_token) {
  if (new_token == kBlank) throw InputError("ctc_prefix_score: cannot extend with blank");
  const std::size_t T = log_probs.rows();
  const auto c = static_cast<std::size_t>(new_token);
  const bool repeat = !state.prefix.empty() && state.prefix.back() == new_token;

  CtcPrefixState next;
  next.prefix = state.prefix;
  next.prefix.push_back(new_token);
  next.nonblank.assign(T, kNegInf);
  next.blank.assign(T, kNegInf);

  // Mass that may be followed by a fresh emission of new_token at frame t+1:
  // a repeated token must be separated by a blank.
  auto enter = [&](std::size_t t) {
    return repeat ? state.blank[t] : log_add_exp(state.blank[t], state.nonblank[t]);
  };

  double psi = kNegInf;
  if (state.prefix.empty()) {
    next.nonblank[0] = log_probs(0, c);
    psi = next.nonblank[0];
  }
  for (std::size_t t = 1; t < T; ++t) {
    const double fresh = enter(t - 1) + log_probs(t, c);
    next.nonblank[t] = log_add_exp(next.nonblank[t - 1] + log_probs(t, c), fresh);
    next.blank[t] = log_add_exp(next.blank[t - 1], next.nonblank[t - 1]) + log_probs(t, kBlank);
    psi = log_add_exp(psi, fresh);
  }
  next.prefix_score = psi;
  return next;
}

double interpolate_scores(double ctc_weight, double ctc, double s2s) {
  if (ctc_weight == 0.0) return s2s;
  if (ctc_weight == 1.0) return ctc;
  return ctc_weight * ctc + (1.0 - ctc_weight) * s2s;
}

bool ranks_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.joint_score != b.joint_score) return a.joint_score > b.joint_score;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  if (a.tokens != b.tokens) return a.tokens < b.tokens;
  return a.ended && !b.ended;
}

void DecodeConfig::validate() const {
  if (beam < 1) throw ConfigError("beam must be >= 1");
  if (!(ctc_weight >= 0.0 && ctc_weight <= 1.0))
    throw ConfigError("ctc_weight must lie in [0, 1], got " + std::to_string(ctc_weight));
}

Hypothesis joint_beam_search(const NextTokenScorer& scorer, const Matrix& ctc_log_probs,
                             const DecodeConfig& config) {
  config.validate();
  std::vector<Hypothesis> live{initial_hypothesis(ctc_log_probs)};
  std::vector<Hypothesis> ended;
  while (!live.empty()) {
    std::vector<Hypothesis> candidates;
    for (const auto& h : live) {
      auto more = expansions(h, scorer, ctc_log_probs, config);
      std::move(more.begin(), more.end(), std::back_inserter(candidates));
    }
    std::sort(candidates.begin(), candidates.end(), ranks_before);
    if (candidates.size() > config.beam) candidates.resize(config.beam);
    live.clear();
    for (auto& c : candidates) (c.ended ? ended : live).push_back(std::move(c));
    if (live.empty() || ended.empty()) continue;
    // Expansions never raise a score, so a strictly better ended hypothesis
    // cannot be overtaken.
    const auto best_ended = std::min_element(ended.begin(), ended.end(), ranks_before);
    const auto best_live = std::min_element(live.begin(), live.end(), ranks_before);
    if (best_ended->joint_score > best_live->joint_score) break;
  }
  return *std::min_element(ended.begin(), ended.end(), ranks_before);
}

Hypothesis greedy_joint_decode(const NextTokenScorer& scorer, const Matrix& ctc_log_probs,
                               const DecodeConfig& config) {
  config.validate();
  Hypothesis h = initial_hypothesis(ctc_log_probs);
  while (true) {
    auto options = expansions(h, scorer, ctc_log_probs, config);
    h = *std::min_element(options.begin(), options.end(), ranks_before);
    if (h.ended) return h;
  }
}

std::size_t edit_distance(std::span<const int> ref, std::span<const int> hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

double token_error_rate(std::span<const int> ref, std::span<const int> hyp) {
  if (ref.empty()) throw InputError("token_error_rate: reference is empty");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

}  // namespace accent
