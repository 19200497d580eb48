#include "accent/evaluate.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "accent/errors.h"
#include "accent/losses.h"

namespace accent {
namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string join_tokens(const std::vector<int>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += std::to_string(tokens[i]);
  }
  return out;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path.string());
  return out;
}

UtteranceDecode decode_one(const Model& model, const PreparedUtterance& u,
                           const DecodeConfig& decode) {
  UtteranceDecode d;
  d.utt_id = u.utt_id;
  d.accent = u.accent;
  d.reference = u.tokens;
  d.losses = utterance_losses(model, u);

  const Encoded enc = model.encode(u.features, u.z);
  d.alpha = enc.alpha;
  const NextTokenScorer scorer = [&](std::span<const int> prefix) {
    return model.next_token_log_probs(enc.memory, prefix);
  };
  const Hypothesis best = decode.beam == 1
                              ? greedy_joint_decode(scorer, enc.ctc_log_probs, decode)
                              : joint_beam_search(scorer, enc.ctc_log_probs, decode);
  d.hypothesis = best.tokens;
  d.edits = edit_distance(d.reference, d.hypothesis);
  return d;
}

EvalResult aggregate(std::vector<UtteranceDecode> decodes, double lambda_ctc, double gamma_mtl,
                     const std::string& split, std::size_t epoch) {
  if (decodes.empty()) throw InputError("evaluate: split '" + split + "' is empty");
  std::sort(decodes.begin(), decodes.end(),
            [](const auto& a, const auto& b) { return a.utt_id < b.utt_id; });

  EvalResult r;
  double ctc = 0.0, s2s = 0.0, mse = 0.0;
  std::size_t edits = 0, ref_tokens = 0;
  std::map<std::string, AccentTer> by_accent;
  for (const auto& d : decodes) {
    ctc += d.losses.l_ctc;
    s2s += d.losses.l_s2s;
    mse += d.losses.l_mse;
    edits += d.edits;
    ref_tokens += d.reference.size();
    auto& a = by_accent[d.accent];
    a.accent = d.accent;
    a.edits += d.edits;
    a.ref_tokens += d.reference.size();
  }
  if (ref_tokens == 0) throw InputError("evaluate: references are empty");
  const double n = static_cast<double>(decodes.size());
  const auto b = LossBreakdown::make(ctc / n, s2s / n, mse / n, lambda_ctc, gamma_mtl);
  r.row = MetricsRow{epoch, split, b.l_ctc, b.l_s2s, b.l_jca, b.l_mse, b.l_mtl,
                     static_cast<double>(edits) / static_cast<double>(ref_tokens)};
  for (auto& [name, a] : by_accent) {
    a.ter = static_cast<double>(a.edits) / static_cast<double>(a.ref_tokens);
    r.per_accent.push_back(a);
  }
  r.decodes = std::move(decodes);
  return r;
}

}  // namespace

std::string metrics_header() { return "epoch,split,l_ctc,l_s2s,l_jca,l_mse,l_mtl,ter"; }

std::string format_metrics_row(const MetricsRow& r) {
  return std::to_string(r.epoch) + "," + r.split + "," + fmt(r.l_ctc) + "," + fmt(r.l_s2s) +
         "," + fmt(r.l_jca) + "," + fmt(r.l_mse) + "," + fmt(r.l_mtl) + "," + fmt(r.ter);
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << metrics_header() << '\n';
  for (const auto& r : rows) out << format_metrics_row(r) << '\n';
}

FeatureSequence preprocess_features(const Checkpoint& ckpt, const FeatureSequence& raw) {
  switch (ckpt.cmvn) {
    case CmvnMode::kUtterance:
      return cmvn(raw);
    case CmvnMode::kGlobal:
      if (!ckpt.feature_stats) throw UsageError("global CMVN requested but no statistics stored");
      return apply_feature_stats(*ckpt.feature_stats, raw);
    case CmvnMode::kNone:
      break;
  }
  return raw;
}

AccentEmbedding preprocess_embedding(const Checkpoint& ckpt, const AccentEmbedding& raw) {
  return ckpt.normalize_embeddings ? unit_normalized(raw) : raw;
}

std::vector<PreparedUtterance> prepare_utterances(const Checkpoint& ckpt,
                                                  const std::vector<Utterance>& utts) {
  std::vector<PreparedUtterance> out;
  out.reserve(utts.size());
  for (const auto& u : utts) {
    PreparedUtterance p;
    p.utt_id = u.utt_id;
    p.accent = u.accent;
    p.features = preprocess_features(ckpt, u.features);
    p.tokens = u.tokens;
    p.z = preprocess_embedding(ckpt, u.embedding);
    if (ckpt.clusters && ckpt.mtl_targets)
      p.alpha_ref = make_reference_targets(*ckpt.clusters, p.z, *ckpt.mtl_targets);
    out.push_back(std::move(p));
  }
  return out;
}

UtteranceLosses utterance_losses(const Model& model, const PreparedUtterance& u) {
  const ForwardPass pass = model.forward(u.features, u.tokens, u.z);
  UtteranceLosses l;
  l.l_ctc = ctc_loss(pass.output.ctc_log_probs, u.tokens).loss;
  l.l_s2s = s2s_loss(pass.output.s2s_log_probs, s2s_targets(u.tokens)).loss;
  if (pass.alpha && u.alpha_ref) l.l_mse = coeff_mse(*u.alpha_ref, *pass.alpha).loss;
  return l;
}

EvalResult evaluate(const Model& model, const std::vector<PreparedUtterance>& utts,
                    const DecodeConfig& decode, double lambda_ctc, double gamma_mtl,
                    const std::string& split, std::size_t epoch) {
  decode.validate();
  std::vector<UtteranceDecode> decodes(utts.size());
  const long long n = static_cast<long long>(utts.size());
#pragma omp parallel for schedule(dynamic)
  for (long long i = 0; i < n; ++i) decodes[i] = decode_one(model, utts[i], decode);
  return aggregate(std::move(decodes), lambda_ctc, gamma_mtl, split, epoch);
}

namespace serial {
EvalResult evaluate(const Model& model, const std::vector<PreparedUtterance>& utts,
                    const DecodeConfig& decode, double lambda_ctc, double gamma_mtl,
                    const std::string& split, std::size_t epoch) {
  decode.validate();
  std::vector<UtteranceDecode> decodes;
  for (const auto& u : utts) decodes.push_back(decode_one(model, u, decode));
  return aggregate(std::move(decodes), lambda_ctc, gamma_mtl, split, epoch);
}
}  // namespace serial

void write_decodes_csv(const EvalResult& result, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "utt_id,accent,ref,hyp,edits\n";
  for (const auto& d : result.decodes)
    out << d.utt_id << ',' << d.accent << ',' << join_tokens(d.reference) << ','
        << join_tokens(d.hypothesis) << ',' << d.edits << '\n';
}

void write_accent_ter_csv(const EvalResult& result, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "accent,edits,ref_tokens,ter\n";
  std::size_t edits = 0, tokens = 0;
  for (const auto& a : result.per_accent) {
    out << a.accent << ',' << a.edits << ',' << a.ref_tokens << ',' << fmt(a.ter) << '\n';
    edits += a.edits;
    tokens += a.ref_tokens;
  }
  out << "all," << edits << ',' << tokens << ',' << fmt(result.row.ter) << '\n';
}

double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) throw InputError("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError("quantile level must lie in [0, 1]");
  const double pos = p * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return sorted[lo];
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::vector<CoefficientRow> compute_coefficients(const Model& model,
                                                 const std::vector<PreparedUtterance>& utts) {
  if (!model.has_bases())
    throw UsageError("adapter mode '" + to_string(model.adapter_spec().mode) +
                     "' produces no interpolation coefficients");
  std::vector<CoefficientRow> rows(utts.size());
  const long long n = static_cast<long long>(utts.size());
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < n; ++i)
    rows[i] = CoefficientRow{utts[i].utt_id, utts[i].accent,
                             predictor_forward(utts[i].z, *model.predictor)};
  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return a.utt_id < b.utt_id; });
  return rows;
}

std::vector<BasisSummary> summarize_coefficients(const std::vector<CoefficientRow>& rows) {
  std::map<std::string, std::vector<std::vector<double>>> by_accent;
  for (const auto& r : rows) {
    auto& cols = by_accent[r.accent];
    if (cols.empty()) cols.resize(r.alpha.size());
    if (cols.size() != r.alpha.size()) throw DimensionError("coefficient rows differ in size");
    for (std::size_t k = 0; k < r.alpha.size(); ++k) cols[k].push_back(r.alpha.values[k]);
  }
  std::vector<BasisSummary> out;
  for (auto& [accent, cols] : by_accent) {
    for (std::size_t k = 0; k < cols.size(); ++k) {
      auto& v = cols[k];
      std::sort(v.begin(), v.end());
      out.push_back(BasisSummary{accent, k, v.front(), quantile_sorted(v, 0.25),
                                 quantile_sorted(v, 0.5), quantile_sorted(v, 0.75), v.back()});
    }
  }
  return out;
}

std::size_t dominant_basis(const std::vector<BasisSummary>& summary, const std::string& accent) {
  const BasisSummary* best = nullptr;
  for (const auto& s : summary) {
    if (s.accent != accent) continue;
    if (best == nullptr || s.median > best->median) best = &s;
  }
  if (best == nullptr) throw InputError("no coefficients for accent '" + accent + "'");
  return best->basis;
}

void write_coefficients_csv(const std::vector<CoefficientRow>& rows,
                            const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "utt_id,accent";
  const std::size_t n = rows.empty() ? 0 : rows.front().alpha.size();
  for (std::size_t k = 0; k < n; ++k) out << ",alpha_" << k;
  out << '\n';
  for (const auto& r : rows) {
    out << r.utt_id << ',' << r.accent;
    for (double a : r.alpha.values) out << ',' << fmt(a);
    out << '\n';
  }
}

void write_summary_csv(const std::vector<BasisSummary>& summary,
                       const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "accent,basis,min,q1,median,q3,max\n";
  for (const auto& s : summary)
    out << s.accent << ',' << s.basis << ',' << fmt(s.min) << ',' << fmt(s.q1) << ','
        << fmt(s.median) << ',' << fmt(s.q3) << ',' << fmt(s.max) << '\n';
}

std::filesystem::path summary_path_for(const std::filesystem::path& coeff_path) {
  auto p = coeff_path;
  p.replace_extension();
  p += ".summary.csv";
  return p;
}

std::vector<BasisSummary> export_coefficients(const Checkpoint& ckpt,
                                              const std::vector<Utterance>& split,
                                              const std::filesystem::path& out_path) {
  const auto rows = compute_coefficients(ckpt.model, prepare_utterances(ckpt, split));
  auto summary = summarize_coefficients(rows);
  write_coefficients_csv(rows, out_path);
  write_summary_csv(summary, summary_path_for(out_path));
  return summary;
}

Corpus corpus_for(const Checkpoint& ckpt) {
  if (!ckpt.corpus_dir.empty()) return load_corpus(ckpt.corpus_dir);
  return generate_corpus(ckpt.corpus_spec);
}

}  // namespace accent
