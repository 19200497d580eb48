#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "accent/checkpoint.h"
#include "accent/decode.h"

namespace accent {

struct MetricsRow {
  std::size_t epoch = 0;
  std::string split;
  double l_ctc = 0.0;
  double l_s2s = 0.0;
  double l_jca = 0.0;
  double l_mse = 0.0;
  double l_mtl = 0.0;
  double ter = 0.0;
};

std::string metrics_header();
/// One CSV line (no newline), doubles in 17 significant digits.
std::string format_metrics_row(const MetricsRow& row);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

/// An utterance after the checkpoint's preprocessing: normalized features,
/// possibly unit-normalized embedding, and its reference coefficients.
struct PreparedUtterance {
  std::string utt_id;
  std::string accent;
  FeatureSequence features;
  std::vector<int> tokens;
  AccentEmbedding z;
  std::optional<CoefficientVector> alpha_ref;
};

FeatureSequence preprocess_features(const Checkpoint& ckpt, const FeatureSequence& raw);
AccentEmbedding preprocess_embedding(const Checkpoint& ckpt, const AccentEmbedding& raw);
/// Reference targets are attached when the checkpoint has clusters and MTL targets.
std::vector<PreparedUtterance> prepare_utterances(const Checkpoint& ckpt,
                                                  const std::vector<Utterance>& utts);

struct UtteranceLosses {
  double l_ctc = 0.0;
  double l_s2s = 0.0;
  double l_mse = 0.0;
};

/// Teacher-forced losses of one utterance. l_mse is zero unless both the
/// model predicts coefficients and the utterance carries a reference.
UtteranceLosses utterance_losses(const Model& model, const PreparedUtterance& u);

struct UtteranceDecode {
  std::string utt_id;
  std::string accent;
  std::vector<int> reference;
  std::vector<int> hypothesis;
  std::size_t edits = 0;
  UtteranceLosses losses;
  std::optional<CoefficientVector> alpha;
};

struct AccentTer {
  std::string accent;
  std::size_t edits = 0;
  std::size_t ref_tokens = 0;
  double ter = 0.0;
};

struct EvalResult {
  MetricsRow row;
  std::vector<UtteranceDecode> decodes;  // ascending utt_id
  std::vector<AccentTer> per_accent;     // ascending accent name
};

/// Mean teacher-forced losses and corpus-level TER (total edits over total
/// reference tokens) with joint beam decoding. Fans out per utterance.
EvalResult evaluate(const Model& model, const std::vector<PreparedUtterance>& utts,
                    const DecodeConfig& decode, double lambda_ctc, double gamma_mtl,
                    const std::string& split, std::size_t epoch = 0);

namespace serial {
EvalResult evaluate(const Model& model, const std::vector<PreparedUtterance>& utts,
                    const DecodeConfig& decode, double lambda_ctc, double gamma_mtl,
                    const std::string& split, std::size_t epoch = 0);
}

/// CSV with columns utt_id,accent,ref,hyp,edits; tokens space separated.
void write_decodes_csv(const EvalResult& result, const std::filesystem::path& path);
/// CSV with columns accent,edits,ref_tokens,ter plus an "all" row.
void write_accent_ter_csv(const EvalResult& result, const std::filesystem::path& path);

struct CoefficientRow {
  std::string utt_id;
  std::string accent;
  CoefficientVector alpha;
};

struct BasisSummary {
  std::string accent;
  std::size_t basis = 0;
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

/// Linear-interpolation quantile of sorted values (the position
/// p * (n - 1) between order statistics).
double quantile_sorted(const std::vector<double>& sorted, double p);

/// Throws UsageError when the model has no coefficient predictor.
std::vector<CoefficientRow> compute_coefficients(const Model& model,
                                                 const std::vector<PreparedUtterance>& utts);
/// Per accent (ascending) and basis: min, q1, median, q3, max of alpha_k.
std::vector<BasisSummary> summarize_coefficients(const std::vector<CoefficientRow>& rows);
/// Basis with the largest median for `accent`; ties go to the lower index.
std::size_t dominant_basis(const std::vector<BasisSummary>& summary, const std::string& accent);

void write_coefficients_csv(const std::vector<CoefficientRow>& rows,
                            const std::filesystem::path& path);
void write_summary_csv(const std::vector<BasisSummary>& summary,
                       const std::filesystem::path& path);
/// Summary path written next to a coefficient CSV: "<stem>.summary.csv".
std::filesystem::path summary_path_for(const std::filesystem::path& coeff_path);

/// Writes the coefficient CSV and its summary; returns the summary.
std::vector<BasisSummary> export_coefficients(const Checkpoint& ckpt,
                                              const std::vector<Utterance>& split,
                                              const std::filesystem::path& out_path);

/// Corpus named by the checkpoint: loaded from corpus_dir, else regenerated.
Corpus corpus_for(const Checkpoint& ckpt);

}  // namespace accent
