#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "accent/accents.h"
#include "accent/model.h"

namespace accent {

struct Utterance {
  std::string utt_id;
  std::string accent;
  FeatureSequence features;  // raw (distorted, noisy) frames
  std::vector<int> tokens;   // content tokens only
  AccentEmbedding embedding;
};

struct CorpusSpec {
  std::size_t n_accents = 4;
  std::size_t vocab_content = 6;
  std::size_t feat_dim = 8;
  std::size_t frames_per_token = 3;
  double noise_sigma = 0.05;
  double scale_min = 0.5, scale_max = 2.0;
  double shift_min = -1.0, shift_max = 1.0;
  std::size_t min_tokens = 2, max_tokens = 6;
  std::size_t train_size = 400, cv_size = 100, test_size = 100;
  std::size_t embed_dim = 256;
  double embed_spread = 0.3;
  /// Accent indices that appear only in the test split.
  std::vector<std::size_t> held_out;
  std::uint64_t seed = 1;

  void validate() const;
  /// Blank + eos + content tokens.
  std::size_t vocab_size() const { return vocab_content + 2; }
  friend bool operator==(const CorpusSpec&, const CorpusSpec&) = default;
};

/// Per-accent diagonal distortion applied to clean prototype frames.
struct AccentDistortion {
  std::vector<double> scale;
  std::vector<double> shift;
};

struct Corpus {
  CorpusSpec spec;
  std::vector<Matrix> token_prototypes;  // index = token id, rows 1 x feat_dim
  std::vector<AccentDistortion> distortions;
  std::vector<AccentEmbedding> accent_prototypes;
  std::vector<Utterance> train, cv, test;

  const std::vector<Utterance>& split(const std::string& name) const;
};

std::string accent_name(std::size_t index);

/// Deterministic in spec.seed. Tokens never repeat back to back, and every
/// utterance has frames_per_token frames per token.
Corpus generate_corpus(const CorpusSpec& spec);

/// Applies an accent's diagonal scale and shift to a 1 x feat_dim frame.
Matrix distort(const Corpus& corpus, const Matrix& frame, std::size_t accent);

enum class CmvnMode { kUtterance, kGlobal, kNone };
std::string to_string(CmvnMode m);
CmvnMode parse_cmvn_mode(const std::string& s);

/// Per-dimension mean/variance normalization over one utterance.
FeatureSequence cmvn(const FeatureSequence& features);

/// Per-dimension statistics pooled over many utterances.
struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

FeatureStats compute_feature_stats(const std::vector<Utterance>& utts);
FeatureSequence apply_feature_stats(const FeatureStats& stats, const FeatureSequence& features);

/// JSON lines: {"utt_id","accent","tokens":[...],"features":[[...],...]}.
void save_split(const std::vector<Utterance>& utts, const std::filesystem::path& path);
/// Embeddings are attached from `embeddings` by utt_id.
std::vector<Utterance> load_split(const std::filesystem::path& path,
                                  const EmbeddingTable& embeddings);

/// Writes train/cv/test .jsonl and embeddings.csv into `dir`.
void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
/// Reads the splits written by save_corpus; generator metadata stays empty.
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace accent
