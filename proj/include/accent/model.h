#pragma once

#include <optional>
#include <span>
#include <vector>

#include "accent/adapters.h"
#include "accent/attention.h"
#include "accent/layers.h"

namespace accent {

inline constexpr int kBlank = 0;
inline constexpr int kEos = 1;

struct ModelConfig {
  std::size_t feat_dim = 8;
  std::size_t d_model = 16;
  std::size_t n_heads = 2;
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 2;
  std::size_t ffn_dim = 32;
  std::size_t vocab_size = 8;  // blank + eos + content tokens
  std::size_t max_len = 8;
  bool positional_encoding = true;

  void validate() const;
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Utterance features, one frame per row.
using FeatureSequence = Matrix;

struct EncoderState {
  std::vector<Matrix> block_inputs;  // h^i before any adapter
  Matrix final;                      // normalized encoder output h
};

struct ModelOutput {
  Matrix ctc_log_probs;  // T x V
  Matrix s2s_log_probs;  // (L+1) x V: rows score targets[0..L-1], then eos
};

/// Pre-norm encoder block: x + MHSA(LN(x)), then + FFN(LN(.)).
class EncoderBlock {
 public:
  struct Cache {
    std::optional<AdapterLayer::Cache> adapter;
    LayerNorm::Cache ln1;
    MultiHeadAttention::Cache attn;
    LayerNorm::Cache ln2;
    FeedForward::Cache ffn;
  };

  EncoderBlock() = default;
  EncoderBlock(const std::string& name, const ModelConfig& cfg);

  /// With an adapter the block consumes h + A(h, z) instead of h.
  LayerIO<Cache> forward(const Matrix& h_in, const AdapterLayer* adapter,
                         const AccentEmbedding& z, const CoefficientVector* alpha) const;
  Matrix backward(const Cache& cache, const Matrix& grad_out, AdapterLayer* adapter,
                  Matrix& grad_alpha);
  void for_each_param(const ParamVisitor& fn);

  LayerNorm ln1;
  MultiHeadAttention attn;
  LayerNorm ln2;
  FeedForward ffn;
};

LayerIO<EncoderBlock::Cache> encoder_block_forward(const Matrix& h_in, const EncoderBlock& block,
                                                   const AdapterLayer* adapter,
                                                   const AccentEmbedding& z,
                                                   const CoefficientVector* alpha);

/// Pre-norm decoder block with causal self-attention and cross-attention.
class DecoderBlock {
 public:
  struct Cache {
    LayerNorm::Cache ln1;
    MultiHeadAttention::Cache self_attn;
    LayerNorm::Cache ln2;
    MultiHeadAttention::Cache cross_attn;
    LayerNorm::Cache ln3;
    FeedForward::Cache ffn;
  };

  DecoderBlock() = default;
  DecoderBlock(const std::string& name, const ModelConfig& cfg);

  LayerIO<Cache> forward(const Matrix& x, const Matrix& memory) const;
  /// Returns grad wrt x and adds grad wrt memory into grad_memory.
  Matrix backward(const Cache& cache, const Matrix& grad_out, Matrix& grad_memory);
  void for_each_param(const ParamVisitor& fn);

  LayerNorm ln1;
  MultiHeadAttention self_attn;
  LayerNorm ln2;
  MultiHeadAttention cross_attn;
  LayerNorm ln3;
  FeedForward ffn;
};

class Model;

struct ForwardPass {
  ModelOutput output;
  EncoderState encoder;
  std::optional<CoefficientVector> alpha;

  struct Cache {
    LinearCache input;
    std::vector<EncoderBlock::Cache> enc;
    LayerNorm::Cache enc_norm;
    LinearCache ctc;
    std::optional<Predictor::Cache> predictor;
    std::vector<int> dec_input;
    std::vector<DecoderBlock::Cache> dec;
    LayerNorm::Cache dec_norm;
    LinearCache out;
  } cache;
};

struct Encoded {
  Matrix memory;         // EncoderState::final
  Matrix ctc_log_probs;  // T x V
  std::optional<CoefficientVector> alpha;
};

Matrix sinusoidal_encoding(std::size_t length, std::size_t dim);

/// Transformer encoder-decoder with a CTC head and optional per-block
/// adapters sharing one coefficient predictor.
class Model {
 public:
  Model() = default;
  Model(const ModelConfig& cfg, const AdapterSpec& adapter_spec);

  const ModelConfig& config() const { return cfg_; }
  const AdapterSpec& adapter_spec() const { return adapter_spec_; }

  /// Random baseline weights; adapters keep their identity initialization.
  void init_baseline(Rng& rng);
  /// Replaces the adapter set with freshly initialized adapters.
  void attach_adapters(const AdapterSpec& spec, Rng& rng);

  ForwardPass forward(const FeatureSequence& features, std::span<const int> targets,
                      const AccentEmbedding& z) const;
  /// Accumulates parameter gradients from loss gradients wrt both
  /// log-prob matrices and an optional extra alpha gradient (1 x n).
  void backward(const ForwardPass& pass, const Matrix& grad_ctc, const Matrix& grad_s2s,
                const Matrix* grad_alpha_extra);

  Encoded encode(const FeatureSequence& features, const AccentEmbedding& z) const;
  /// Log-probabilities of the token following `prefix` (content tokens).
  std::vector<double> next_token_log_probs(const Matrix& memory,
                                           std::span<const int> prefix) const;

  void for_each_param(const ParamVisitor& fn);
  std::vector<Parameter*> parameters();
  /// Parameters belonging to adapters or the predictor.
  std::vector<Parameter*> adapter_parameters();
  void zero_grad();
  bool has_bases() const { return predictor.has_value(); }

  Linear input;
  std::vector<EncoderBlock> encoder;
  LayerNorm enc_norm;
  Linear ctc_head;
  Parameter embedding;
  std::vector<DecoderBlock> decoder;
  LayerNorm dec_norm;
  Linear output;
  std::vector<std::optional<AdapterLayer>> adapters;
  std::optional<Predictor> predictor;

 private:
  Matrix decode_states(const Matrix& memory, std::span<const int> dec_input,
                       std::vector<DecoderBlock::Cache>* caches) const;
  void check_inputs(const FeatureSequence& features, const AccentEmbedding& z) const;

  ModelConfig cfg_;
  AdapterSpec adapter_spec_;
};

std::pair<ModelOutput, EncoderState> model_forward(const FeatureSequence& features,
                                                   std::span<const int> targets,
                                                   const AccentEmbedding& z,
                                                   const Model& model);

}  // namespace accent
