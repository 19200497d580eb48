#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "accent/layers.h"

namespace accent {

/// Utterance-level accent conditioning vector z.
struct AccentEmbedding {
  std::vector<double> values;

  std::size_t dim() const { return values.size(); }
  Matrix as_row() const { return Matrix::row_vector(values); }
  friend bool operator==(const AccentEmbedding&, const AccentEmbedding&) = default;
};

/// Simplex vector of basis interpolation weights.
struct CoefficientVector {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  /// Entries nonnegative and summing to one within `tol`.
  bool is_valid(double tol = 1e-9) const;
  Matrix as_row() const { return Matrix::row_vector(values); }
};

enum class AdapterMode { kNone, kGated, kMulti, kCombined };
enum class Connection { kScalingOnly, kShiftingOnly, kBoth };

std::string to_string(AdapterMode m);
std::string to_string(Connection c);
AdapterMode parse_adapter_mode(const std::string& s);
Connection parse_connection(const std::string& s);

struct AdapterSpec {
  AdapterMode mode = AdapterMode::kNone;
  std::vector<int> positions{1};  // 1-based encoder block indices
  std::size_t n_bases = 4;
  Connection connection = Connection::kBoth;
  std::size_t bottleneck = 0;  // 0 selects max(4, d_model / 4)
  std::size_t embed_dim = 256;
  std::vector<std::size_t> predictor_hidden{32};

  bool uses_bases() const { return mode == AdapterMode::kMulti || mode == AdapterMode::kCombined; }
  bool uses_gate() const { return mode == AdapterMode::kGated || mode == AdapterMode::kCombined; }
  std::size_t resolved_bottleneck(std::size_t d_model) const;
  bool at(int block) const;
  void validate(std::size_t enc_layers) const;
};

/// A_g(h, z) = tanh(z W_f + b_f) * h + tanh(z W_g + b_g), both gates
/// broadcast over frames.
class GatedAdapter {
 public:
  struct Cache {
    LinearCache f_in, g_in;
    ActivationCache f_act, g_act;
    Matrix h;
  };

  GatedAdapter() = default;
  GatedAdapter(const std::string& name, std::size_t d_model, std::size_t embed_dim);

  LayerIO<Cache> forward(const Matrix& h, const AccentEmbedding& z) const;
  Matrix backward(const Cache& cache, const Matrix& grad_out);
  void for_each_param(const ParamVisitor& fn);

  Linear scale;
  Linear shift;
};

LayerIO<GatedAdapter::Cache> gated_forward(const Matrix& h, const AccentEmbedding& z,
                                           const GatedAdapter& params);

/// Sandglass projection: LN -> down -> ReLU -> up.
class Projection {
 public:
  struct Cache {
    LayerNorm::Cache norm;
    LinearCache down;
    ActivationCache act;
    LinearCache up;
  };

  Projection() = default;
  Projection(const std::string& name, std::size_t d_model, std::size_t bottleneck);

  LayerIO<Cache> forward(const Matrix& h) const;
  Matrix backward(const Cache& cache, const Matrix& grad_out);
  void for_each_param(const ParamVisitor& fn);

  LayerNorm norm;
  Linear down;
  Linear up;
};

LayerIO<Projection::Cache> projection_forward(const Matrix& h, const Projection& params);

/// B_k(h) = F_k(h) * h + G_k(h); the connection mode drops F or G entirely.
class Basis {
 public:
  struct Cache {
    std::optional<Projection::Cache> scale, shift;
    Matrix h;
    Matrix scale_out;
  };

  Basis() = default;
  Basis(const std::string& name, std::size_t d_model, std::size_t bottleneck,
        Connection connection);

  LayerIO<Cache> forward(const Matrix& h) const;
  Matrix backward(const Cache& cache, const Matrix& grad_out);
  void for_each_param(const ParamVisitor& fn);
  Connection connection() const { return connection_; }

  std::optional<Projection> scale;  // F_k
  std::optional<Projection> shift;  // G_k

 private:
  Connection connection_ = Connection::kBoth;
};

LayerIO<Basis::Cache> basis_forward(const Matrix& h, const Basis& params);

/// alpha = softmax(p(z)) with p a ReLU MLP ending in n_bases logits.
class Predictor {
 public:
  struct Cache {
    std::vector<LinearCache> linear;
    std::vector<ActivationCache> act;
    Matrix alpha;
  };

  Predictor() = default;
  Predictor(const std::string& name, std::size_t embed_dim,
            const std::vector<std::size_t>& hidden, std::size_t n_bases);

  LayerIO<Cache> forward(const AccentEmbedding& z) const;
  /// grad_alpha is 1 x n_bases.
  void backward(const Cache& cache, const Matrix& grad_alpha);
  void for_each_param(const ParamVisitor& fn);
  std::size_t n_bases() const { return layers.back().out_dim(); }
  std::size_t embed_dim() const { return layers.front().in_dim(); }

  std::vector<Linear> layers;
};

CoefficientVector predictor_forward(const AccentEmbedding& z, const Predictor& params);

/// A_m(h) = sum_k alpha_k B_k(h) for an externally supplied alpha.
class MultiBasisAdapter {
 public:
  struct Cache {
    std::vector<Basis::Cache> bases;
    std::vector<Matrix> outputs;
    std::vector<double> alpha;
  };

  MultiBasisAdapter() = default;
  MultiBasisAdapter(const std::string& name, std::size_t d_model, std::size_t bottleneck,
                    std::size_t n_bases, Connection connection);

  LayerIO<Cache> forward(const Matrix& h, const CoefficientVector& alpha) const;
  /// Adds d loss / d alpha into grad_alpha (1 x n) and returns d loss / d h.
  Matrix backward(const Cache& cache, const Matrix& grad_out, Matrix& grad_alpha);
  void for_each_param(const ParamVisitor& fn);

  std::vector<Basis> bases;
};

std::pair<LayerIO<MultiBasisAdapter::Cache>, CoefficientVector> multi_basis_forward(
    const Matrix& h, const AccentEmbedding& z, const Predictor& predictor,
    const MultiBasisAdapter& adapter);

/// The adapter injected in front of one encoder block. Returns the
/// contribution A(h, z); the block adds h back.
class AdapterLayer {
 public:
  struct Cache {
    std::optional<GatedAdapter::Cache> gated;
    std::optional<MultiBasisAdapter::Cache> multi;
  };

  AdapterLayer() = default;
  AdapterLayer(const std::string& name, const AdapterSpec& spec, std::size_t d_model);

  /// `alpha` is required for modes with bases and ignored otherwise.
  LayerIO<Cache> forward(const Matrix& h, const AccentEmbedding& z,
                         const CoefficientVector* alpha) const;
  Matrix backward(const Cache& cache, const Matrix& grad_out, Matrix& grad_alpha);
  void for_each_param(const ParamVisitor& fn);

  AdapterMode mode = AdapterMode::kNone;
  std::optional<GatedAdapter> gated;
  std::optional<MultiBasisAdapter> multi;
};

/// A_m(h + A_g(h, z), z); returns the contribution and the alpha used.
std::pair<LayerIO<AdapterLayer::Cache>, CoefficientVector> combined_forward(
    const Matrix& h, const AccentEmbedding& z, const Predictor& predictor,
    const AdapterLayer& layer);

/// Random down-projections, zero up-projections and gates.
void init_adapter(AdapterLayer& layer, Rng& rng);
void init_predictor(Predictor& predictor, Rng& rng);

}  // namespace accent
