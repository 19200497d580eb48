#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "accent/matrix.h"

namespace accent {

using Rng = std::mt19937_64;

/// A trainable tensor with its gradient accumulator. Backward passes add
/// into `grad` only while `trainable` is set, so frozen parameters keep an
/// exactly-zero accumulator.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, std::size_t rows, std::size_t cols, double fill = 0.0)
      : name(std::move(n)), value(rows, cols, fill), grad(rows, cols) {}

  void zero_grad() { grad.fill(0.0); }
  void accumulate(const Matrix& g) {
    if (trainable) grad += g;
  }
};

using ParamVisitor = std::function<void(Parameter&)>;

/// Forward result plus whatever the matching backward needs.
template <class Cache>
struct LayerIO {
  Matrix output;
  Cache cache;
};

void init_uniform(Parameter& p, double scale, Rng& rng);
/// Uniform in +-sqrt(6/(fan_in+fan_out)).
void init_xavier(Parameter& p, Rng& rng);

struct LinearCache {
  Matrix input;
};

/// y = x W + b with W: in x out, b: 1 x out. Without a bias, b is an
/// empty placeholder that is never visited.
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, bool with_bias = true);

  LayerIO<LinearCache> forward(const Matrix& x) const;
  Matrix apply(const Matrix& x) const;
  Matrix backward(const LinearCache& cache, const Matrix& grad_out);

  void for_each_param(const ParamVisitor& fn);
  std::size_t in_dim() const { return weight.value.rows(); }
  std::size_t out_dim() const { return weight.value.cols(); }
  bool has_bias() const { return !bias.value.empty(); }

  Parameter weight;
  Parameter bias;
};

/// Population-variance layer normalization over the columns of each row.
class LayerNorm {
 public:
  static constexpr double kEpsilon = 1e-8;

  struct Cache {
    Matrix normalized;
    std::vector<double> inv_std;
  };

  LayerNorm() = default;
  LayerNorm(const std::string& name, std::size_t dim);

  LayerIO<Cache> forward(const Matrix& x) const;
  Matrix backward(const Cache& cache, const Matrix& grad_out);
  void for_each_param(const ParamVisitor& fn);

  Parameter gain;
  Parameter bias;
};

LayerIO<LayerNorm::Cache> layer_norm_forward(const Matrix& x, const Parameter& gain,
                                             const Parameter& bias);

enum class Activation { kTanh, kRelu };

struct ActivationCache {
  Activation kind;
  Matrix input;
  Matrix output;
};

LayerIO<ActivationCache> activation_forward(const Matrix& x, Activation kind);
Matrix activation_backward(const ActivationCache& cache, const Matrix& grad_out);

/// Position-wise Linear -> ReLU -> Linear.
class FeedForward {
 public:
  struct Cache {
    LinearCache in;
    ActivationCache act;
    LinearCache out;
  };

  FeedForward() = default;
  FeedForward(const std::string& name, std::size_t dim, std::size_t hidden);

  LayerIO<Cache> forward(const Matrix& x) const;
  Matrix backward(const Cache& cache, const Matrix& grad_out);
  void for_each_param(const ParamVisitor& fn);

  Linear in;
  Linear out;
};

}  // namespace accent
