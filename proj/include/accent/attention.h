#pragma once

#include <utility>
#include <vector>

#include "accent/layers.h"

namespace accent {

/// Multi-head scaled dot-product attention with input/output projections.
/// Keys carry no bias: a shared key offset moves all of a query's scores
/// equally and cancels in the softmax.
class MultiHeadAttention {
 public:
  struct Cache {
    LinearCache q_in, k_in, v_in, o_in;
    Matrix q, k, v;
    std::vector<Matrix> weights;  // one Tq x Tk matrix per head
  };

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, std::size_t d_model, std::size_t n_heads);

  /// Queries from `query_in`, keys and values from `kv_in`. With `causal`,
  /// query t attends only to keys <= t.
  LayerIO<Cache> forward(const Matrix& query_in, const Matrix& kv_in, bool causal) const;
  /// Returns (grad wrt query_in, grad wrt kv_in).
  std::pair<Matrix, Matrix> backward(const Cache& cache, const Matrix& grad_out);

  void for_each_param(const ParamVisitor& fn);
  std::size_t heads() const { return n_heads_; }

  Linear wq, wk, wv, wo;

 private:
  std::size_t n_heads_ = 1;
};

LayerIO<MultiHeadAttention::Cache> mhsa_forward(const Matrix& x, const MultiHeadAttention& attn,
                                                bool causal_mask);
Matrix mhsa_backward(MultiHeadAttention& attn, const MultiHeadAttention::Cache& cache,
                     const Matrix& grad_out);

}  // namespace accent
