#include "accent/attention.h"

#include <cmath>

#include "accent/errors.h"

namespace accent {
namespace {

Matrix column_block(const Matrix& m, std::size_t start, std::size_t count) {
  Matrix out(m.rows(), count);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = m(i, start + j);
  return out;
}

void add_column_block(Matrix& m, std::size_t start, const Matrix& block) {
  for (std::size_t i = 0; i < block.rows(); ++i)
    for (std::size_t j = 0; j < block.cols(); ++j) m(i, start + j) += block(i, j);
}

}  // namespace

MultiHeadAttention::MultiHeadAttention(const std::string& name, std::size_t d_model,
                                       std::size_t n_heads)
    : wq(name + ".q", d_model, d_model),
      wk(name + ".k", d_model, d_model, false),
      wv(name + ".v", d_model, d_model),
      wo(name + ".o", d_model, d_model),
      n_heads_(n_heads) {
  if (n_heads == 0 || d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by " +
                      std::to_string(n_heads) + " heads");
  }
}

LayerIO<MultiHeadAttention::Cache> MultiHeadAttention::forward(const Matrix& query_in,
                                                               const Matrix& kv_in,
                                                               bool causal) const {
  const std::size_t d = wq.in_dim();
  if (query_in.cols() != d || kv_in.cols() != d) {
    throw DimensionError("attention: inputs " + query_in.shape_string() + " and " +
                         kv_in.shape_string() + " must have " + std::to_string(d) +
                         " columns");
  }
  if (causal && query_in.rows() != kv_in.rows()) {
    throw DimensionError("attention: causal mask needs equal query and key lengths");
  }
  Cache cache;
  auto q = wq.forward(query_in);
  auto k = wk.forward(kv_in);
  auto v = wv.forward(kv_in);
  cache.q_in = std::move(q.cache);
  cache.k_in = std::move(k.cache);
  cache.v_in = std::move(v.cache);
  cache.q = std::move(q.output);
  cache.k = std::move(k.output);
  cache.v = std::move(v.output);

  const std::size_t dk = d / n_heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix concat(query_in.rows(), d);
  for (std::size_t h = 0; h < n_heads_; ++h) {
    const Matrix qh = column_block(cache.q, h * dk, dk);
    const Matrix kh = column_block(cache.k, h * dk, dk);
    const Matrix vh = column_block(cache.v, h * dk, dk);
    Matrix scores = matmul_nt(qh, kh) * scale;
    Matrix weights(scores.rows(), scores.cols());
    for (std::size_t i = 0; i < scores.rows(); ++i) {
      const std::size_t visible = causal ? i + 1 : scores.cols();
      double mx = scores(i, 0);
      for (std::size_t j = 1; j < visible; ++j) mx = std::max(mx, scores(i, j));
      double total = 0.0;
      for (std::size_t j = 0; j < visible; ++j) {
        weights(i, j) = std::exp(scores(i, j) - mx);
        total += weights(i, j);
      }
      for (std::size_t j = 0; j < visible; ++j) weights(i, j) /= total;
    }
    add_column_block(concat, h * dk, matmul(weights, vh));
    cache.weights.push_back(std::move(weights));
  }
  auto o = wo.forward(concat);
  cache.o_in = std::move(o.cache);
  return {std::move(o.output), std::move(cache)};
}

std::pair<Matrix, Matrix> MultiHeadAttention::backward(const Cache& cache,
                                                       const Matrix& grad_out) {
  const Matrix d_concat = wo.backward(cache.o_in, grad_out);
  const std::size_t d = wq.in_dim();
  const std::size_t dk = d / n_heads_;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Matrix dq(cache.q.rows(), d), dk_all(cache.k.rows(), d), dv(cache.v.rows(), d);
  for (std::size_t h = 0; h < n_heads_; ++h) {
    const Matrix& w = cache.weights[h];
    const Matrix qh = column_block(cache.q, h * dk, dk);
    const Matrix kh = column_block(cache.k, h * dk, dk);
    const Matrix vh = column_block(cache.v, h * dk, dk);
    const Matrix d_head = column_block(d_concat, h * dk, dk);
    const Matrix d_weights = matmul_nt(d_head, vh);
    add_column_block(dv, h * dk, matmul_tn(w, d_head));
    // Masked entries have zero weight, so the softmax Jacobian zeroes them.
    Matrix d_scores = row_softmax_backward(w, d_weights) * scale;
    add_column_block(dq, h * dk, matmul(d_scores, kh));
    add_column_block(dk_all, h * dk, matmul_tn(d_scores, qh));
  }
  Matrix d_query = wq.backward(cache.q_in, dq);
  Matrix d_kv = wk.backward(cache.k_in, dk_all);
  d_kv += wv.backward(cache.v_in, dv);
  return {std::move(d_query), std::move(d_kv)};
}

void MultiHeadAttention::for_each_param(const ParamVisitor& fn) {
  wq.for_each_param(fn);
  wk.for_each_param(fn);
  wv.for_each_param(fn);
  wo.for_each_param(fn);
}

LayerIO<MultiHeadAttention::Cache> mhsa_forward(const Matrix& x, const MultiHeadAttention& attn,
                                                bool causal_mask) {
  return attn.forward(x, x, causal_mask);
}

Matrix mhsa_backward(MultiHeadAttention& attn, const MultiHeadAttention::Cache& cache,
                     const Matrix& grad_out) {
  auto [dq, dkv] = attn.backward(cache, grad_out);
  return dq + dkv;
}

}  // namespace accent
