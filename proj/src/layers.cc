#include "accent/layers.h"

#include <cmath>

#include "accent/errors.h"

namespace accent {

void init_uniform(Parameter& p, double scale, Rng& rng) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (double& v : p.value.data()) v = dist(rng);
}

void init_xavier(Parameter& p, Rng& rng) {
  const double fan = static_cast<double>(p.value.rows() + p.value.cols());
  init_uniform(p, std::sqrt(6.0 / fan), rng);
}

Linear::Linear(const std::string& name, std::size_t in, std::size_t out, bool with_bias)
    : weight(name + ".weight", in, out) {
  if (with_bias) bias = Parameter(name + ".bias", 1, out);
}

LayerIO<LinearCache> Linear::forward(const Matrix& x) const {
  return {apply(x), LinearCache{x}};
}

Matrix Linear::apply(const Matrix& x) const {
  if (x.cols() != weight.value.rows()) {
    throw DimensionError(weight.name + ": input " + x.shape_string() +
                         " does not match weight " + weight.value.shape_string());
  }
  Matrix y = matmul(x, weight.value);
  return has_bias() ? add_row_broadcast(std::move(y), bias.value) : y;
}

Matrix Linear::backward(const LinearCache& cache, const Matrix& grad_out) {
  if (weight.trainable) weight.grad += matmul_tn(cache.input, grad_out);
  if (has_bias() && bias.trainable) bias.grad += column_sums(grad_out);
  return matmul_nt(grad_out, weight.value);
}

void Linear::for_each_param(const ParamVisitor& fn) {
  fn(weight);
  if (has_bias()) fn(bias);
}

LayerNorm::LayerNorm(const std::string& name, std::size_t dim)
    : gain(name + ".gain", 1, dim, 1.0), bias(name + ".bias", 1, dim) {}

LayerIO<LayerNorm::Cache> layer_norm_forward(const Matrix& x, const Parameter& gain,
                                             const Parameter& bias) {
  if (gain.value.rows() != 1 || gain.value.cols() != x.cols() ||
      !bias.value.same_shape(gain.value)) {
    throw DimensionError("layer_norm: input " + x.shape_string() + " vs gain " +
                         gain.value.shape_string());
  }
  const std::size_t d = x.cols();
  LayerNorm::Cache cache{Matrix(x.rows(), d), std::vector<double>(x.rows())};
  Matrix out(x.rows(), d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (double v : x.row(i)) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x.row(i)) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv_std = 1.0 / std::sqrt(var + LayerNorm::kEpsilon);
    cache.inv_std[i] = inv_std;
    for (std::size_t j = 0; j < d; ++j) {
      const double n = (x(i, j) - mean) * inv_std;
      cache.normalized(i, j) = n;
      out(i, j) = n * gain.value(0, j) + bias.value(0, j);
    }
  }
  return {std::move(out), std::move(cache)};
}

LayerIO<LayerNorm::Cache> LayerNorm::forward(const Matrix& x) const {
  return layer_norm_forward(x, gain, bias);
}

Matrix LayerNorm::backward(const Cache& cache, const Matrix& grad_out) {
  const Matrix& xhat = cache.normalized;
  const std::size_t d = xhat.cols();
  if (gain.trainable) gain.grad += column_sums(hadamard(grad_out, xhat));
  if (bias.trainable) bias.grad += column_sums(grad_out);

  Matrix dx(xhat.rows(), d);
  for (std::size_t i = 0; i < xhat.rows(); ++i) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double g = grad_out(i, j) * gain.value(0, j);
      sum_g += g;
      sum_gx += g * xhat(i, j);
    }
    const double scale = cache.inv_std[i] / static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double g = grad_out(i, j) * gain.value(0, j);
      dx(i, j) = scale * (static_cast<double>(d) * g - sum_g - xhat(i, j) * sum_gx);
    }
  }
  return dx;
}

void LayerNorm::for_each_param(const ParamVisitor& fn) {
  fn(gain);
  fn(bias);
}

LayerIO<ActivationCache> activation_forward(const Matrix& x, Activation kind) {
  Matrix out = x;
  for (double& v : out.data()) v = kind == Activation::kTanh ? std::tanh(v) : (v > 0.0 ? v : 0.0);
  return {out, ActivationCache{kind, x, out}};
}

Matrix activation_backward(const ActivationCache& cache, const Matrix& grad_out) {
  Matrix g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (cache.kind == Activation::kTanh) {
      const double y = cache.output.data()[i];
      g.data()[i] *= 1.0 - y * y;
    } else if (cache.input.data()[i] <= 0.0) {
      g.data()[i] = 0.0;
    }
  }
  return g;
}

FeedForward::FeedForward(const std::string& name, std::size_t dim, std::size_t hidden)
    : in(name + ".in", dim, hidden), out(name + ".out", hidden, dim) {}

LayerIO<FeedForward::Cache> FeedForward::forward(const Matrix& x) const {
  auto a = in.forward(x);
  auto r = activation_forward(a.output, Activation::kRelu);
  auto b = out.forward(r.output);
  return {std::move(b.output), Cache{std::move(a.cache), std::move(r.cache), std::move(b.cache)}};
}

Matrix FeedForward::backward(const Cache& cache, const Matrix& grad_out) {
  Matrix g = out.backward(cache.out, grad_out);
  g = activation_backward(cache.act, g);
  return in.backward(cache.in, g);
}

void FeedForward::for_each_param(const ParamVisitor& fn) {
  in.for_each_param(fn);
  out.for_each_param(fn);
}

}  // namespace accent
