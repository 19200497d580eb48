#include "accent/adapters.h"

#include <algorithm>
#include <cmath>

#include "accent/errors.h"

namespace accent {

bool CoefficientVector::is_valid(double tol) const {
  if (values.empty()) return false;
  double total = 0.0;
  for (double v : values) {
    if (!(v >= 0.0) || !std::isfinite(v)) return false;
    total += v;
  }
  return std::abs(total - 1.0) <= tol;
}

std::string to_string(AdapterMode m) {
  switch (m) {
    case AdapterMode::kNone: return "none";
    case AdapterMode::kGated: return "gated";
    case AdapterMode::kMulti: return "multi";
    case AdapterMode::kCombined: return "combined";
  }
  return "none";
}

std::string to_string(Connection c) {
  switch (c) {
    case Connection::kScalingOnly: return "scaling_only";
    case Connection::kShiftingOnly: return "shifting_only";
    case Connection::kBoth: return "both";
  }
  return "both";
}

AdapterMode parse_adapter_mode(const std::string& s) {
  if (s == "none") return AdapterMode::kNone;
  if (s == "gated") return AdapterMode::kGated;
  if (s == "multi") return AdapterMode::kMulti;
  if (s == "combined") return AdapterMode::kCombined;
  throw ConfigError("unknown adapter mode '" + s + "'");
}

Connection parse_connection(const std::string& s) {
  if (s == "scaling_only") return Connection::kScalingOnly;
  if (s == "shifting_only") return Connection::kShiftingOnly;
  if (s == "both") return Connection::kBoth;
  throw ConfigError("unknown connection mode '" + s + "'");
}

std::size_t AdapterSpec::resolved_bottleneck(std::size_t d_model) const {
  return bottleneck > 0 ? bottleneck : std::max<std::size_t>(4, d_model / 4);
}

bool AdapterSpec::at(int block) const {
  return mode != AdapterMode::kNone &&
         std::find(positions.begin(), positions.end(), block) != positions.end();
}

void AdapterSpec::validate(std::size_t enc_layers) const {
  if (mode == AdapterMode::kNone) return;
  if (positions.empty()) throw ConfigError("adapter positions must not be empty");
  for (int p : positions) {
    if (p < 1 || static_cast<std::size_t>(p) > enc_layers) {
      throw ConfigError("adapter position " + std::to_string(p) + " outside 1.." +
                        std::to_string(enc_layers));
    }
  }
  if (n_bases < 1) throw ConfigError("n_bases must be >= 1");
  if (embed_dim < 1) throw ConfigError("embed_dim must be >= 1");
}

// ---------------------------------------------------------------- gated

GatedAdapter::GatedAdapter(const std::string& name, std::size_t d_model, std::size_t embed_dim)
    : scale(name + ".f", embed_dim, d_model), shift(name + ".g", embed_dim, d_model) {}

LayerIO<GatedAdapter::Cache> GatedAdapter::forward(const Matrix& h,
                                                   const AccentEmbedding& z) const {
  if (z.dim() != scale.in_dim()) {
    throw ConfigError("gated adapter expects embedding dim " + std::to_string(scale.in_dim()) +
                      ", got " + std::to_string(z.dim()));
  }
  if (h.cols() != scale.out_dim()) {
    throw DimensionError("gated adapter: input " + h.shape_string() + " vs d_model " +
                         std::to_string(scale.out_dim()));
  }
  const Matrix zr = z.as_row();
  auto f_lin = scale.forward(zr);
  auto g_lin = shift.forward(zr);
  auto f = activation_forward(f_lin.output, Activation::kTanh);
  auto g = activation_forward(g_lin.output, Activation::kTanh);
  Matrix out = add_row_broadcast(mul_row_broadcast(h, f.output), g.output);
  return {std::move(out), Cache{std::move(f_lin.cache), std::move(g_lin.cache),
                                std::move(f.cache), std::move(g.cache), h}};
}

Matrix GatedAdapter::backward(const Cache& cache, const Matrix& grad_out) {
  const Matrix df = column_sums(hadamard(grad_out, cache.h));
  const Matrix dg = column_sums(grad_out);
  scale.backward(cache.f_in, activation_backward(cache.f_act, df));
  shift.backward(cache.g_in, activation_backward(cache.g_act, dg));
  return mul_row_broadcast(grad_out, cache.f_act.output);
}

void GatedAdapter::for_each_param(const ParamVisitor& fn) {
  scale.for_each_param(fn);
  shift.for_each_param(fn);
}

LayerIO<GatedAdapter::Cache> gated_forward(const Matrix& h, const AccentEmbedding& z,
                                           const GatedAdapter& params) {
  return params.forward(h, z);
}

// ----------------------------------------------------------- projection

Projection::Projection(const std::string& name, std::size_t d_model, std::size_t bottleneck)
    : norm(name + ".norm", d_model),
      down(name + ".down", d_model, bottleneck),
      up(name + ".up", bottleneck, d_model) {}

LayerIO<Projection::Cache> Projection::forward(const Matrix& h) const {
  auto n = norm.forward(h);
  auto d = down.forward(n.output);
  auto a = activation_forward(d.output, Activation::kRelu);
  auto u = up.forward(a.output);
  return {std::move(u.output),
          Cache{std::move(n.cache), std::move(d.cache), std::move(a.cache), std::move(u.cache)}};
}

Matrix Projection::backward(const Cache& cache, const Matrix& grad_out) {
  Matrix g = up.backward(cache.up, grad_out);
  g = activation_backward(cache.act, g);
  g = down.backward(cache.down, g);
  return norm.backward(cache.norm, g);
}

void Projection::for_each_param(const ParamVisitor& fn) {
  norm.for_each_param(fn);
  down.for_each_param(fn);
  up.for_each_param(fn);
}

LayerIO<Projection::Cache> projection_forward(const Matrix& h, const Projection& params) {
  return params.forward(h);
}

// ---------------------------------------------------------------- basis

Basis::Basis(const std::string& name, std::size_t d_model, std::size_t bottleneck,
             Connection connection)
    : connection_(connection) {
  if (connection != Connection::kShiftingOnly) scale.emplace(name + ".F", d_model, bottleneck);
  if (connection != Connection::kScalingOnly) shift.emplace(name + ".G", d_model, bottleneck);
}

LayerIO<Basis::Cache> Basis::forward(const Matrix& h) const {
  Cache cache;
  cache.h = h;
  Matrix out;
  if (scale) {
    auto f = scale->forward(h);
    out = hadamard(f.output, h);
    cache.scale_out = std::move(f.output);
    cache.scale = std::move(f.cache);
  }
  if (shift) {
    auto g = shift->forward(h);
    if (out.empty()) {
      out = std::move(g.output);
    } else {
      out += g.output;
    }
    cache.shift = std::move(g.cache);
  }
  return {std::move(out), std::move(cache)};
}

Matrix Basis::backward(const Cache& cache, const Matrix& grad_out) {
  Matrix dh(grad_out.rows(), grad_out.cols());
  if (scale) {
    dh += hadamard(grad_out, cache.scale_out);
    dh += scale->backward(*cache.scale, hadamard(grad_out, cache.h));
  }
  if (shift) dh += shift->backward(*cache.shift, grad_out);
  return dh;
}

void Basis::for_each_param(const ParamVisitor& fn) {
  if (scale) scale->for_each_param(fn);
  if (shift) shift->for_each_param(fn);
}

LayerIO<Basis::Cache> basis_forward(const Matrix& h, const Basis& params) {
  return params.forward(h);
}

// ------------------------------------------------------------ predictor

Predictor::Predictor(const std::string& name, std::size_t embed_dim,
                     const std::vector<std::size_t>& hidden, std::size_t n_bases) {
  std::size_t in = embed_dim;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    layers.emplace_back(name + ".l" + std::to_string(i), in, hidden[i]);
    in = hidden[i];
  }
  layers.emplace_back(name + ".l" + std::to_string(hidden.size()), in, n_bases);
}

LayerIO<Predictor::Cache> Predictor::forward(const AccentEmbedding& z) const {
  if (z.dim() != embed_dim()) {
    throw ConfigError("predictor expects embedding dim " + std::to_string(embed_dim()) +
                      ", got " + std::to_string(z.dim()));
  }
  Cache cache;
  Matrix x = z.as_row();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto l = layers[i].forward(x);
    cache.linear.push_back(std::move(l.cache));
    x = std::move(l.output);
    if (i + 1 < layers.size()) {
      auto a = activation_forward(x, Activation::kRelu);
      cache.act.push_back(std::move(a.cache));
      x = std::move(a.output);
    }
  }
  cache.alpha = row_softmax(x);
  return {cache.alpha, std::move(cache)};
}

void Predictor::backward(const Cache& cache, const Matrix& grad_alpha) {
  Matrix g = row_softmax_backward(cache.alpha, grad_alpha);
  for (std::size_t i = layers.size(); i-- > 0;) {
    g = layers[i].backward(cache.linear[i], g);
    if (i > 0) g = activation_backward(cache.act[i - 1], g);
  }
}

void Predictor::for_each_param(const ParamVisitor& fn) {
  for (auto& l : layers) l.for_each_param(fn);
}

CoefficientVector predictor_forward(const AccentEmbedding& z, const Predictor& params) {
  return CoefficientVector{params.forward(z).output.data()};
}

// ---------------------------------------------------------- multi-basis

MultiBasisAdapter::MultiBasisAdapter(const std::string& name, std::size_t d_model,
                                     std::size_t bottleneck, std::size_t n_bases,
                                     Connection connection) {
  for (std::size_t k = 0; k < n_bases; ++k)
    bases.emplace_back(name + ".basis" + std::to_string(k), d_model, bottleneck, connection);
}

LayerIO<MultiBasisAdapter::Cache> MultiBasisAdapter::forward(
    const Matrix& h, const CoefficientVector& alpha) const {
  if (alpha.size() != bases.size()) {
    throw DimensionError("multi-basis adapter has " + std::to_string(bases.size()) +
                         " bases but alpha has " + std::to_string(alpha.size()) + " entries");
  }
  Cache cache;
  cache.alpha = alpha.values;
  Matrix out(h.rows(), h.cols());
  for (std::size_t k = 0; k < bases.size(); ++k) {
    auto b = bases[k].forward(h);
    out += b.output * alpha.values[k];
    cache.outputs.push_back(std::move(b.output));
    cache.bases.push_back(std::move(b.cache));
  }
  return {std::move(out), std::move(cache)};
}

Matrix MultiBasisAdapter::backward(const Cache& cache, const Matrix& grad_out,
                                   Matrix& grad_alpha) {
  Matrix dh(grad_out.rows(), grad_out.cols());
  for (std::size_t k = 0; k < bases.size(); ++k) {
    grad_alpha(0, k) += dot_all(grad_out, cache.outputs[k]);
    dh += bases[k].backward(cache.bases[k], grad_out * cache.alpha[k]);
  }
  return dh;
}

void MultiBasisAdapter::for_each_param(const ParamVisitor& fn) {
  for (auto& b : bases) b.for_each_param(fn);
}

std::pair<LayerIO<MultiBasisAdapter::Cache>, CoefficientVector> multi_basis_forward(
    const Matrix& h, const AccentEmbedding& z, const Predictor& predictor,
    const MultiBasisAdapter& adapter) {
  CoefficientVector alpha = predictor_forward(z, predictor);
  auto io = adapter.forward(h, alpha);
  return {std::move(io), std::move(alpha)};
}

// -------------------------------------------------------- adapter layer

AdapterLayer::AdapterLayer(const std::string& name, const AdapterSpec& spec,
                           std::size_t d_model)
    : mode(spec.mode) {
  if (spec.uses_gate()) gated.emplace(name + ".gated", d_model, spec.embed_dim);
  if (spec.uses_bases()) {
    multi.emplace(name + ".multi", d_model, spec.resolved_bottleneck(d_model), spec.n_bases,
                  spec.connection);
  }
}

LayerIO<AdapterLayer::Cache> AdapterLayer::forward(const Matrix& h, const AccentEmbedding& z,
                                                   const CoefficientVector* alpha) const {
  Cache cache;
  if (!gated && !multi) return {Matrix(h.rows(), h.cols()), std::move(cache)};
  if (multi && alpha == nullptr) {
    throw ConfigError("adapter mode '" + to_string(mode) + "' needs basis coefficients");
  }
  if (gated && !multi) {
    auto g = gated->forward(h, z);
    cache.gated = std::move(g.cache);
    return {std::move(g.output), std::move(cache)};
  }
  Matrix basis_in = h;
  if (gated) {
    auto g = gated->forward(h, z);
    basis_in += g.output;
    cache.gated = std::move(g.cache);
  }
  auto m = multi->forward(basis_in, *alpha);
  cache.multi = std::move(m.cache);
  return {std::move(m.output), std::move(cache)};
}

Matrix AdapterLayer::backward(const Cache& cache, const Matrix& grad_out, Matrix& grad_alpha) {
  if (!gated && !multi) return Matrix(grad_out.rows(), grad_out.cols());
  if (!multi) return gated->backward(*cache.gated, grad_out);
  Matrix d_in = multi->backward(*cache.multi, grad_out, grad_alpha);
  if (!gated) return d_in;
  Matrix dh = d_in;
  dh += gated->backward(*cache.gated, d_in);
  return dh;
}

void AdapterLayer::for_each_param(const ParamVisitor& fn) {
  if (gated) gated->for_each_param(fn);
  if (multi) multi->for_each_param(fn);
}

std::pair<LayerIO<AdapterLayer::Cache>, CoefficientVector> combined_forward(
    const Matrix& h, const AccentEmbedding& z, const Predictor& predictor,
    const AdapterLayer& layer) {
  CoefficientVector alpha = predictor_forward(z, predictor);
  auto io = layer.forward(h, z, &alpha);
  return {std::move(io), std::move(alpha)};
}

void init_adapter(AdapterLayer& layer, Rng& rng) {
  layer.for_each_param([](Parameter& p) {
    // LayerNorm gains are the only nonzero constants.
    if (p.name.ends_with(".norm.gain")) {
      p.value.fill(1.0);
    } else {
      p.value.fill(0.0);
    }
  });
  if (layer.multi) {
    for (auto& b : layer.multi->bases) {
      if (b.scale) init_xavier(b.scale->down.weight, rng);
      if (b.shift) init_xavier(b.shift->down.weight, rng);
    }
  }
}

void init_predictor(Predictor& predictor, Rng& rng) {
  for (auto& l : predictor.layers) {
    init_xavier(l.weight, rng);
    l.bias.value.fill(0.0);
  }
}

}  // namespace accent
