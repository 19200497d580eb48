#include "accent/gradsuite.h"

#include <algorithm>
#include <functional>
#include <random>

#include "accent/adapters.h"
#include "accent/attention.h"
#include "accent/errors.h"
#include "accent/losses.h"
#include "accent/model.h"

namespace accent {
namespace {

using Check = std::function<GradCheckResult(Rng&, const std::string&)>;

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data()) v = uniform(rng, -scale, scale);
  return m;
}

/// Random values for every parameter, gains kept near one.
void randomize(Parameter& p, Rng& rng) {
  if (p.name.ends_with(".gain")) {
    for (double& v : p.value.data()) v = uniform(rng, 0.5, 1.5);
  } else {
    for (double& v : p.value.data()) v = uniform(rng, -0.8, 0.8);
  }
}

template <class Layer>
std::vector<Parameter*> randomized_params(Layer& layer, Rng& rng) {
  std::vector<Parameter*> out;
  layer.for_each_param([&](Parameter& p) {
    randomize(p, rng);
    out.push_back(&p);
  });
  return out;
}

AccentEmbedding random_embedding(Rng& rng, std::size_t dim) {
  AccentEmbedding z;
  for (std::size_t i = 0; i < dim; ++i) z.values.push_back(uniform(rng, -1.0, 1.0));
  return z;
}

std::vector<int> random_labels(Rng& rng, std::size_t len, std::size_t vocab, int first) {
  std::vector<int> out;
  for (std::size_t i = 0; i < len; ++i)
    out.push_back(static_cast<int>(pick(rng, static_cast<std::size_t>(first), vocab - 1)));
  return out;
}

CoefficientVector random_simplex(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double s = 0.0;
  for (double& x : v) s += (x = uniform(rng, 0.05, 1.0));
  for (double& x : v) x /= s;
  return {v};
}

// Layers are checked through a random linear readout L = <R, output>, so
// the upstream gradient is R. Inputs are wrapped as parameters so their
// gradients are checked alongside the weights.

GradCheckResult check_linear(Rng& rng, const std::string& name) {
  Linear layer("lin", pick(rng, 1, 8), pick(rng, 1, 8));
  auto params = randomized_params(layer, rng);
  Parameter x("x", pick(rng, 1, 6), layer.in_dim());
  x.value = random_matrix(rng, x.value.rows(), x.value.cols());
  params.push_back(&x);
  const Matrix r = random_matrix(rng, x.value.rows(), layer.out_dim());
  return check_gradients(
      name, [&] { return dot_all(r, layer.apply(x.value)); },
      [&] {
        auto f = layer.forward(x.value);
        x.accumulate(layer.backward(f.cache, r));
      },
      params);
}

GradCheckResult check_layer_norm(Rng& rng, const std::string& name) {
  LayerNorm layer("ln", pick(rng, 3, 8));
  auto params = randomized_params(layer, rng);
  Parameter x("x", pick(rng, 1, 6), layer.gain.value.cols());
  x.value = random_matrix(rng, x.value.rows(), x.value.cols(), 2.0);
  params.push_back(&x);
  const Matrix r = random_matrix(rng, x.value.rows(), x.value.cols());
  return check_gradients(
      name, [&] { return dot_all(r, layer.forward(x.value).output); },
      [&] {
        auto f = layer.forward(x.value);
        x.accumulate(layer.backward(f.cache, r));
      },
      params);
}

GradCheckResult check_ffn(Rng& rng, const std::string& name) {
  FeedForward layer("ffn", pick(rng, 2, 8), pick(rng, 2, 8));
  auto params = randomized_params(layer, rng);
  Parameter x("x", pick(rng, 1, 6), layer.in.in_dim());
  x.value = random_matrix(rng, x.value.rows(), x.value.cols());
  params.push_back(&x);
  const Matrix r = random_matrix(rng, x.value.rows(), x.value.cols());
  return check_gradients(
      name, [&] { return dot_all(r, layer.forward(x.value).output); },
      [&] {
        auto f = layer.forward(x.value);
        x.accumulate(layer.backward(f.cache, r));
      },
      params);
}

GradCheckResult check_attention(Rng& rng, const std::string& name, bool causal, bool cross) {
  const std::size_t heads = pick(rng, 1, 2);
  const std::size_t d = heads * pick(rng, 1, 4);
  MultiHeadAttention attn("mha", d, heads);
  auto params = randomized_params(attn, rng);
  Parameter q("q", pick(rng, 2, 6), d);
  q.value = random_matrix(rng, q.value.rows(), d);
  Parameter kv("kv", cross ? pick(rng, 2, 6) : q.value.rows(), d);
  kv.value = random_matrix(rng, kv.value.rows(), d);
  params.push_back(&q);
  if (cross) params.push_back(&kv);
  const Matrix r = random_matrix(rng, q.value.rows(), d);
  const Matrix& kv_in = cross ? kv.value : q.value;
  return check_gradients(
      name, [&] { return dot_all(r, attn.forward(q.value, cross ? kv.value : q.value, causal).output); },
      [&] {
        auto f = attn.forward(q.value, kv_in, causal);
        auto [dq, dkv] = attn.backward(f.cache, r);
        if (cross) {
          q.accumulate(dq);
          kv.accumulate(dkv);
        } else {
          q.accumulate(dq + dkv);
        }
      },
      params);
}

GradCheckResult check_softmax(Rng& rng, const std::string& name, bool log_domain) {
  Parameter x("x", pick(rng, 1, 6), pick(rng, 2, 8));
  x.value = random_matrix(rng, x.value.rows(), x.value.cols(), 2.0);
  const Matrix r = random_matrix(rng, x.value.rows(), x.value.cols());
  auto fwd = [&] { return log_domain ? row_log_softmax(x.value) : row_softmax(x.value); };
  return check_gradients(
      name, [&] { return dot_all(r, fwd()); },
      [&] {
        const Matrix y = fwd();
        x.accumulate(log_domain ? row_log_softmax_backward(y, r) : row_softmax_backward(y, r));
      },
      {&x});
}

ModelConfig tiny_model_config(Rng& rng) {
  ModelConfig cfg;
  cfg.feat_dim = pick(rng, 2, 4);
  cfg.n_heads = pick(rng, 1, 2);
  cfg.d_model = cfg.n_heads == 1 ? pick(rng, 3, 6) : 2 * pick(rng, 2, 3);
  cfg.enc_layers = 2;
  cfg.dec_layers = 1;
  cfg.ffn_dim = pick(rng, 3, 8);
  cfg.vocab_size = pick(rng, 4, 6);
  cfg.max_len = 3;
  return cfg;
}

GradCheckResult check_ctc_head(Rng& rng, const std::string& name) {
  const std::size_t d = pick(rng, 2, 8), v = pick(rng, 3, 8);
  Linear head("ctc_head", d, v);
  auto params = randomized_params(head, rng);
  Parameter x("x", pick(rng, 1, 6), d);
  x.value = random_matrix(rng, x.value.rows(), d);
  params.push_back(&x);
  const Matrix r = random_matrix(rng, x.value.rows(), v);
  return check_gradients(
      name, [&] { return dot_all(r, row_log_softmax(head.apply(x.value))); },
      [&] {
        auto f = head.forward(x.value);
        const Matrix lp = row_log_softmax(f.output);
        x.accumulate(head.backward(f.cache, row_log_softmax_backward(lp, r)));
      },
      params);
}

GradCheckResult check_encoder_block(Rng& rng, const std::string& name) {
  const ModelConfig cfg = tiny_model_config(rng);
  EncoderBlock block("enc", cfg);
  auto params = randomized_params(block, rng);
  Parameter x("x", pick(rng, 2, 6), cfg.d_model);
  x.value = random_matrix(rng, x.value.rows(), cfg.d_model);
  params.push_back(&x);
  const Matrix r = random_matrix(rng, x.value.rows(), cfg.d_model);
  const AccentEmbedding z;
  return check_gradients(
      name, [&] { return dot_all(r, block.forward(x.value, nullptr, z, nullptr).output); },
      [&] {
        auto f = block.forward(x.value, nullptr, z, nullptr);
        Matrix unused(1, 1);
        x.accumulate(block.backward(f.cache, r, nullptr, unused));
      },
      params);
}

GradCheckResult check_decoder_block(Rng& rng, const std::string& name) {
  const ModelConfig cfg = tiny_model_config(rng);
  DecoderBlock block("dec", cfg);
  auto params = randomized_params(block, rng);
  Parameter x("x", pick(rng, 2, 4), cfg.d_model);
  x.value = random_matrix(rng, x.value.rows(), cfg.d_model);
  Parameter mem("memory", pick(rng, 2, 6), cfg.d_model);
  mem.value = random_matrix(rng, mem.value.rows(), cfg.d_model);
  params.push_back(&x);
  params.push_back(&mem);
  const Matrix r = random_matrix(rng, x.value.rows(), cfg.d_model);
  return check_gradients(
      name, [&] { return dot_all(r, block.forward(x.value, mem.value).output); },
      [&] {
        auto f = block.forward(x.value, mem.value);
        Matrix gm(mem.value.rows(), mem.value.cols());
        x.accumulate(block.backward(f.cache, r, gm));
        mem.accumulate(gm);
      },
      params);
}

/// Full model trained on lambda*L_ctc + (1-lambda)*L_s2s (+ gamma*L_mse
/// when the adapter predicts coefficients).
GradCheckResult check_full_model(Rng& rng, const std::string& name, AdapterMode mode) {
  const ModelConfig cfg = tiny_model_config(rng);
  AdapterSpec spec;
  spec.mode = mode;
  spec.positions = {1, 2};
  spec.n_bases = pick(rng, 2, 3);
  spec.bottleneck = 2;
  spec.embed_dim = pick(rng, 2, 4);
  spec.predictor_hidden = {3};
  Model model(cfg, spec);
  auto params = randomized_params(model, rng);

  const std::vector<int> tokens = random_labels(rng, pick(rng, 1, 2), cfg.vocab_size, 2);
  const std::size_t frames = std::max<std::size_t>(2, ctc_min_frames(tokens)) + pick(rng, 0, 3);
  const Matrix features = random_matrix(rng, frames, cfg.feat_dim);
  const AccentEmbedding z = random_embedding(rng, spec.embed_dim);
  const CoefficientVector ref = random_simplex(rng, spec.n_bases);
  const double lambda = uniform(rng, 0.1, 0.9);
  const double gamma = uniform(rng, 0.1, 1.0);
  const auto targets = s2s_targets(tokens);

  auto loss = [&] {
    const ForwardPass p = model.forward(features, tokens, z);
    const double jca = jca_loss(ctc_loss(p.output.ctc_log_probs, tokens).loss,
                                s2s_loss(p.output.s2s_log_probs, targets).loss, lambda);
    return p.alpha ? mtl_loss(jca, coeff_mse(ref, *p.alpha).loss, gamma) : jca;
  };
  auto backward = [&] {
    const ForwardPass p = model.forward(features, tokens, z);
    LossWithGrad c = ctc_loss(p.output.ctc_log_probs, tokens);
    LossWithGrad s = s2s_loss(p.output.s2s_log_probs, targets);
    c.grad *= lambda;
    s.grad *= 1.0 - lambda;
    std::optional<Matrix> ga;
    if (p.alpha) {
      ga = Matrix::row_vector(coeff_mse(ref, *p.alpha).grad);
      *ga *= gamma;
    }
    model.backward(p, c.grad, s.grad, ga ? &*ga : nullptr);
  };
  return check_gradients(name, loss, backward, params);
}

GradCheckResult check_gated(Rng& rng, const std::string& name) {
  const std::size_t d = pick(rng, 2, 8), e = pick(rng, 2, 8);
  GatedAdapter layer("gated", d, e);
  auto params = randomized_params(layer, rng);
  Parameter h("h", pick(rng, 1, 6), d);
  h.value = random_matrix(rng, h.value.rows(), d);
  params.push_back(&h);
  const AccentEmbedding z = random_embedding(rng, e);
  const Matrix r = random_matrix(rng, h.value.rows(), d);
  return check_gradients(
      name, [&] { return dot_all(r, layer.forward(h.value, z).output); },
      [&] {
        auto f = layer.forward(h.value, z);
        h.accumulate(layer.backward(f.cache, r));
      },
      params);
}

GradCheckResult check_basis(Rng& rng, const std::string& name, Connection connection) {
  const std::size_t d = pick(rng, 3, 8);
  Basis layer("basis", d, pick(rng, 1, 4), connection);
  auto params = randomized_params(layer, rng);
  Parameter h("h", pick(rng, 1, 6), d);
  h.value = random_matrix(rng, h.value.rows(), d);
  params.push_back(&h);
  const Matrix r = random_matrix(rng, h.value.rows(), d);
  return check_gradients(
      name, [&] { return dot_all(r, layer.forward(h.value).output); },
      [&] {
        auto f = layer.forward(h.value);
        h.accumulate(layer.backward(f.cache, r));
      },
      params);
}

GradCheckResult check_predictor(Rng& rng, const std::string& name) {
  const std::size_t e = pick(rng, 2, 8), n = pick(rng, 2, 6);
  std::vector<std::size_t> hidden;
  for (std::size_t i = pick(rng, 0, 2); i > 0; --i) hidden.push_back(pick(rng, 2, 8));
  Predictor layer("predictor", e, hidden, n);
  auto params = randomized_params(layer, rng);
  const AccentEmbedding z = random_embedding(rng, e);
  const Matrix r = random_matrix(rng, 1, n);
  return check_gradients(
      name, [&] { return dot_all(r, layer.forward(z).output); },
      [&] {
        auto f = layer.forward(z);
        layer.backward(f.cache, r);
      },
      params);
}

GradCheckResult check_adapter_layer(Rng& rng, const std::string& name, AdapterMode mode) {
  AdapterSpec spec;
  spec.mode = mode;
  spec.n_bases = pick(rng, 2, 4);
  spec.bottleneck = pick(rng, 1, 4);
  spec.embed_dim = pick(rng, 2, 6);
  spec.connection = static_cast<Connection>(pick(rng, 0, 2));
  spec.predictor_hidden = {pick(rng, 2, 6)};
  const std::size_t d = pick(rng, 3, 8);
  AdapterLayer layer("adapter", spec, d);
  Predictor predictor("predictor", spec.embed_dim, spec.predictor_hidden, spec.n_bases);
  auto params = randomized_params(layer, rng);
  for (Parameter* p : randomized_params(predictor, rng)) params.push_back(p);
  Parameter h("h", pick(rng, 1, 6), d);
  h.value = random_matrix(rng, h.value.rows(), d);
  params.push_back(&h);
  const AccentEmbedding z = random_embedding(rng, spec.embed_dim);
  const Matrix r = random_matrix(rng, h.value.rows(), d);
  auto forward = [&](Predictor::Cache* pc) {
    auto p = predictor.forward(z);
    if (pc) *pc = p.cache;
    const CoefficientVector alpha{p.output.data()};
    return layer.forward(h.value, z, &alpha);
  };
  return check_gradients(
      name, [&] { return dot_all(r, forward(nullptr).output); },
      [&] {
        Predictor::Cache pc;
        auto f = forward(&pc);
        Matrix ga(1, spec.n_bases);
        h.accumulate(layer.backward(f.cache, r, ga));
        predictor.backward(pc, ga);
      },
      params);
}

GradCheckResult check_ctc_loss(Rng& rng, const std::string& name) {
  const std::size_t v = pick(rng, 2, 5);
  const auto labels = random_labels(rng, pick(rng, 1, 3), v, 1);
  Parameter lp("log_probs", ctc_min_frames(labels) + pick(rng, 0, 2), v);
  lp.value = row_log_softmax(random_matrix(rng, lp.value.rows(), v, 2.0));
  return check_gradients(
      name, [&] { return ctc_loss(lp.value, labels).loss; },
      [&] { lp.accumulate(ctc_loss(lp.value, labels).grad); }, {&lp});
}

GradCheckResult check_s2s_loss(Rng& rng, const std::string& name) {
  const std::size_t v = pick(rng, 3, 8);
  const auto targets = s2s_targets(random_labels(rng, pick(rng, 1, 5), v, 2));
  Parameter lp("log_probs", targets.size(), v);
  lp.value = row_log_softmax(random_matrix(rng, targets.size(), v, 2.0));
  return check_gradients(
      name, [&] { return s2s_loss(lp.value, targets).loss; },
      [&] { lp.accumulate(s2s_loss(lp.value, targets).grad); }, {&lp});
}

GradCheckResult check_jca_loss(Rng& rng, const std::string& name) {
  const std::size_t v = pick(rng, 3, 6);
  const auto labels = random_labels(rng, pick(rng, 1, 3), v, 2);
  const auto targets = s2s_targets(labels);
  Parameter ctc_logits("ctc_logits", ctc_min_frames(labels) + pick(rng, 0, 2), v);
  ctc_logits.value = random_matrix(rng, ctc_logits.value.rows(), v, 2.0);
  Parameter s2s_logits("s2s_logits", targets.size(), v);
  s2s_logits.value = random_matrix(rng, targets.size(), v, 2.0);
  const double lambda = uniform(rng, 0.0, 1.0);
  return check_gradients(
      name,
      [&] {
        return jca_loss(ctc_loss(row_log_softmax(ctc_logits.value), labels).loss,
                        s2s_loss(row_log_softmax(s2s_logits.value), targets).loss, lambda);
      },
      [&] {
        const Matrix a = row_log_softmax(ctc_logits.value);
        const Matrix b = row_log_softmax(s2s_logits.value);
        ctc_logits.accumulate(row_log_softmax_backward(a, ctc_loss(a, labels).grad * lambda));
        s2s_logits.accumulate(
            row_log_softmax_backward(b, s2s_loss(b, targets).grad * (1.0 - lambda)));
      },
      {&ctc_logits, &s2s_logits});
}

GradCheckResult check_coeff_mse(Rng& rng, const std::string& name) {
  const std::size_t n = pick(rng, 2, 8);
  const CoefficientVector ref = random_simplex(rng, n);
  Parameter alpha("alpha", 1, n);
  alpha.value = Matrix::row_vector(random_simplex(rng, n).values);
  auto as_vec = [&] { return CoefficientVector{alpha.value.data()}; };
  return check_gradients(
      name, [&] { return coeff_mse(ref, as_vec()).loss; },
      [&] { alpha.accumulate(Matrix::row_vector(coeff_mse(ref, as_vec()).grad)); }, {&alpha});
}

struct NamedCheck {
  std::string name;
  Check run;
};

std::vector<NamedCheck> checks_for(const std::string& module) {
  if (module == "numerics") {
    return {
        {"linear", check_linear},
        {"layer_norm", check_layer_norm},
        {"ffn", check_ffn},
        {"mhsa", [](Rng& r, const std::string& n) { return check_attention(r, n, false, false); }},
        {"mhsa_causal",
         [](Rng& r, const std::string& n) { return check_attention(r, n, true, false); }},
        {"cross_attention",
         [](Rng& r, const std::string& n) { return check_attention(r, n, false, true); }},
        {"softmax", [](Rng& r, const std::string& n) { return check_softmax(r, n, false); }},
        {"log_softmax", [](Rng& r, const std::string& n) { return check_softmax(r, n, true); }},
    };
  }
  if (module == "model") {
    return {
        {"ctc_head", check_ctc_head},
        {"encoder_block", check_encoder_block},
        {"decoder_block", check_decoder_block},
        {"baseline_model",
         [](Rng& r, const std::string& n) { return check_full_model(r, n, AdapterMode::kNone); }},
    };
  }
  if (module == "adapters") {
    auto basis = [](Connection c) {
      return [c](Rng& r, const std::string& n) { return check_basis(r, n, c); };
    };
    auto layer = [](AdapterMode m) {
      return [m](Rng& r, const std::string& n) { return check_adapter_layer(r, n, m); };
    };
    return {
        {"gated", check_gated},
        {"basis_scaling_only", basis(Connection::kScalingOnly)},
        {"basis_shifting_only", basis(Connection::kShiftingOnly)},
        {"basis_both", basis(Connection::kBoth)},
        {"predictor", check_predictor},
        {"multi_basis", layer(AdapterMode::kMulti)},
        {"combined", layer(AdapterMode::kCombined)},
    };
  }
  if (module == "losses") {
    return {
        {"ctc", check_ctc_loss},
        {"s2s", check_s2s_loss},
        {"jca", check_jca_loss},
        {"coeff_mse", check_coeff_mse},
        {"mtl",
         [](Rng& r, const std::string& n) {
           return check_full_model(r, n, AdapterMode::kCombined);
         }},
    };
  }
  throw UsageError("unknown gradcheck module '" + module + "'");
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> names{"numerics", "model", "adapters", "losses"};
  return names;
}

std::vector<GradCheckResult> run_gradcheck_suite(const std::string& module,
                                                 std::size_t instances, std::uint64_t seed) {
  std::vector<GradCheckResult> out;
  const auto checks = checks_for(module);
  for (std::size_t c = 0; c < checks.size(); ++c) {
    for (std::size_t i = 0; i < instances; ++i) {
      Rng rng(seed * 1000003ULL + c * 1009ULL + i);
      out.push_back(checks[c].run(rng, checks[c].name + "#" + std::to_string(i)));
    }
  }
  return out;
}

}  // namespace accent
