#include "accent/model.h"

#include <cmath>

#include "accent/errors.h"

namespace accent {

void ModelConfig::validate() const {
  if (feat_dim < 1 || d_model < 1 || enc_layers < 1 || ffn_dim < 1 || max_len < 1)
    throw ConfigError("model dimensions must be >= 1");
  if (n_heads < 1 || d_model % n_heads != 0)
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  if (vocab_size < 3) throw ConfigError("vocab_size must be >= 3 (blank, eos, content)");
}

Matrix sinusoidal_encoding(std::size_t length, std::size_t dim) {
  Matrix pe(length, dim);
  for (std::size_t t = 0; t < length; ++t) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double exponent = static_cast<double>(2 * (i / 2)) / static_cast<double>(dim);
      const double angle = static_cast<double>(t) / std::pow(10000.0, exponent);
      pe(t, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

// -------------------------------------------------------------- encoder

EncoderBlock::EncoderBlock(const std::string& name, const ModelConfig& cfg)
    : ln1(name + ".ln1", cfg.d_model),
      attn(name + ".attn", cfg.d_model, cfg.n_heads),
      ln2(name + ".ln2", cfg.d_model),
      ffn(name + ".ffn", cfg.d_model, cfg.ffn_dim) {}

LayerIO<EncoderBlock::Cache> EncoderBlock::forward(const Matrix& h_in,
                                                   const AdapterLayer* adapter,
                                                   const AccentEmbedding& z,
                                                   const CoefficientVector* alpha) const {
  if (h_in.cols() != ln1.gain.value.cols()) {
    throw DimensionError("encoder block: input " + h_in.shape_string() + " vs d_model " +
                         std::to_string(ln1.gain.value.cols()));
  }
  Cache cache;
  Matrix x = h_in;
  if (adapter != nullptr) {
    auto a = adapter->forward(h_in, z, alpha);
    x += a.output;
    cache.adapter = std::move(a.cache);
  }
  auto n1 = ln1.forward(x);
  auto at = mhsa_forward(n1.output, attn, false);
  x += at.output;
  auto n2 = ln2.forward(x);
  auto ff = ffn.forward(n2.output);
  x += ff.output;
  cache.ln1 = std::move(n1.cache);
  cache.attn = std::move(at.cache);
  cache.ln2 = std::move(n2.cache);
  cache.ffn = std::move(ff.cache);
  return {std::move(x), std::move(cache)};
}

Matrix EncoderBlock::backward(const Cache& cache, const Matrix& grad_out, AdapterLayer* adapter,
                              Matrix& grad_alpha) {
  Matrix g = grad_out;
  g += ln2.backward(cache.ln2, ffn.backward(cache.ffn, grad_out));
  Matrix gx = g;
  gx += ln1.backward(cache.ln1, mhsa_backward(attn, cache.attn, g));
  if (adapter != nullptr && cache.adapter) {
    Matrix gh = gx;
    gh += adapter->backward(*cache.adapter, gx, grad_alpha);
    return gh;
  }
  return gx;
}

void EncoderBlock::for_each_param(const ParamVisitor& fn) {
  ln1.for_each_param(fn);
  attn.for_each_param(fn);
  ln2.for_each_param(fn);
  ffn.for_each_param(fn);
}

LayerIO<EncoderBlock::Cache> encoder_block_forward(const Matrix& h_in, const EncoderBlock& block,
                                                   const AdapterLayer* adapter,
                                                   const AccentEmbedding& z,
                                                   const CoefficientVector* alpha) {
  return block.forward(h_in, adapter, z, alpha);
}

// -------------------------------------------------------------- decoder

DecoderBlock::DecoderBlock(const std::string& name, const ModelConfig& cfg)
    : ln1(name + ".ln1", cfg.d_model),
      self_attn(name + ".self", cfg.d_model, cfg.n_heads),
      ln2(name + ".ln2", cfg.d_model),
      cross_attn(name + ".cross", cfg.d_model, cfg.n_heads),
      ln3(name + ".ln3", cfg.d_model),
      ffn(name + ".ffn", cfg.d_model, cfg.ffn_dim) {}

LayerIO<DecoderBlock::Cache> DecoderBlock::forward(const Matrix& x_in,
                                                   const Matrix& memory) const {
  Cache cache;
  Matrix x = x_in;
  auto n1 = ln1.forward(x);
  auto sa = self_attn.forward(n1.output, n1.output, true);
  x += sa.output;
  auto n2 = ln2.forward(x);
  auto ca = cross_attn.forward(n2.output, memory, false);
  x += ca.output;
  auto n3 = ln3.forward(x);
  auto ff = ffn.forward(n3.output);
  x += ff.output;
  cache.ln1 = std::move(n1.cache);
  cache.self_attn = std::move(sa.cache);
  cache.ln2 = std::move(n2.cache);
  cache.cross_attn = std::move(ca.cache);
  cache.ln3 = std::move(n3.cache);
  cache.ffn = std::move(ff.cache);
  return {std::move(x), std::move(cache)};
}

Matrix DecoderBlock::backward(const Cache& cache, const Matrix& grad_out,
                              Matrix& grad_memory) {
  Matrix g = grad_out;
  g += ln3.backward(cache.ln3, ffn.backward(cache.ffn, grad_out));
  auto [dq, dmem] = cross_attn.backward(cache.cross_attn, g);
  grad_memory += dmem;
  Matrix g2 = g;
  g2 += ln2.backward(cache.ln2, dq);
  Matrix g1 = g2;
  g1 += ln1.backward(cache.ln1, mhsa_backward(self_attn, cache.self_attn, g2));
  return g1;
}

void DecoderBlock::for_each_param(const ParamVisitor& fn) {
  ln1.for_each_param(fn);
  self_attn.for_each_param(fn);
  ln2.for_each_param(fn);
  cross_attn.for_each_param(fn);
  ln3.for_each_param(fn);
  ffn.for_each_param(fn);
}

// ---------------------------------------------------------------- model

Model::Model(const ModelConfig& cfg, const AdapterSpec& adapter_spec)
    : input("input", cfg.feat_dim, cfg.d_model),
      enc_norm("enc_norm", cfg.d_model),
      ctc_head("ctc_head", cfg.d_model, cfg.vocab_size),
      embedding("embedding", cfg.vocab_size, cfg.d_model),
      dec_norm("dec_norm", cfg.d_model),
      output("output", cfg.d_model, cfg.vocab_size),
      cfg_(cfg) {
  cfg.validate();
  for (std::size_t i = 0; i < cfg.enc_layers; ++i)
    encoder.emplace_back("enc" + std::to_string(i + 1), cfg);
  for (std::size_t i = 0; i < cfg.dec_layers; ++i)
    decoder.emplace_back("dec" + std::to_string(i + 1), cfg);
  adapters.resize(cfg.enc_layers);
  Rng unused(0);
  attach_adapters(adapter_spec, unused);
}

void Model::init_baseline(Rng& rng) {
  auto init = [&rng](Parameter& p) {
    if (p.name.ends_with(".gain")) {
      p.value.fill(1.0);
    } else if (p.name.ends_with(".bias")) {
      p.value.fill(0.0);
    } else {
      init_xavier(p, rng);
    }
  };
  input.for_each_param(init);
  for (auto& b : encoder) b.for_each_param(init);
  enc_norm.for_each_param(init);
  ctc_head.for_each_param(init);
  init(embedding);
  for (auto& b : decoder) b.for_each_param(init);
  dec_norm.for_each_param(init);
  output.for_each_param(init);
}

void Model::attach_adapters(const AdapterSpec& spec, Rng& rng) {
  spec.validate(cfg_.enc_layers);
  adapter_spec_ = spec;
  predictor.reset();
  for (std::size_t i = 0; i < adapters.size(); ++i) {
    adapters[i].reset();
    if (spec.at(static_cast<int>(i + 1))) {
      adapters[i].emplace("adapter" + std::to_string(i + 1), spec, cfg_.d_model);
      init_adapter(*adapters[i], rng);
    }
  }
  if (spec.uses_bases()) {
    predictor.emplace("predictor", spec.embed_dim, spec.predictor_hidden, spec.n_bases);
    init_predictor(*predictor, rng);
  }
}

void Model::check_inputs(const FeatureSequence& features, const AccentEmbedding& z) const {
  if (features.empty() || features.rows() == 0)
    throw InputError("empty feature sequence");
  if (features.cols() != cfg_.feat_dim)
    throw DimensionError("features have " + std::to_string(features.cols()) +
                         " columns, model expects " + std::to_string(cfg_.feat_dim));
  if (adapter_spec_.mode != AdapterMode::kNone && z.dim() != adapter_spec_.embed_dim)
    throw ConfigError("accent embedding has " + std::to_string(z.dim()) +
                      " dims, adapters expect " + std::to_string(adapter_spec_.embed_dim));
}

Matrix Model::decode_states(const Matrix& memory, std::span<const int> dec_input,
                            std::vector<DecoderBlock::Cache>* caches) const {
  Matrix x(dec_input.size(), cfg_.d_model);
  for (std::size_t t = 0; t < dec_input.size(); ++t)
    for (std::size_t j = 0; j < cfg_.d_model; ++j)
      x(t, j) = embedding.value(static_cast<std::size_t>(dec_input[t]), j);
  if (cfg_.positional_encoding) x += sinusoidal_encoding(dec_input.size(), cfg_.d_model);
  for (const auto& block : decoder) {
    auto r = block.forward(x, memory);
    x = std::move(r.output);
    if (caches) caches->push_back(std::move(r.cache));
  }
  return x;
}

ForwardPass Model::forward(const FeatureSequence& features, std::span<const int> targets,
                           const AccentEmbedding& z) const {
  check_inputs(features, z);
  if (targets.size() > cfg_.max_len)
    throw InputError("target length " + std::to_string(targets.size()) + " exceeds max_len " +
                     std::to_string(cfg_.max_len));
  for (int t : targets) {
    if (t == kBlank) throw InputError("targets contain the blank token");
    if (t == kEos || t < 0 || static_cast<std::size_t>(t) >= cfg_.vocab_size)
      throw InputError("target token " + std::to_string(t) + " is not a content token");
  }

  ForwardPass pass;
  auto& c = pass.cache;
  if (predictor) {
    auto p = predictor->forward(z);
    pass.alpha = CoefficientVector{p.output.data()};
    c.predictor = std::move(p.cache);
  }
  const CoefficientVector* alpha = pass.alpha ? &*pass.alpha : nullptr;

  auto in = input.forward(features);
  c.input = std::move(in.cache);
  Matrix h = std::move(in.output);
  if (cfg_.positional_encoding) h += sinusoidal_encoding(h.rows(), cfg_.d_model);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    pass.encoder.block_inputs.push_back(h);
    const AdapterLayer* adapter = adapters[i] ? &*adapters[i] : nullptr;
    auto r = encoder[i].forward(h, adapter, z, alpha);
    h = std::move(r.output);
    c.enc.push_back(std::move(r.cache));
  }
  auto fin = enc_norm.forward(h);
  c.enc_norm = std::move(fin.cache);
  pass.encoder.final = std::move(fin.output);

  auto ctc = ctc_head.forward(pass.encoder.final);
  c.ctc = std::move(ctc.cache);
  pass.output.ctc_log_probs = row_log_softmax(ctc.output);

  c.dec_input.push_back(kEos);
  c.dec_input.insert(c.dec_input.end(), targets.begin(), targets.end());
  Matrix d = decode_states(pass.encoder.final, c.dec_input, &c.dec);
  auto dn = dec_norm.forward(d);
  c.dec_norm = std::move(dn.cache);
  auto logits = output.forward(dn.output);
  c.out = std::move(logits.cache);
  pass.output.s2s_log_probs = row_log_softmax(logits.output);
  return pass;
}

void Model::backward(const ForwardPass& pass, const Matrix& grad_ctc, const Matrix& grad_s2s,
                     const Matrix* grad_alpha_extra) {
  const auto& c = pass.cache;
  // Decoder path.
  Matrix g = row_log_softmax_backward(pass.output.s2s_log_probs, grad_s2s);
  g = output.backward(c.out, g);
  g = dec_norm.backward(c.dec_norm, g);
  Matrix grad_memory(pass.encoder.final.rows(), pass.encoder.final.cols());
  for (std::size_t i = decoder.size(); i-- > 0;) g = decoder[i].backward(c.dec[i], g, grad_memory);
  if (embedding.trainable) {
    for (std::size_t t = 0; t < c.dec_input.size(); ++t)
      for (std::size_t j = 0; j < cfg_.d_model; ++j)
        embedding.grad(static_cast<std::size_t>(c.dec_input[t]), j) += g(t, j);
  }

  // CTC head joins the decoder's memory gradient.
  Matrix gc = row_log_softmax_backward(pass.output.ctc_log_probs, grad_ctc);
  grad_memory += ctc_head.backward(c.ctc, gc);
  Matrix gh = enc_norm.backward(c.enc_norm, grad_memory);

  Matrix grad_alpha(1, predictor ? predictor->n_bases() : 1);
  for (std::size_t i = encoder.size(); i-- > 0;) {
    AdapterLayer* adapter = adapters[i] ? &*adapters[i] : nullptr;
    gh = encoder[i].backward(c.enc[i], gh, adapter, grad_alpha);
  }
  input.backward(c.input, gh);

  if (predictor) {
    if (grad_alpha_extra != nullptr) grad_alpha += *grad_alpha_extra;
    predictor->backward(*c.predictor, grad_alpha);
  }
}

Encoded Model::encode(const FeatureSequence& features, const AccentEmbedding& z) const {
  check_inputs(features, z);
  Encoded enc;
  if (predictor) enc.alpha = predictor_forward(z, *predictor);
  const CoefficientVector* alpha = enc.alpha ? &*enc.alpha : nullptr;
  Matrix h = input.apply(features);
  if (cfg_.positional_encoding) h += sinusoidal_encoding(h.rows(), cfg_.d_model);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const AdapterLayer* adapter = adapters[i] ? &*adapters[i] : nullptr;
    h = encoder[i].forward(h, adapter, z, alpha).output;
  }
  enc.memory = enc_norm.forward(h).output;
  enc.ctc_log_probs = row_log_softmax(ctc_head.apply(enc.memory));
  return enc;
}

std::vector<double> Model::next_token_log_probs(const Matrix& memory,
                                                std::span<const int> prefix) const {
  std::vector<int> dec_input{kEos};
  dec_input.insert(dec_input.end(), prefix.begin(), prefix.end());
  Matrix d = decode_states(memory, dec_input, nullptr);
  Matrix last(1, cfg_.d_model);
  for (std::size_t j = 0; j < cfg_.d_model; ++j) last(0, j) = d(d.rows() - 1, j);
  Matrix logp = row_log_softmax(output.apply(dec_norm.forward(last).output));
  return logp.data();
}

void Model::for_each_param(const ParamVisitor& fn) {
  input.for_each_param(fn);
  for (auto& b : encoder) b.for_each_param(fn);
  enc_norm.for_each_param(fn);
  ctc_head.for_each_param(fn);
  fn(embedding);
  for (auto& b : decoder) b.for_each_param(fn);
  dec_norm.for_each_param(fn);
  output.for_each_param(fn);
  for (auto& a : adapters)
    if (a) a->for_each_param(fn);
  if (predictor) predictor->for_each_param(fn);
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for_each_param([&out](Parameter& p) { out.push_back(&p); });
  return out;
}

std::vector<Parameter*> Model::adapter_parameters() {
  std::vector<Parameter*> out;
  for (auto& a : adapters)
    if (a) a->for_each_param([&out](Parameter& p) { out.push_back(&p); });
  if (predictor) predictor->for_each_param([&out](Parameter& p) { out.push_back(&p); });
  return out;
}

void Model::zero_grad() {
  for_each_param([](Parameter& p) { p.zero_grad(); });
}

std::pair<ModelOutput, EncoderState> model_forward(const FeatureSequence& features,
                                                   std::span<const int> targets,
                                                   const AccentEmbedding& z,
                                                   const Model& model) {
  auto pass = model.forward(features, targets, z);
  return {std::move(pass.output), std::move(pass.encoder)};
}

}  // namespace accent
