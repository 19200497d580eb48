#include <cmath>
#include <numeric>

#include "accent/checkpoint.h"
#include "accent/errors.h"
#include "accent/gradsuite.h"
#include "accent/model.h"
#include "doctest.h"
#include "test_util.h"

using namespace accent;
using accent::testing::random_embedding;
using accent::testing::random_matrix;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.feat_dim = 3;
  c.d_model = 8;
  c.n_heads = 2;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.ffn_dim = 12;
  c.vocab_size = 6;
  c.max_len = 5;
  return c;
}

Model random_model(const ModelConfig& cfg, std::uint64_t seed, AdapterSpec spec = {}) {
  Model m(cfg, spec);
  Rng rng(seed);
  m.init_baseline(rng);
  return m;
}

AdapterSpec spec_for(AdapterMode mode, std::size_t embed_dim) {
  AdapterSpec s;
  s.mode = mode;
  s.embed_dim = embed_dim;
  s.n_bases = 3;
  s.predictor_hidden = {5};
  return s;
}

}  // namespace

TEST_SUITE("attention") {
  TEST_CASE("single frame reduces to the value and output projections") {
    Rng rng(1);
    MultiHeadAttention attn("a", 4, 2);
    accent::testing::randomize(accent::testing::collect(attn), rng);
    const Matrix x = random_matrix(1, 4, rng);
    const Matrix expected = attn.wo.apply(attn.wv.apply(x));
    CHECK(max_abs_diff(mhsa_forward(x, attn, false).output, expected) <= 1e-14);
  }

  TEST_CASE("causal mask forces the first row onto the first key") {
    Rng rng(2);
    MultiHeadAttention attn("a", 4, 2);
    accent::testing::randomize(accent::testing::collect(attn), rng);
    const auto io = mhsa_forward(random_matrix(2, 4, rng), attn, true);
    for (const Matrix& w : io.cache.weights) {
      CHECK(w(0, 0) == 1.0);
      CHECK(w(0, 1) == 0.0);
    }
  }

  TEST_CASE("d_model must split evenly across heads") {
    ModelConfig c = small_config();
    c.n_heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
  }

  TEST_CASE("wrong input width is a dimension error") {
    MultiHeadAttention attn("a", 4, 2);
    CHECK_THROWS_AS(mhsa_forward(Matrix(2, 3), attn, false), DimensionError);
  }
}

TEST_SUITE("encoder block") {
  TEST_CASE("zero weights give the identity") {
    const ModelConfig cfg = small_config();
    EncoderBlock block("b", cfg);
    for (Parameter* p : accent::testing::collect(block)) p->value.fill(0.0);
    Rng rng(3);
    const Matrix h = random_matrix(4, cfg.d_model, rng);
    const auto out = encoder_block_forward(h, block, nullptr, {}, nullptr).output;
    CHECK(out == h);
  }

  TEST_CASE("a zero-initialized adapter changes nothing") {
    const ModelConfig cfg = small_config();
    Rng rng(4);
    EncoderBlock block("b", cfg);
    accent::testing::randomize(accent::testing::collect(block), rng);
    const Matrix h = random_matrix(5, cfg.d_model, rng);
    for (AdapterMode mode : {AdapterMode::kGated, AdapterMode::kMulti, AdapterMode::kCombined}) {
      const AdapterSpec spec = spec_for(mode, 4);
      AdapterLayer layer("ad", spec, cfg.d_model);
      init_adapter(layer, rng);
      const AccentEmbedding z = random_embedding(4, rng);
      const CoefficientVector alpha{{0.2, 0.3, 0.5}};
      const auto with = encoder_block_forward(h, block, &layer, z, &alpha).output;
      const auto without = encoder_block_forward(h, block, nullptr, z, nullptr).output;
      CHECK(with == without);
    }
  }

  TEST_CASE("wrong embedding width is a configuration error") {
    const ModelConfig cfg = small_config();
    Model m(cfg, spec_for(AdapterMode::kGated, 4));
    CHECK_THROWS_AS(m.forward(Matrix(3, cfg.feat_dim), std::vector<int>{2}, AccentEmbedding{{1, 2}}),
                    ConfigError);
  }
}

TEST_SUITE("model forward") {
  TEST_CASE("output shapes and normalized rows") {
    const ModelConfig cfg = small_config();
    const Model m = random_model(cfg, 5);
    Rng rng(6);
    const std::vector<int> targets{2, 3, 4};
    const auto [out, enc] = model_forward(random_matrix(7, cfg.feat_dim, rng), targets, {}, m);
    CHECK(out.ctc_log_probs.rows() == 7);
    CHECK(out.ctc_log_probs.cols() == cfg.vocab_size);
    CHECK(out.s2s_log_probs.rows() == targets.size() + 1);
    CHECK(out.s2s_log_probs.cols() == cfg.vocab_size);
    CHECK(enc.block_inputs.size() == cfg.enc_layers);
    CHECK(enc.final.rows() == 7);
    for (const Matrix* lp : {&out.ctc_log_probs, &out.s2s_log_probs}) {
      for (std::size_t r = 0; r < lp->rows(); ++r) {
        double s = 0;
        for (double v : lp->row(r)) s += std::exp(v);
        CHECK(std::abs(s - 1.0) <= 1e-9);
      }
    }
  }

  TEST_CASE("zero parameters give uniform log-probabilities") {
    const ModelConfig cfg = small_config();
    Model m(cfg, {});
    for (Parameter* p : m.parameters()) p->value.fill(0.0);
    Rng rng(7);
    const auto [out, enc] = model_forward(random_matrix(4, cfg.feat_dim, rng), std::vector<int>{2, 3}, {}, m);
    const double u = -std::log(static_cast<double>(cfg.vocab_size));
    for (double v : out.ctc_log_probs.data()) CHECK(v == doctest::Approx(u).epsilon(1e-15));
    for (double v : out.s2s_log_probs.data()) CHECK(v == doctest::Approx(u).epsilon(1e-15));
  }

  TEST_CASE("input errors") {
    const ModelConfig cfg = small_config();
    const Model m = random_model(cfg, 8);
    CHECK_THROWS_AS(m.forward(Matrix(), std::vector<int>{2}, {}), InputError);
    CHECK_THROWS_AS(m.forward(Matrix(3, cfg.feat_dim), std::vector<int>{2, kBlank}, {}), InputError);
    CHECK_THROWS_AS(m.forward(Matrix(3, cfg.feat_dim), std::vector<int>(cfg.max_len + 1, 2), {}),
                    InputError);
    CHECK_THROWS_AS(m.forward(Matrix(3, cfg.feat_dim + 1), std::vector<int>{2}, {}), DimensionError);
  }

  TEST_CASE("decoder is causal in the targets") {
    const ModelConfig cfg = small_config();
    const Model m = random_model(cfg, 9);
    Rng rng(10);
    const Matrix x = random_matrix(6, cfg.feat_dim, rng);
    const std::vector<int> a{2, 3, 4, 5};
    const auto base = m.forward(x, a, {}).output.s2s_log_probs;
    for (std::size_t j = 0; j < a.size(); ++j) {
      std::vector<int> b = a;
      b[j] = b[j] == 2 ? 3 : 2;
      const auto changed = m.forward(x, b, {}).output.s2s_log_probs;
      for (std::size_t r = 0; r <= j; ++r)
        for (std::size_t c = 0; c < cfg.vocab_size; ++c) CHECK(changed(r, c) == base(r, c));
      CHECK(max_abs_diff(changed, base) > 0.0);
    }
  }

  TEST_CASE("without positional encoding frame permutation permutes CTC rows") {
    ModelConfig cfg = small_config();
    cfg.positional_encoding = false;
    const Model m = random_model(cfg, 11);
    Rng rng(12);
    const Matrix x = random_matrix(5, cfg.feat_dim, rng);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    Matrix xp(5, cfg.feat_dim);
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t c = 0; c < cfg.feat_dim; ++c) xp(t, c) = x(perm[t], c);
    const Matrix a = m.encode(x, {}).ctc_log_probs;
    const Matrix b = m.encode(xp, {}).ctc_log_probs;
    for (std::size_t t = 0; t < 5; ++t)
      for (std::size_t v = 0; v < cfg.vocab_size; ++v)
        CHECK(b(t, v) == doctest::Approx(a(perm[t], v)).epsilon(1e-12));
  }

  TEST_CASE("encode and next-token scoring agree with teacher forcing") {
    const ModelConfig cfg = small_config();
    const Model m = random_model(cfg, 13);
    Rng rng(14);
    const Matrix x = random_matrix(6, cfg.feat_dim, rng);
    const std::vector<int> t{4, 2, 5};
    const auto pass = m.forward(x, t, {});
    const auto enc = m.encode(x, {});
    CHECK(enc.ctc_log_probs == pass.output.ctc_log_probs);
    for (std::size_t j = 0; j <= t.size(); ++j) {
      const auto lp = m.next_token_log_probs(enc.memory, std::span(t).first(j));
      for (std::size_t v = 0; v < cfg.vocab_size; ++v)
        CHECK(lp[v] == doctest::Approx(pass.output.s2s_log_probs(j, v)).epsilon(1e-12));
    }
  }

  TEST_CASE("adapter-free model ignores the embedding") {
    const ModelConfig cfg = small_config();
    const Model m = random_model(cfg, 15);
    Rng rng(16);
    const Matrix x = random_matrix(4, cfg.feat_dim, rng);
    CHECK(m.encode(x, {}).ctc_log_probs == m.encode(x, random_embedding(7, rng)).ctc_log_probs);
  }
}

TEST_SUITE("model adapters") {
  TEST_CASE("zero-initialized adapters are bit-identical to the baseline") {
    const ModelConfig cfg = small_config();
    const Model base = random_model(cfg, 17);
    Rng rng(18);
    const Matrix x = random_matrix(6, cfg.feat_dim, rng);
    const std::vector<int> t{2, 3};
    const AccentEmbedding z = random_embedding(4, rng);
    const auto ref = base.forward(x, t, z).output;
    for (AdapterMode mode : {AdapterMode::kGated, AdapterMode::kMulti, AdapterMode::kCombined}) {
      for (std::vector<int> pos : {std::vector<int>{1}, std::vector<int>{2}, std::vector<int>{1, 2}}) {
        Model adapted = base;
        AdapterSpec spec = spec_for(mode, 4);
        spec.positions = pos;
        adapted.attach_adapters(spec, rng);
        const auto out = adapted.forward(x, t, z).output;
        CHECK(out.ctc_log_probs == ref.ctc_log_probs);
        CHECK(out.s2s_log_probs == ref.s2s_log_probs);
      }
    }
  }

  TEST_CASE("adapter parameters are separated from the base") {
    const ModelConfig cfg = small_config();
    Model m = random_model(cfg, 19);
    const std::size_t base_count = m.parameters().size();
    CHECK(m.adapter_parameters().empty());
    Rng rng(20);
    m.attach_adapters(spec_for(AdapterMode::kCombined, 4), rng);
    CHECK(m.has_bases());
    CHECK(m.parameters().size() == base_count + m.adapter_parameters().size());
  }

  TEST_CASE("positions outside the encoder are rejected") {
    AdapterSpec spec = spec_for(AdapterMode::kGated, 4);
    spec.positions = {3};
    CHECK_THROWS_AS(spec.validate(2), ConfigError);
  }
}

TEST_SUITE("model gradients") {
  TEST_CASE("model gradient suite passes") {
    for (const auto& r : run_gradcheck_suite("model", 4, 7)) {
      INFO(r.name << " " << r.worst_param << " " << r.worst_relative_error);
      CHECK(r.passed);
    }
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("save and load reproduce every parameter bit-exactly") {
    const ModelConfig cfg = small_config();
    Checkpoint c;
    c.model = random_model(cfg, 21);
    Rng rng(22);
    c.model.attach_adapters(spec_for(AdapterMode::kCombined, 4), rng);
    accent::testing::randomize(c.model.adapter_parameters(), rng);
    c.stage = "finetune-all";
    c.epoch = 3;
    const std::string text = serialize_checkpoint(c);
    Checkpoint back = deserialize_checkpoint(text);
    CHECK(back.model.config() == cfg);
    CHECK(back.stage == "finetune-all");
    CHECK(back.epoch == 3);
    auto pa = c.model.parameters();
    auto pb = back.model.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
      CHECK(pa[i]->name == pb[i]->name);
      CHECK(pa[i]->value == pb[i]->value);
    }
    CHECK(serialize_checkpoint(back) == text);
  }

  TEST_CASE("unknown format is rejected") {
    CHECK_THROWS(deserialize_checkpoint(R"({"format":"other","version":1})"));
  }
}
