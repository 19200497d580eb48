#include <sys/wait.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "accent/checkpoint.h"
#include "accent/config.h"
#include "accent/errors.h"
#include "accent/evaluate.h"
#include "accent/losses.h"
#include "accent/trainer.h"
#include "doctest.h"
#include "test_util.h"

using namespace accent;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"(# small enough to train in well under a second per stage
corpus.train_size = 24
corpus.cv_size = 8
corpus.test_size = 8
corpus.feat_dim = 3
corpus.embed_dim = 8
corpus.vocab_content = 4
corpus.max_tokens = 4
model.d_model = 8
model.enc_layers = 2
model.dec_layers = 1
model.ffn_dim = 8
model.max_len = 4
adapter.mode = combined
adapter.predictor_hidden = 4
train.epochs_baseline = 2
train.epochs_inject = 2
train.epochs_finetune = 1
train.warmup_steps = 10
train.base_lr = 2
)";

TrainConfig tiny_config(Stage stage, const std::string& extra = "") {
  std::istringstream in(std::string(kTinyConfig) + extra);
  TrainConfig c = parse_config(in);
  c.stage = stage;
  c.finalize();
  return c;
}

struct Pipeline {
  Corpus corpus;
  StageResult baseline, inject, finetune;
};

/// Runs the three stages once; shared by several test cases.
const Pipeline& pipeline() {
  static const Pipeline p = [] {
    Pipeline out;
    const TrainConfig b = tiny_config(Stage::kBaseline);
    out.corpus = corpus_for(b);
    out.baseline = train_stage(b, out.corpus, std::nullopt);
    out.inject = train_stage(tiny_config(Stage::kInjectFrozen), out.corpus, out.baseline.final);
    out.finetune = train_stage(tiny_config(Stage::kFinetuneAll), out.corpus, out.inject.final);
    return out;
  }();
  return p;
}

Checkpoint checkpoint_with_value(double v) {
  ModelConfig cfg;
  cfg.feat_dim = 2;
  cfg.d_model = 4;
  cfg.enc_layers = 1;
  cfg.dec_layers = 1;
  cfg.ffn_dim = 4;
  cfg.vocab_size = 4;
  Checkpoint c;
  c.model = Model(cfg, {});
  for (Parameter* p : c.model.parameters()) p->value.fill(v);
  return c;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ACCENT_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("accent_harness_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("schedule and optimizer") {
  TEST_CASE("noam examples") {
    CHECK(noam_lr(1, 1.0, 1, 4) == 0.125);
    const double at = noam_lr(200, 2.0, 16, 200);
    CHECK(at == doctest::Approx(2.0 / 4.0 / std::sqrt(200.0)).epsilon(1e-14));
    for (std::size_t s = 1; s < 50; ++s) CHECK(noam_lr(s + 1, 1, 16, 50) > noam_lr(s, 1, 16, 50));
    for (std::size_t s = 50; s < 120; ++s) CHECK(noam_lr(s + 1, 1, 16, 50) < noam_lr(s, 1, 16, 50));
    CHECK_THROWS_AS(noam_lr(0, 1, 1, 1), ConfigError);
  }

  TEST_CASE("sgd steps trainable parameters only") {
    Parameter a("a", 1, 2, 1.0), b("b", 1, 2, 1.0);
    a.grad = Matrix(1, 2, {0.5, -1.0});
    b.grad = Matrix(1, 2, {3.0, 3.0});
    b.trainable = false;
    TrainConfig cfg;
    Optimizer opt(cfg, 2);
    opt.step({&a, &b}, 0.1);
    CHECK(a.value == Matrix(1, 2, {0.95, 1.1}));
    CHECK(b.value == Matrix(1, 2, 1.0));
  }

  TEST_CASE("momentum accumulates velocity") {
    Parameter a("a", 1, 1, 0.0);
    a.grad = Matrix(1, 1, 1.0);
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::kMomentum;
    cfg.momentum = 0.5;
    Optimizer opt(cfg, 1);
    opt.step({&a}, 1.0);
    opt.step({&a}, 1.0);
    CHECK(a.value(0, 0) == doctest::Approx(-2.5));
  }

  TEST_CASE("adam first step has the learning rate as magnitude") {
    Parameter a("a", 1, 2, 0.0);
    a.grad = Matrix(1, 2, {4.0, -0.01});
    TrainConfig cfg;
    cfg.optimizer = OptimizerKind::kAdam;
    Optimizer opt(cfg, 1);
    opt.step({&a}, 0.1);
    CHECK(a.value(0, 0) == doctest::Approx(-0.1).epsilon(1e-6));
    CHECK(a.value(0, 1) == doctest::Approx(0.1).epsilon(1e-6));
  }
}

TEST_SUITE("config") {
  TEST_CASE("tiny config resolves corpus-derived dimensions") {
    const TrainConfig c = tiny_config(Stage::kBaseline);
    CHECK(c.model.feat_dim == 3);
    CHECK(c.model.vocab_size == 6);
    CHECK(c.adapter.embed_dim == 8);
    CHECK(c.decode.max_len == 4);
    CHECK(c.epochs() == 2);
    CHECK(c.epochs_for(Stage::kFinetuneAll) == 1);
  }

  TEST_CASE("unknown key names its line") {
    std::istringstream in("train.seed = 3\n\n# comment\ntrain.sead = 4\n");
    try {
      parse_config(in);
      FAIL("expected a ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 4);
    }
  }

  TEST_CASE("malformed lines and values") {
    std::istringstream no_eq("train.seed 3\n");
    CHECK_THROWS_AS(parse_config(no_eq), ParseError);
    std::istringstream bad_num("train.base_lr = fast\n");
    CHECK_THROWS_AS(parse_config(bad_num), ParseError);
    std::istringstream bad_enum("adapter.mode = huge\n");
    CHECK_THROWS_AS(parse_config(bad_enum), ParseError);
    std::istringstream bad_flag("model.positional_encoding = maybe\n");
    CHECK_THROWS_AS(parse_config(bad_flag), ParseError);
  }

  TEST_CASE("last duplicate wins and comments are ignored") {
    std::istringstream in("train.seed = 3  # first\ntrain.seed = 9\nadapter.positions = 1, 3\n");
    const TrainConfig c = parse_config(in);
    CHECK(c.seed == 9);
    CHECK(c.adapter.positions == std::vector<int>{1, 3});
  }

  TEST_CASE("write then parse reproduces the config") {
    TrainConfig c = tiny_config(Stage::kInjectFrozen, "train.mtl_mode = soft\ncorpus.held_out = 1\n");
    const std::string text = write_config(c);
    std::istringstream in(text);
    TrainConfig back = parse_config(in);
    back.finalize();
    CHECK(write_config(back) == text);
    CHECK(back.stage == Stage::kInjectFrozen);
    CHECK(back.corpus.held_out == std::vector<std::size_t>{1});
  }

  TEST_CASE("inconsistent settings are configuration errors") {
    CHECK_THROWS_AS(tiny_config(Stage::kBaseline, "model.feat_dim = 5\n"), ConfigError);
    CHECK_THROWS_AS(tiny_config(Stage::kBaseline, "train.lambda_ctc = 1.5\n"), ConfigError);
    CHECK_THROWS_AS(tiny_config(Stage::kBaseline, "model.max_len = 2\n"), ConfigError);
    CHECK_THROWS_AS(tiny_config(Stage::kBaseline, "adapter.positions = 3\n"), ConfigError);
    CHECK_THROWS_AS(tiny_config(Stage::kBaseline, "train.batch_size = 0\n"), ConfigError);
  }

  TEST_CASE("stage spellings") {
    CHECK(parse_stage("inject-frozen") == Stage::kInjectFrozen);
    CHECK(parse_stage("inject_frozen") == Stage::kInjectFrozen);
    CHECK(parse_stage("finetune_all") == Stage::kFinetuneAll);
    CHECK(to_string(Stage::kBaseline) == "baseline");
    CHECK_THROWS(parse_stage("pretrain"));
  }
}

TEST_SUITE("checkpoint averaging") {
  TEST_CASE("single checkpoint is returned unchanged") {
    Checkpoint c = checkpoint_with_value(0.0);
    Rng rng(1);
    accent::testing::randomize(c.model.parameters(), rng);
    const Checkpoint avg = average_checkpoints({c});
    CHECK(serialize_checkpoint(avg) == serialize_checkpoint(c));
  }

  TEST_CASE("mean of zero and two is one") {
    const Checkpoint avg = average_checkpoints({checkpoint_with_value(0.0), checkpoint_with_value(2.0)});
    for (Parameter* p : const_cast<Model&>(avg.model).parameters())
      for (double v : p->value.data()) CHECK(v == 1.0);
  }

  TEST_CASE("round trip commutes with averaging") {
    Rng rng(2);
    std::vector<Checkpoint> cs;
    for (int i = 0; i < 3; ++i) {
      cs.push_back(checkpoint_with_value(0.0));
      accent::testing::randomize(cs.back().model.parameters(), rng);
    }
    std::vector<Checkpoint> reloaded;
    for (const auto& c : cs) reloaded.push_back(deserialize_checkpoint(serialize_checkpoint(c)));
    const Checkpoint a = deserialize_checkpoint(serialize_checkpoint(average_checkpoints(cs)));
    CHECK(serialize_checkpoint(a) == serialize_checkpoint(average_checkpoints(reloaded)));
  }

  TEST_CASE("architecture mismatch and empty input") {
    Checkpoint other = checkpoint_with_value(0.0);
    Rng rng(3);
    AdapterSpec spec;
    spec.mode = AdapterMode::kGated;
    spec.embed_dim = 3;
    other.model.attach_adapters(spec, rng);
    CHECK_THROWS_AS(average_checkpoints({checkpoint_with_value(0.0), other}), ConfigError);
    CHECK_THROWS(average_checkpoints({}));
  }

  TEST_CASE("last epoch files are picked in epoch order") {
    const fs::path dir = scratch("epochs");
    fs::create_directories(dir);
    for (std::size_t e : {1, 2, 3, 10, 11}) std::ofstream(dir / epoch_checkpoint_name(e)) << "{}";
    std::ofstream(dir / "final.json") << "{}";
    const auto last = last_epoch_checkpoints(dir, 3);
    REQUIRE(last.size() == 3);
    CHECK(last[0].filename() == epoch_checkpoint_name(3));
    CHECK(last[2].filename() == epoch_checkpoint_name(11));
    CHECK(last_epoch_checkpoints(dir, 9).size() == 5);
    CHECK_THROWS(last_epoch_checkpoints(dir, 0));
    fs::remove_all(dir);
  }
}

TEST_SUITE("metrics and coefficients") {
  TEST_CASE("metrics CSV layout") {
    CHECK(metrics_header() == "epoch,split,l_ctc,l_s2s,l_jca,l_mse,l_mtl,ter");
    MetricsRow r{3, "cv", 0.5, 0.25, 0.325, 0.0, 0.325, 0.125};
    CHECK(format_metrics_row(r) == "3,cv,0.5,0.25,0.32500000000000001,0,0.32500000000000001,0.125");
  }

  TEST_CASE("quartiles against a sort-based oracle") {
    CHECK(quantile_sorted({1, 2, 3, 4}, 0.25) == 1.75);
    CHECK(quantile_sorted({1, 2, 3, 4}, 0.5) == 2.5);
    CHECK(quantile_sorted({7}, 0.75) == 7.0);
    CHECK_THROWS(quantile_sorted({}, 0.5));

    Rng rng(4);
    std::uniform_real_distribution<double> u(0, 1);
    std::vector<CoefficientRow> rows;
    for (int i = 0; i < 37; ++i) {
      std::vector<double> a{u(rng), u(rng), u(rng)};
      const double s = a[0] + a[1] + a[2];
      for (double& v : a) v /= s;
      rows.push_back({"u" + std::to_string(i), i % 2 ? "A1" : "A0", {a}});
    }
    const auto summary = summarize_coefficients(rows);
    REQUIRE(summary.size() == 6);
    for (const auto& s : summary) {
      std::vector<double> v;
      for (const auto& r : rows)
        if (r.accent == s.accent) v.push_back(r.alpha.values[s.basis]);
      std::sort(v.begin(), v.end());
      auto q = [&](double p) {
        const double h = (static_cast<double>(v.size()) - 1) * p;
        const auto lo = static_cast<std::size_t>(h);
        return lo + 1 < v.size() ? v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]) : v[lo];
      };
      CHECK(s.min == v.front());
      CHECK(s.max == v.back());
      CHECK(s.q1 == q(0.25));
      CHECK(s.median == q(0.5));
      CHECK(s.q3 == q(0.75));
    }
  }

  TEST_CASE("dominant basis breaks ties toward the lower index") {
    std::vector<BasisSummary> s{{"A0", 0, 0, 0, 0.3, 0, 0}, {"A0", 1, 0, 0, 0.4, 0, 0},
                                {"A0", 2, 0, 0, 0.4, 0, 0}, {"A1", 0, 0, 0, 0.9, 0, 0}};
    CHECK(dominant_basis(s, "A0") == 1);
    CHECK(dominant_basis(s, "A1") == 0);
    CHECK_THROWS(dominant_basis(s, "A7"));
  }

  TEST_CASE("summary path") {
    CHECK(summary_path_for("out/coeffs.csv") == fs::path("out/coeffs.summary.csv"));
  }
}

TEST_SUITE("evaluation") {
  TEST_CASE("perfect scorers decode the reference") {
    const std::vector<int> ref{3, 2, 4};
    Matrix lp(7, 5, std::log(0.01));
    const int path[] = {3, 0, 2, 2, 0, 4, 0};
    for (std::size_t t = 0; t < 7; ++t) lp(t, static_cast<std::size_t>(path[t])) = std::log(0.96);
    NextTokenScorer scorer = [&](std::span<const int> prefix) {
      std::vector<double> out(5, std::log(0.01));
      const int next = prefix.size() < ref.size() ? ref[prefix.size()] : kEos;
      out[static_cast<std::size_t>(next)] = std::log(0.96);
      return out;
    };
    const auto h = joint_beam_search(scorer, lp, {10, 0.3, 4});
    CHECK(h.tokens == ref);
    CHECK(token_error_rate(ref, h.tokens) == 0.0);
  }

  TEST_CASE("parallel evaluation matches the serial reference and is deterministic") {
    const auto& p = pipeline();
    const Checkpoint& ck = p.finetune.final;
    const auto utts = prepare_utterances(ck, p.corpus.test);
    const DecodeConfig dc{4, 0.3, 4};
    const EvalResult a = evaluate(ck.model, utts, dc, 0.3, 0.01, "test");
    const EvalResult b = serial::evaluate(ck.model, utts, dc, 0.3, 0.01, "test");
    const EvalResult c = evaluate(ck.model, utts, dc, 0.3, 0.01, "test");
    CHECK(format_metrics_row(a.row) == format_metrics_row(b.row));
    CHECK(format_metrics_row(a.row) == format_metrics_row(c.row));
    REQUIRE(a.decodes.size() == b.decodes.size());
    for (std::size_t i = 0; i < a.decodes.size(); ++i) {
      CHECK(a.decodes[i].utt_id == b.decodes[i].utt_id);
      CHECK(a.decodes[i].hypothesis == b.decodes[i].hypothesis);
    }
    CHECK(std::is_sorted(a.decodes.begin(), a.decodes.end(),
                         [](const auto& x, const auto& y) { return x.utt_id < y.utt_id; }));
  }

  TEST_CASE("per-accent TER aggregates to the overall TER") {
    const auto& p = pipeline();
    const Checkpoint& ck = p.baseline.final;
    const EvalResult r = evaluate(ck.model, prepare_utterances(ck, p.corpus.test), {1, 0.3, 4}, 0.3,
                                  0.01, "test");
    std::size_t edits = 0, tokens = 0;
    for (const auto& a : r.per_accent) {
      CHECK(a.ter == static_cast<double>(a.edits) / static_cast<double>(a.ref_tokens));
      edits += a.edits;
      tokens += a.ref_tokens;
    }
    CHECK(r.row.ter == static_cast<double>(edits) / static_cast<double>(tokens));
    CHECK(r.per_accent.size() == p.corpus.spec.n_accents);
  }

  TEST_CASE("export requires coefficients") {
    const auto& p = pipeline();
    CHECK_THROWS_AS(export_coefficients(p.baseline.final, p.corpus.cv, scratch("x.csv")), UsageError);
  }
}

TEST_SUITE("staged training") {
  TEST_CASE("every metrics row satisfies the loss identities") {
    const auto& p = pipeline();
    for (const auto* s : {&p.baseline, &p.inject, &p.finetune}) {
      for (const auto& r : s->metrics) {
        const auto b = LossBreakdown::make(r.l_ctc, r.l_s2s, r.l_mse, 0.3, 0.01);
        CHECK(std::abs(b.l_jca - r.l_jca) <= 1e-12);
        CHECK(std::abs(b.l_mtl - r.l_mtl) <= 1e-12);
        CHECK(r.ter >= 0.0);
      }
    }
    CHECK(p.baseline.metrics.size() == 2 * (1 + 2));
    CHECK(p.baseline.metrics.front().epoch == 0);
    CHECK(p.baseline.epochs.size() == 2);
  }

  TEST_CASE("inject-frozen leaves every baseline parameter unchanged") {
    const auto& p = pipeline();
    Model base = p.baseline.final.model;
    Model injected = p.inject.final.model;
    std::map<std::string, Matrix> before;
    for (Parameter* q : base.parameters()) before[q->name] = q->value;
    std::size_t compared = 0;
    for (Parameter* q : injected.parameters()) {
      auto it = before.find(q->name);
      if (it == before.end()) continue;
      CHECK(q->value == it->second);
      ++compared;
    }
    CHECK(compared == before.size());
    CHECK(p.inject.frozen_grad_violations == 0);
    CHECK(p.inject.final.clusters.has_value());
    CHECK(p.inject.final.accent_clusters.size() == p.corpus.spec.n_accents);
  }

  TEST_CASE("adapter parameters do move during injection") {
    const auto& p = pipeline();
    Model injected = p.inject.final.model;
    double moved = 0;
    for (Parameter* q : injected.adapter_parameters())
      for (double v : q->value.data()) moved += std::abs(v);
    CHECK(moved > 0.0);
  }

  TEST_CASE("epoch-0 cv loss of injection equals the baseline's final cv loss") {
    const auto& p = pipeline();
    const MetricsRow& base = p.baseline.metrics.back();
    REQUIRE(base.split == "cv");
    const MetricsRow& inj = p.inject.metrics[1];
    REQUIRE(inj.split == "cv");
    CHECK(inj.epoch == 0);
    CHECK(inj.l_jca == base.l_jca);
    CHECK(inj.ter == base.ter);
  }

  TEST_CASE("stage prerequisites") {
    const auto& p = pipeline();
    CHECK_THROWS_AS(train_stage(tiny_config(Stage::kInjectFrozen), p.corpus, std::nullopt), UsageError);
    CHECK_THROWS_AS(train_stage(tiny_config(Stage::kFinetuneAll), p.corpus, p.baseline.final),
                    UsageError);
    CHECK_THROWS_AS(train_stage(tiny_config(Stage::kBaseline), p.corpus, p.inject.final), UsageError);
    CHECK_THROWS_AS(train_stage(tiny_config(Stage::kInjectFrozen, "model.d_model = 4\nmodel.n_heads = 1\n"),
                                p.corpus, p.baseline.final),
                    ConfigError);
  }

  TEST_CASE("identical config and seed reproduce checkpoints and metrics") {
    const auto& p = pipeline();
    const StageResult again = train_stage(tiny_config(Stage::kBaseline), p.corpus, std::nullopt);
    CHECK(serialize_checkpoint(again.final) == serialize_checkpoint(p.baseline.final));
    REQUIRE(again.metrics.size() == p.baseline.metrics.size());
    for (std::size_t i = 0; i < again.metrics.size(); ++i)
      CHECK(format_metrics_row(again.metrics[i]) == format_metrics_row(p.baseline.metrics[i]));
  }

  TEST_CASE("stage output directory") {
    const auto& p = pipeline();
    const fs::path dir = scratch("stage");
    write_stage(p.baseline, tiny_config(Stage::kBaseline), dir);
    CHECK(fs::exists(dir / "metrics.csv"));
    CHECK(fs::exists(dir / "final.json"));
    CHECK(fs::exists(dir / "config.txt"));
    CHECK(fs::exists(dir / epoch_checkpoint_name(2)));
    const Checkpoint back = load_checkpoint(dir / "final.json");
    CHECK(serialize_checkpoint(back) == serialize_checkpoint(p.baseline.final));
    fs::remove_all(dir);
  }

  TEST_CASE("coefficient export writes valid rows and a summary") {
    const auto& p = pipeline();
    const fs::path dir = scratch("coeffs");
    fs::create_directories(dir);
    const auto summary = export_coefficients(p.finetune.final, p.corpus.cv, dir / "c.csv");
    CHECK(summary.size() == p.corpus.spec.n_accents * 4);
    std::ifstream in(dir / "c.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "utt_id,accent,alpha_0,alpha_1,alpha_2,alpha_3");
    std::size_t n = 0;
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string cell;
      std::getline(ss, cell, ',');
      std::getline(ss, cell, ',');
      CoefficientVector a;
      while (std::getline(ss, cell, ',')) a.values.push_back(std::stod(cell));
      CHECK(a.is_valid());
      ++n;
    }
    CHECK(n == p.corpus.cv.size());
    CHECK(fs::exists(dir / "c.summary.csv"));
    fs::remove_all(dir);
  }
}

TEST_SUITE("cli") {
  TEST_CASE("missing prerequisite checkpoint is a usage error") {
    const fs::path dir = scratch("cli");
    fs::create_directories(dir);
    std::ofstream(dir / "cfg.txt") << kTinyConfig;
    CHECK(run_cli("train --config " + (dir / "cfg.txt").string() + " --stage finetune-all --out " +
                  (dir / "out").string()) == 2);
    fs::remove_all(dir);
  }

  TEST_CASE("bad invocations fail") {
    CHECK(run_cli("") != 0);
    CHECK(run_cli("eval --checkpoint x.json --split train --out y.csv") != 0);
    CHECK(run_cli("train --config /nonexistent/cfg.txt --stage baseline --out /tmp/x") != 0);
  }

  TEST_CASE("gradcheck subcommand succeeds on one module") {
    CHECK(run_cli("gradcheck --module losses --instances 2") == 0);
  }
}
