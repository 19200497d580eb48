// Acceptance run: prints one PASS/FAIL line per criterion and exits nonzero
// if any criterion fails. Usage: acceptance [work_dir]

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "accent/accents.h"
#include "accent/adapters.h"
#include "accent/checkpoint.h"
#include "accent/config.h"
#include "accent/decode.h"
#include "accent/errors.h"
#include "accent/evaluate.h"
#include "accent/gradsuite.h"
#include "accent/losses.h"
#include "accent/model.h"
#include "accent/trainer.h"
#include "test_util.h"

using namespace accent;
using accent::testing::random_embedding;
using accent::testing::random_log_probs;
using accent::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Shared by the training criteria. Epoch counts give 20 epochs per arm.
const char* kAdaptConfig = R"(adapter.mode = combined
adapter.positions = 1,2,3,4
corpus.feat_dim = 4
corpus.vocab_content = 10
train.base_lr = 5
train.epochs_baseline = 10
train.epochs_inject = 5
train.epochs_finetune = 5
train.gamma_mtl = 0.1
)";

TrainConfig adapt_config(std::uint64_t seed, Stage stage, const std::string& extra = "") {
  std::istringstream in(std::string(kAdaptConfig) + extra + "train.seed = " + std::to_string(seed) +
                        "\ncorpus.seed = " + std::to_string(seed) + "\n");
  TrainConfig c = parse_config(in);
  c.stage = stage;
  c.finalize();
  return c;
}

struct SeedRun {
  Corpus corpus;
  StageResult baseline, inject, finetune;
  Checkpoint continued;  // baseline trained for the same total epochs
};

SeedRun run_seed(std::uint64_t seed, const std::string& extra = "", bool with_continuation = true) {
  SeedRun r;
  const TrainConfig b = adapt_config(seed, Stage::kBaseline, extra);
  r.corpus = corpus_for(b);
  r.baseline = train_stage(b, r.corpus, std::nullopt);
  r.inject = train_stage(adapt_config(seed, Stage::kInjectFrozen, extra), r.corpus, r.baseline.final);
  r.finetune = train_stage(adapt_config(seed, Stage::kFinetuneAll, extra), r.corpus, r.inject.final);
  if (with_continuation) {
    Checkpoint c = r.baseline.final;
    for (std::size_t epochs : {b.epochs_inject, b.epochs_finetune}) {
      TrainConfig cont = b;
      cont.epochs_baseline = epochs;
      c = train_stage(cont, r.corpus, c).final;
    }
    r.continued = c;
  }
  return r;
}

EvalResult eval_split(const Checkpoint& ck, const std::vector<Utterance>& split, const std::string& name,
                      const DecodeConfig& decode) {
  return evaluate(ck.model, prepare_utterances(ck, split), decode, ck.lambda_ctc, ck.gamma_mtl, name);
}

// ---------------------------------------------------------------------------

Outcome ctc_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(11);
  std::uniform_int_distribution<std::size_t> vv(2, 4), lv(1, 3);
  std::size_t checked = 0, bad = 0;
  double worst = 0;
  while (checked < 250) {
    const std::size_t v = vv(rng);
    std::uniform_int_distribution<int> tok(1, static_cast<int>(v) - 1);
    std::vector<int> labels(lv(rng));
    for (int& l : labels) l = tok(rng);
    if (ctc_min_frames(labels) > 6) continue;
    std::uniform_int_distribution<std::size_t> tv(ctc_min_frames(labels), 6);
    const Matrix lp = random_log_probs(tv(rng), v, rng);
    const double diff = std::abs(ctc_loss(lp, labels).loss - ctc_brute_force(lp, labels));
    worst = std::max(worst, diff);
    bad += diff > 1e-9;
    ++checked;
  }
  const double secs = seconds_since(t0);
  return {bad == 0 && secs < 10.0,
          fmt("%zu instances, max |diff| %.2e, %.2f s", checked, worst, secs)};
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  std::size_t checks = 0, failed = 0;
  double worst = 0;
  std::string worst_name;
  for (const auto& module : gradcheck_modules()) {
    for (const auto& r : run_gradcheck_suite(module, 20, 1)) {
      ++checks;
      failed += !r.passed;
      if (r.worst_relative_error >= worst) {
        worst = r.worst_relative_error;
        worst_name = r.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {failed == 0 && secs < 60.0,
          fmt("%zu checks (20 instances each), %zu failed, worst %.2e in %s, %.1f s", checks, failed,
              worst, worst_name.c_str(), secs)};
}

Outcome zero_init_identity() {
  const TrainConfig cfg = adapt_config(1, Stage::kBaseline);
  const Corpus corpus = corpus_for(cfg);
  Model base(cfg.model, {});
  Rng rng(5);
  base.init_baseline(rng);
  const int layers = static_cast<int>(cfg.model.enc_layers);
  std::vector<int> all(static_cast<std::size_t>(layers));
  for (int i = 0; i < layers; ++i) all[static_cast<std::size_t>(i)] = i + 1;
  const std::vector<std::vector<int>> position_sets{{1}, {(layers + 1) / 2}, all};

  std::size_t compared = 0, mismatched = 0;
  for (AdapterMode mode : {AdapterMode::kGated, AdapterMode::kMulti, AdapterMode::kCombined}) {
    for (const auto& pos : position_sets) {
      AdapterSpec spec = cfg.adapter;
      spec.mode = mode;
      spec.positions = pos;
      Model adapted = base;
      adapted.attach_adapters(spec, rng);
      for (std::size_t i = 0; i < 50; ++i) {
        const Utterance& u = corpus.train[i];
        const auto ref = base.forward(u.features, u.tokens, u.embedding).output;
        const auto out = adapted.forward(u.features, u.tokens, u.embedding).output;
        mismatched += !(ref.ctc_log_probs == out.ctc_log_probs && ref.s2s_log_probs == out.s2s_log_probs);
        ++compared;
      }
    }
  }
  return {mismatched == 0, fmt("3 modes x 3 position sets x 50 utterances, %zu of %zu differ",
                               mismatched, compared)};
}

Outcome simplex_and_permutation() {
  Rng rng(21);
  Predictor p("p", 16, {32}, 4);
  init_predictor(p, rng);
  accent::testing::randomize(accent::testing::collect(p), rng, 2.0);
  std::size_t simplex_bad = 0;
  double worst_sum = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto a = predictor_forward(random_embedding(16, rng), p);
    double s = 0;
    for (double v : a.values) {
      simplex_bad += v < 0.0;
      s += v;
    }
    worst_sum = std::max(worst_sum, std::abs(s - 1.0));
  }
  simplex_bad += worst_sum > 1e-9;

  std::size_t perm_bad = 0;
  double worst_perm = 0;
  const std::size_t d = 6, n = 4, e = 5;
  for (int inst = 0; inst < 50; ++inst) {
    Predictor q("q", e, {8}, n);
    accent::testing::randomize(accent::testing::collect(q), rng);
    MultiBasisAdapter m("m", d, 3, n, Connection::kBoth);
    accent::testing::randomize(accent::testing::collect(m), rng);
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Predictor qp = q;
    MultiBasisAdapter mp = m;
    Linear& last = qp.layers.back();
    for (std::size_t k = 0; k < n; ++k) {
      mp.bases[k] = m.bases[perm[k]];
      for (std::size_t r = 0; r < last.weight.value.rows(); ++r)
        last.weight.value(r, k) = q.layers.back().weight.value(r, perm[k]);
      last.bias.value(0, k) = q.layers.back().bias.value(0, perm[k]);
    }
    const Matrix h = random_matrix(4, d, rng);
    const AccentEmbedding z = random_embedding(e, rng);
    const double diff = max_abs_diff(multi_basis_forward(h, z, q, m).first.output,
                                     multi_basis_forward(h, z, qp, mp).first.output);
    worst_perm = std::max(worst_perm, diff);
    perm_bad += diff > 1e-12;
  }
  return {simplex_bad == 0 && perm_bad == 0,
          fmt("1000 draws, max |sum-1| %.1e; 50 permutations, max diff %.1e", worst_sum, worst_perm)};
}

Outcome kmeans_properties() {
  std::size_t increases = 0;
  for (std::uint64_t seed = 1; seed <= 100; ++seed) {
    Rng rng(seed);
    std::vector<AccentEmbedding> pts;
    for (int i = 0; i < 60; ++i) pts.push_back(random_embedding(8, rng));
    const auto m = kmeans_fit(pts, 5, seed);
    for (std::size_t i = 1; i < m.inertia_trace.size(); ++i)
      increases += m.inertia_trace[i] > m.inertia_trace[i - 1];
  }
  const auto one_d = kmeans_fit(std::vector{AccentEmbedding{{0}}, AccentEmbedding{{1}},
                                             AccentEmbedding{{10}}, AccentEmbedding{{11}}},
                                 2, 1);
  const bool exact = std::abs(one_d.inertia - 1.0) <= 1e-12;
  return {increases == 0 && exact,
          fmt("100 runs, %zu inertia increases; 1-D instance inertia %.15g", increases, one_d.inertia)};
}

/// Fixed pseudo-random next-token distribution per prefix.
class PrefixTable {
 public:
  PrefixTable(std::size_t vocab, std::uint64_t seed) : vocab_(vocab), seed_(seed) {}
  std::vector<double> operator()(std::span<const int> prefix) const {
    std::uint64_t h = seed_;
    for (int t : prefix) h = h * 1000003u + static_cast<std::uint64_t>(t) + 1;
    Rng rng(h);
    return random_log_probs(1, vocab_, rng).data();
  }

 private:
  std::size_t vocab_;
  std::uint64_t seed_;
};

Hypothesis brute_force_decode(const PrefixTable& scorer, const Matrix& lp, const DecodeConfig& cfg) {
  Hypothesis best;
  bool have = false;
  std::vector<std::vector<int>> frontier{{}};
  for (std::size_t len = 0; len <= cfg.max_len; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& seq : frontier) {
      Hypothesis h;
      h.tokens = seq;
      h.ended = true;
      for (std::size_t j = 0; j < seq.size(); ++j)
        h.s2s_score += scorer(std::span(seq).first(j))[static_cast<std::size_t>(seq[j])];
      h.s2s_score += scorer(seq)[kEos];
      if (seq.empty()) {
        for (std::size_t t = 0; t < lp.rows(); ++t) h.ctc_score += lp(t, kBlank);
      } else if (ctc_min_frames(seq) > lp.rows()) {
        h.ctc_score = -std::numeric_limits<double>::infinity();
      } else {
        h.ctc_score = -ctc_loss(lp, seq).loss;
      }
      h.joint_score = interpolate_scores(cfg.ctc_weight, h.ctc_score, h.s2s_score);
      if (!have || ranks_before(h, best)) best = h, have = true;
      for (int c = kEos + 1; c < static_cast<int>(lp.cols()); ++c) {
        auto longer = seq;
        longer.push_back(c);
        next.push_back(std::move(longer));
      }
    }
    frontier = std::move(next);
  }
  return best;
}

Outcome decoding_oracle() {
  std::size_t exhaustive_bad = 0, greedy_bad = 0;
  for (std::uint64_t seed = 1; seed <= 50; ++seed) {
    Rng rng(seed * 7 + 3);
    const Matrix lp = random_log_probs(4, 5, rng);  // blank, eos and 3 content tokens
    std::uniform_real_distribution<double> w(0, 1);
    const PrefixTable scorer(5, seed);
    const DecodeConfig full{1000, w(rng), 3};
    const auto beam = joint_beam_search(scorer, lp, full);
    const auto oracle = brute_force_decode(scorer, lp, full);
    exhaustive_bad += beam.tokens != oracle.tokens || std::abs(beam.joint_score - oracle.joint_score) > 1e-12;
    const DecodeConfig one{1, full.ctc_weight, 3};
    greedy_bad += joint_beam_search(scorer, lp, one).tokens != greedy_joint_decode(scorer, lp, one).tokens;
  }
  return {exhaustive_bad == 0 && greedy_bad == 0,
          fmt("50 instances, %zu beam/brute-force mismatches, %zu beam-1/greedy mismatches",
              exhaustive_bad, greedy_bad)};
}

// ---------------------------------------------------------------------------

struct TrainingOutcomes {
  Outcome gain, specialization;
};

TrainingOutcomes adaptation(std::vector<SeedRun>& runs) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> reductions;
  std::vector<std::size_t> matches;
  std::string gain_detail, spec_detail;
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    runs.push_back(run_seed(seed));
    const SeedRun& r = runs.back();
    const DecodeConfig decode = adapt_config(seed, Stage::kBaseline).decode;
    const double base = eval_split(r.continued, r.corpus.cv, "cv", decode).row.ter;
    const double adapted = eval_split(r.finetune.final, r.corpus.cv, "cv", decode).row.ter;
    // A baseline that is already perfect leaves nothing to reduce.
    const double red = base > 0 ? (base - adapted) / base : 0.0;
    reductions.push_back(red);
    gain_detail += fmt("%sseed %llu %.4f->%.4f (%+.0f%%)", seed > 1 ? ", " : "",
                       static_cast<unsigned long long>(seed), base, adapted, 100 * red);

    const Checkpoint& ck = r.finetune.final;
    const auto summary = summarize_coefficients(compute_coefficients(ck.model, prepare_utterances(ck, r.corpus.cv)));
    std::size_t hit = 0;
    for (const auto& [accent, cluster] : ck.accent_clusters) hit += dominant_basis(summary, accent) == cluster;
    matches.push_back(hit);
    spec_detail += fmt("%sseed %llu %zu/4", seed > 1 ? ", " : "", static_cast<unsigned long long>(seed), hit);
  }
  const double secs = seconds_since(t0);
  std::sort(reductions.begin(), reductions.end());
  std::sort(matches.begin(), matches.end());
  TrainingOutcomes out;
  out.gain = {reductions[1] >= 0.20 && secs < 600.0,
              fmt("median reduction %.1f%% (%s), %.0f s", 100 * reductions[1], gain_detail.c_str(), secs)};
  out.specialization = {matches[1] >= 3, fmt("median %zu/4 accents (%s)", matches[1], spec_detail.c_str())};
  return out;
}

Outcome held_out_accent() {
  const std::string extra = "corpus.held_out = 3\n";
  const SeedRun r = run_seed(1, extra, false);
  const Checkpoint& ck = r.finetune.final;
  const auto utts = prepare_utterances(ck, r.corpus.test);
  const EvalResult ev = evaluate(ck.model, utts, adapt_config(1, Stage::kBaseline).decode, ck.lambda_ctc,
                                 ck.gamma_mtl, "test");
  const bool finite = std::isfinite(ev.row.l_jca) && std::isfinite(ev.row.l_mtl) && std::isfinite(ev.row.ter);
  std::size_t held = 0, invalid = 0;
  for (const auto& row : compute_coefficients(ck.model, utts)) {
    if (row.accent != "A3") continue;
    ++held;
    invalid += !row.alpha.is_valid();
  }
  const auto it = std::find_if(ev.per_accent.begin(), ev.per_accent.end(),
                               [](const auto& a) { return a.accent == "A3"; });
  const bool reported = it != ev.per_accent.end() && it->ref_tokens > 0;
  return {finite && held > 0 && invalid == 0 && reported,
          fmt("A3 held out: %zu test utterances, %zu invalid coefficient vectors, TER %.4f, losses %s",
              held, invalid, reported ? it->ter : -1.0, finite ? "finite" : "non-finite")};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

Outcome reproducibility(const SeedRun& first, const fs::path& work) {
  const SeedRun second = run_seed(1, "", false);
  std::size_t files = 0, differ = 0;
  const std::pair<const StageResult*, const StageResult*> stages[] = {
      {&first.baseline, &second.baseline}, {&first.inject, &second.inject}, {&first.finetune, &second.finetune}};
  const Stage names[] = {Stage::kBaseline, Stage::kInjectFrozen, Stage::kFinetuneAll};
  for (std::size_t s = 0; s < 3; ++s) {
    const fs::path a = work / "run_a" / to_string(names[s]);
    const fs::path b = work / "run_b" / to_string(names[s]);
    const TrainConfig cfg = adapt_config(1, names[s]);
    write_stage(*stages[s].first, cfg, a);
    write_stage(*stages[s].second, cfg, b);
    for (const auto& entry : fs::directory_iterator(a)) {
      ++files;
      const fs::path other = b / entry.path().filename();
      differ += !fs::exists(other) || slurp(entry.path()) != slurp(other);
    }
  }
  return {files > 0 && differ == 0, fmt("%zu files compared across 3 stages, %zu differ", files, differ)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "accent_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  int failures = 0;
  auto report = [&](int n, const char* name, const Outcome& o) {
    std::printf("%s criterion %d (%s): %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };
  auto guarded = [](const std::function<Outcome()>& fn) {
    try {
      return fn();
    } catch (const std::exception& e) {
      return Outcome{false, std::string("exception: ") + e.what()};
    }
  };

  report(1, "ctc oracle", guarded(ctc_oracle));
  report(2, "gradient suite", guarded(gradient_suite));
  report(3, "zero-init identity", guarded(zero_init_identity));
  report(4, "simplex and permutation", guarded(simplex_and_permutation));
  report(5, "k-means", guarded(kmeans_properties));
  report(6, "decoding oracle", guarded(decoding_oracle));

  std::vector<SeedRun> runs;
  TrainingOutcomes training;
  try {
    training = adaptation(runs);
  } catch (const std::exception& e) {
    training.gain = training.specialization = {false, std::string("exception: ") + e.what()};
  }
  report(7, "adaptation gain", training.gain);
  report(8, "coefficient specialization", training.specialization);
  report(9, "held-out accent", guarded(held_out_accent));
  report(10, "reproducibility", guarded([&] {
           return runs.empty() ? Outcome{false, "no first run available"} : reproducibility(runs.front(), work);
         }));
  return failures == 0 ? 0 : 1;
}
