#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "accent/checkpoint.h"
#include "accent/config.h"
#include "accent/errors.h"
#include "accent/evaluate.h"
#include "accent/gradsuite.h"
#include "accent/trainer.h"

namespace fs = std::filesystem;
using namespace accent;

namespace {

int cmd_gen_corpus(const fs::path& spec_file, const fs::path& out) {
  const TrainConfig cfg = load_config(spec_file);
  const Corpus corpus = generate_corpus(cfg.corpus);
  save_corpus(corpus, out);
  std::printf("wrote %zu/%zu/%zu utterances to %s\n", corpus.train.size(), corpus.cv.size(),
              corpus.test.size(), out.c_str());
  return 0;
}

int cmd_train(const fs::path& config_file, const std::string& stage, const fs::path& out,
              const std::string& init_path) {
  TrainConfig cfg = load_config(config_file);
  cfg.stage = parse_stage(stage);
  cfg.finalize();
  std::optional<Checkpoint> init;
  if (!init_path.empty()) init = load_checkpoint(init_path);
  const Corpus corpus = corpus_for(cfg);
  const StageResult result = train_stage(cfg, corpus, init);
  write_stage(result, cfg, out);
  const MetricsRow& last = result.metrics.back();
  std::printf("%s: %zu epochs, cv l_jca %.6f ter %.4f -> %s\n", to_string(cfg.stage).c_str(),
              cfg.epochs(), last.l_jca, last.ter, out.c_str());
  return 0;
}

int cmd_avg(std::size_t last, const fs::path& in, const fs::path& out) {
  std::vector<Checkpoint> ckpts;
  for (const auto& p : last_epoch_checkpoints(in, last)) ckpts.push_back(load_checkpoint(p));
  save_checkpoint(average_checkpoints(ckpts), out);
  std::printf("averaged %zu checkpoints -> %s\n", ckpts.size(), out.c_str());
  return 0;
}

Corpus corpus_or_override(const Checkpoint& ckpt, const std::string& corpus_dir) {
  return corpus_dir.empty() ? corpus_for(ckpt) : load_corpus(corpus_dir);
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
  fs::path out = p;
  out.replace_extension();
  out += suffix;
  return out;
}

int cmd_eval(const fs::path& ckpt_path, const std::string& split, std::size_t beam,
             double ctc_weight, const fs::path& out, const std::string& corpus_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Corpus corpus = corpus_or_override(ckpt, corpus_dir);
  DecodeConfig decode;
  decode.beam = beam;
  decode.ctc_weight = ctc_weight;
  decode.max_len = ckpt.model.config().max_len;
  const auto utts = prepare_utterances(ckpt, corpus.split(split));
  const EvalResult r = evaluate(ckpt.model, utts, decode, ckpt.lambda_ctc, ckpt.gamma_mtl, split,
                                ckpt.epoch);
  write_metrics_csv({r.row}, out);
  write_accent_ter_csv(r, sibling(out, ".accents.csv"));
  write_decodes_csv(r, sibling(out, ".decodes.csv"));
  std::printf("%s: l_jca %.6f l_mtl %.6f ter %.4f\n", split.c_str(), r.row.l_jca, r.row.l_mtl,
              r.row.ter);
  for (const auto& a : r.per_accent)
    std::printf("  %-6s ter %.4f (%zu/%zu)\n", a.accent.c_str(), a.ter, a.edits, a.ref_tokens);
  return 0;
}

int cmd_export(const fs::path& ckpt_path, const std::string& split, const fs::path& out,
               const std::string& corpus_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  const Corpus corpus = corpus_or_override(ckpt, corpus_dir);
  const auto summary = export_coefficients(ckpt, corpus.split(split), out);
  std::printf("accent basis     min      q1  median      q3     max\n");
  for (const auto& s : summary)
    std::printf("%-6s %5zu  %6.3f  %6.3f  %6.3f  %6.3f  %6.3f\n", s.accent.c_str(), s.basis,
                s.min, s.q1, s.median, s.q3, s.max);
  return 0;
}

int cmd_gradcheck(const std::string& module, std::size_t instances) {
  std::vector<std::string> modules =
      module.empty() ? gradcheck_modules() : std::vector<std::string>{module};
  bool ok = true;
  for (const auto& m : modules) {
    std::map<std::string, GradCheckResult> worst;
    for (const auto& r : run_gradcheck_suite(m, instances)) {
      const std::string check = r.name.substr(0, r.name.find('#'));
      auto it = worst.find(check);
      if (it == worst.end() || r.worst_relative_error > it->second.worst_relative_error ||
          !r.passed)
        worst[check] = r;
      ok = ok && r.passed;
    }
    for (const auto& [check, r] : worst)
      std::printf("%-4s %-10s %-22s worst rel err %.3e (%s)\n", r.passed ? "ok" : "FAIL",
                  m.c_str(), check.c_str(), r.worst_relative_error, r.worst_param.c_str());
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Accent-adaptive CTC/attention speech recognition on synthetic corpora"};
  app.require_subcommand(1);

  std::string spec, out, config, stage, init, in, ckpt, split, corpus_dir, module;
  std::size_t last = 5, beam = 10, instances = 20;
  double ctc_weight = 0.3;

  auto* gen = app.add_subcommand("gen-corpus", "Generate and save a synthetic corpus");
  gen->add_option("--spec", spec, "Config file with corpus.* keys")->required();
  gen->add_option("--out", out, "Output directory")->required();

  auto* train = app.add_subcommand("train", "Run one training stage");
  train->add_option("--config", config, "Config file")->required();
  train->add_option("--stage", stage, "baseline | inject-frozen | finetune-all")->required();
  train->add_option("--out", out, "Output directory")->required();
  train->add_option("--init", init, "Checkpoint to start from");

  auto* avg = app.add_subcommand("avg", "Average the last K epoch checkpoints");
  avg->add_option("--last", last, "Number of checkpoints")->required();
  avg->add_option("--in", in, "Stage output directory")->required();
  avg->add_option("--out", out, "Output checkpoint")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--split", split, "cv | test")->required()->check(CLI::IsMember({"cv", "test"}));
  eval->add_option("--beam", beam, "Beam width")->capture_default_str();
  eval->add_option("--ctc-weight", ctc_weight, "CTC score weight")->capture_default_str();
  eval->add_option("--out", out, "Metrics CSV")->required();
  eval->add_option("--corpus", corpus_dir, "Corpus directory overriding the checkpoint's");

  auto* exp = app.add_subcommand("export-coeffs", "Export interpolation coefficients");
  exp->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  exp->add_option("--split", split, "train | cv | test")->required();
  exp->add_option("--out", out, "Coefficient CSV")->required();
  exp->add_option("--corpus", corpus_dir, "Corpus directory overriding the checkpoint's");

  auto* grad = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  grad->add_option("--module", module, "numerics | model | adapters | losses");
  grad->add_option("--instances", instances, "Seeded instances per check")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_corpus(spec, out);
    if (train->parsed()) return cmd_train(config, stage, out, init);
    if (avg->parsed()) return cmd_avg(last, in, out);
    if (eval->parsed()) return cmd_eval(ckpt, split, beam, ctc_weight, out, corpus_dir);
    if (exp->parsed()) return cmd_export(ckpt, split, out, corpus_dir);
    if (grad->parsed()) return cmd_gradcheck(module, instances);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
