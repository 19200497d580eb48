#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "accent/accents.h"
#include "accent/adapters.h"
#include "accent/corpus.h"
#include "accent/decode.h"
#include "accent/model.h"

namespace accent {

enum class Stage { kBaseline, kInjectFrozen, kFinetuneAll };
enum class MtlMode { kNone, kHard, kUniform, kSoft };
enum class OptimizerKind { kSgd, kMomentum, kAdam };

std::string to_string(Stage s);
std::string to_string(MtlMode m);
std::string to_string(OptimizerKind k);
/// Accepts both "inject-frozen" and "inject_frozen" spellings.
Stage parse_stage(const std::string& s);
MtlMode parse_mtl_mode(const std::string& s);
OptimizerKind parse_optimizer(const std::string& s);

struct TrainConfig {
  Stage stage = Stage::kBaseline;
  std::size_t epochs_baseline = 20;
  std::size_t epochs_inject = 10;
  std::size_t epochs_finetune = 10;
  std::size_t batch_size = 8;
  double base_lr = 1.0;
  std::size_t warmup_steps = 200;
  double lambda_ctc = 0.3;
  double gamma_mtl = 0.01;
  MtlMode mtl_mode = MtlMode::kHard;
  double soft_temperature = 1.0;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_epsilon = 1e-9;
  std::uint64_t seed = 1;
  std::size_t avg_last = 5;
  std::size_t kmeans_max_iter = 100;
  std::size_t kmeans_restarts = 10;
  bool normalize_embeddings = false;
  CmvnMode cmvn = CmvnMode::kGlobal;

  ModelConfig model;
  AdapterSpec adapter;
  CorpusSpec corpus;
  std::string corpus_dir;  // empty: generate from `corpus`

  DecodeConfig decode;            // final evaluation
  std::size_t epoch_beam = 1;     // per-epoch metrics decoding

  std::size_t epochs() const;
  std::size_t epochs_for(Stage s) const;
  TargetSpec target_spec() const;
  /// Fills vocab/feature dims from the corpus spec and checks invariants.
  void finalize();
};

/// `key = value` lines, '#' comments. Unknown keys and malformed values are
/// ParseErrors naming the line.
TrainConfig parse_config(std::istream& in);
TrainConfig load_config(const std::filesystem::path& path);
/// Emits every key; parse_config(write_config(c)) reproduces c.
std::string write_config(const TrainConfig& config);

}  // namespace accent
