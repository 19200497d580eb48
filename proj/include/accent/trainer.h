#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "accent/checkpoint.h"
#include "accent/config.h"
#include "accent/evaluate.h"

namespace accent {

/// base_lr * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5); step >= 1.
double noam_lr(std::size_t step, double base_lr, std::size_t d_model, std::size_t warmup);

/// Applies one update to the trainable parameters of a fixed parameter list.
class Optimizer {
 public:
  Optimizer(const TrainConfig& config, std::size_t n_params);
  void step(const std::vector<Parameter*>& params, double lr);

 private:
  OptimizerKind kind_;
  double momentum_, beta1_, beta2_, epsilon_;
  std::size_t t_ = 0;
  std::vector<Matrix> m_, v_;
};

/// Adds the gradient of lambda*L_ctc + (1-lambda)*L_s2s + gamma*L_mse for
/// one utterance, scaled by `weight`, into the model's accumulators.
UtteranceLosses accumulate_utterance_gradient(Model& model, const PreparedUtterance& u,
                                              double lambda_ctc, double gamma_mtl,
                                              double weight);

struct StageResult {
  Checkpoint final;
  std::vector<Checkpoint> epochs;  // index e holds the checkpoint after epoch e+1
  std::vector<MetricsRow> metrics;  // epoch 0 first, then train/cv per epoch
  /// Nonzero gradient entries seen on frozen parameters after any batch.
  std::size_t frozen_grad_violations = 0;
};

/// Runs one training stage. Baseline starts fresh unless `init` is given;
/// the other stages require `init` (UsageError otherwise).
StageResult train_stage(const TrainConfig& config, const Corpus& corpus,
                        const std::optional<Checkpoint>& init);

/// The corpus described by a config: loaded from corpus_dir when set,
/// otherwise generated from the corpus spec.
Corpus corpus_for(const TrainConfig& config);

/// Writes metrics.csv, one checkpoint per epoch, final.json and the
/// resolved config into `dir`.
void write_stage(const StageResult& result, const TrainConfig& config,
                 const std::filesystem::path& dir);

}  // namespace accent
