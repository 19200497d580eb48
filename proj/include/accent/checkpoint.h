#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "accent/accents.h"
#include "accent/corpus.h"
#include "accent/model.h"

namespace accent {

inline constexpr int kCheckpointVersion = 1;

/// Everything needed to resume training or evaluate: the model, the feature
/// and embedding preprocessing, and the clustering used for MTL targets.
struct Checkpoint {
  Model model;
  CmvnMode cmvn = CmvnMode::kGlobal;
  std::optional<FeatureStats> feature_stats;
  bool normalize_embeddings = false;
  std::optional<ClusterModel> clusters;
  /// Accent name -> cluster id holding most of that accent's utterances.
  std::map<std::string, std::size_t> accent_clusters;
  /// Reference coefficient targets; absent when training ran without MTL.
  std::optional<TargetSpec> mtl_targets;
  double lambda_ctc = 0.3;
  double gamma_mtl = 0.01;
  CorpusSpec corpus_spec;
  std::string corpus_dir;  // empty: corpus regenerated from corpus_spec
  std::string stage;
  std::size_t epoch = 0;
};

/// JSON text with sorted keys and round-trip-exact doubles, so equal
/// checkpoints serialize to identical bytes.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& text);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// True when both models have the same config and the same parameter
/// names and shapes in the same order.
bool same_architecture(Model& a, Model& b);

/// Arithmetic mean of every parameter tensor; all other fields come from
/// the last checkpoint. Throws ConfigError on an architecture mismatch.
Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts);

/// Per-epoch checkpoint file name inside a stage output directory.
std::string epoch_checkpoint_name(std::size_t epoch);
/// The last k per-epoch checkpoints in `dir`, ordered by epoch.
std::vector<std::filesystem::path> last_epoch_checkpoints(const std::filesystem::path& dir,
                                                          std::size_t k);

}  // namespace accent
