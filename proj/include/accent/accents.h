#pragma once

#include <cstdint>
#include <iosfwd>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <vector>

#include "accent/adapters.h"
#include "accent/matrix.h"

namespace accent {

struct EmbeddingRecord {
  std::string utt_id;
  std::string accent;
  AccentEmbedding embedding;
};

/// Utterance-keyed accent embeddings; ids unique, dimensions uniform.
class EmbeddingTable {
 public:
  void add(EmbeddingRecord record);
  const std::vector<EmbeddingRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  std::size_t dim() const { return records_.empty() ? 0 : records_.front().embedding.dim(); }
  const EmbeddingRecord* find(const std::string& utt_id) const;

 private:
  std::vector<EmbeddingRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct ClusterModel {
  Matrix centroids;  // n x embed_dim
  double inertia = 0.0;
  std::size_t iterations_run = 0;
  /// Inertia of each assignment step, in order; never increases.
  std::vector<double> inertia_trace;

  std::size_t n() const { return centroids.rows(); }
};

/// Lloyd's algorithm seeded by sampling n distinct points. Empty clusters
/// are re-seeded from the point farthest from its centroid. With several
/// restarts, each draws a fresh sample from the same seeded stream and the
/// run with the lowest final inertia is kept (earliest on ties); its
/// inertia_trace is that run's alone.
ClusterModel kmeans_fit(const std::vector<AccentEmbedding>& points, std::size_t n,
                        std::uint64_t seed, std::size_t max_iter = 100,
                        std::size_t restarts = 1);
ClusterModel kmeans_fit(const EmbeddingTable& table, std::size_t n, std::uint64_t seed,
                        std::size_t max_iter = 100, std::size_t restarts = 1);

/// Nearest centroid by squared Euclidean distance; ties go to the lower index.
std::size_t kmeans_assign(const ClusterModel& model, const AccentEmbedding& z);

/// Batch assignment (OpenMP) and its serial reference.
std::vector<std::size_t> kmeans_assign_all(const ClusterModel& model,
                                           const std::vector<AccentEmbedding>& points);
namespace serial {
std::vector<std::size_t> kmeans_assign_all(const ClusterModel& model,
                                           const std::vector<AccentEmbedding>& points);
}

enum class TargetMode { kHard, kUniform, kSoft };

struct TargetSpec {
  TargetMode mode = TargetMode::kHard;
  double temperature = 1.0;  // soft mode only
};

CoefficientVector make_reference_targets(const ClusterModel& model, const AccentEmbedding& z,
                                         const TargetSpec& spec);

/// Gaussian accent prototypes plus per-utterance noise; utt ids are
/// "<accent>_<index>" and accents are "A0", "A1", ...
EmbeddingTable synth_embeddings(std::size_t n_accents, std::size_t embed_dim,
                                std::size_t per_accent, double spread, std::uint64_t seed);

/// Prototype vectors used by synth_embeddings for the same arguments.
std::vector<AccentEmbedding> synth_prototypes(std::size_t n_accents, std::size_t embed_dim,
                                              std::uint64_t seed);

AccentEmbedding unit_normalized(const AccentEmbedding& z);

/// CSV with header utt_id,accent,e0,...,e{D-1}; values in 17 significant digits.
void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path);
EmbeddingTable load_embeddings(const std::filesystem::path& path);
EmbeddingTable parse_embeddings(std::istream& in);

}  // namespace accent
