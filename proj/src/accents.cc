#include "accent/accents.h"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "accent/errors.h"
#include "accent/layers.h"

namespace accent {
namespace {

double squared_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

void check_dim(const ClusterModel& model, const AccentEmbedding& z) {
  if (z.dim() != model.centroids.cols()) {
    throw DimensionError("embedding has " + std::to_string(z.dim()) +
                         " dims, centroids have " + std::to_string(model.centroids.cols()));
  }
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void EmbeddingTable::add(EmbeddingRecord record) {
  if (find(record.utt_id) != nullptr)
    throw InputError("duplicate utt_id '" + record.utt_id + "'");
  if (!records_.empty() && record.embedding.dim() != dim())
    throw InputError("embedding for '" + record.utt_id + "' has " +
                     std::to_string(record.embedding.dim()) + " dims, table has " +
                     std::to_string(dim()));
  index_.emplace(record.utt_id, records_.size());
  records_.push_back(std::move(record));
}

const EmbeddingRecord* EmbeddingTable::find(const std::string& utt_id) const {
  auto it = index_.find(utt_id);
  return it == index_.end() ? nullptr : &records_[it->second];
}

std::size_t kmeans_assign(const ClusterModel& model, const AccentEmbedding& z) {
  check_dim(model, z);
  std::size_t best = 0;
  double best_d = squared_distance(model.centroids.row(0), z.values);
  for (std::size_t k = 1; k < model.n(); ++k) {
    const double d = squared_distance(model.centroids.row(k), z.values);
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

std::vector<std::size_t> kmeans_assign_all(const ClusterModel& model,
                                           const std::vector<AccentEmbedding>& points) {
  std::vector<std::size_t> out(points.size());
  const long long n = static_cast<long long>(points.size());
#pragma omp parallel for schedule(static) if (n >= 256)
  for (long long i = 0; i < n; ++i) out[i] = kmeans_assign(model, points[i]);
  return out;
}

namespace serial {
std::vector<std::size_t> kmeans_assign_all(const ClusterModel& model,
                                           const std::vector<AccentEmbedding>& points) {
  std::vector<std::size_t> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(kmeans_assign(model, p));
  return out;
}
}  // namespace serial

namespace {

/// One Lloyd run from the centroids already in `model`.
void lloyd(const std::vector<AccentEmbedding>& points, ClusterModel& model,
           std::size_t max_iter) {
  const std::size_t n = model.n(), dim = model.centroids.cols();
  std::vector<std::size_t> assign, previous;
  auto assign_step = [&] {
    assign = kmeans_assign_all(model, points);
    double inertia = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i)
      inertia += squared_distance(model.centroids.row(assign[i]), points[i].values);
    model.inertia = inertia;
    model.inertia_trace.push_back(inertia);
  };

  assign_step();
  while (model.iterations_run < max_iter) {
    // Update step.
    Matrix sums(n, dim);
    std::vector<std::size_t> counts(n, 0);
    for (std::size_t i = 0; i < points.size(); ++i) {
      auto row = sums.row(assign[i]);
      for (std::size_t j = 0; j < dim; ++j) row[j] += points[i].values[j];
      ++counts[assign[i]];
    }
    std::vector<bool> taken(points.size(), false);
    for (std::size_t k = 0; k < n; ++k) {
      auto c = model.centroids.row(k);
      if (counts[k] > 0) {
        for (std::size_t j = 0; j < dim; ++j)
          c[j] = sums(k, j) / static_cast<double>(counts[k]);
        continue;
      }
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < points.size(); ++i) {
        if (taken[i]) continue;
        const double d = squared_distance(model.centroids.row(assign[i]), points[i].values);
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      taken[far] = true;
      std::copy(points[far].values.begin(), points[far].values.end(), c.begin());
    }
    ++model.iterations_run;
    previous = assign;
    assign_step();
    if (assign == previous) break;
  }
}

}  // namespace

ClusterModel kmeans_fit(const std::vector<AccentEmbedding>& points, std::size_t n,
                        std::uint64_t seed, std::size_t max_iter, std::size_t restarts) {
  if (n < 1) throw ConfigError("kmeans: cluster count must be >= 1");
  if (restarts < 1) throw ConfigError("kmeans: restarts must be >= 1");
  if (points.size() < n)
    throw InputError("kmeans: " + std::to_string(points.size()) + " points for " +
                     std::to_string(n) + " clusters");
  const std::size_t dim = points.front().dim();
  for (const auto& p : points)
    if (p.dim() != dim) throw DimensionError("kmeans: points have unequal dimensions");

  Rng rng(seed);
  std::vector<std::size_t> order(points.size());
  std::iota(order.begin(), order.end(), 0);
  ClusterModel best;
  for (std::size_t r = 0; r < restarts; ++r) {
    std::shuffle(order.begin(), order.end(), rng);
    ClusterModel model;
    model.centroids = Matrix(n, dim);
    for (std::size_t k = 0; k < n; ++k)
      std::copy(points[order[k]].values.begin(), points[order[k]].values.end(),
                model.centroids.row(k).begin());
    lloyd(points, model, max_iter);
    if (r == 0 || model.inertia < best.inertia) best = std::move(model);
  }
  return best;
}

ClusterModel kmeans_fit(const EmbeddingTable& table, std::size_t n, std::uint64_t seed,
                        std::size_t max_iter, std::size_t restarts) {
  std::vector<AccentEmbedding> points;
  points.reserve(table.size());
  for (const auto& r : table.records()) points.push_back(r.embedding);
  return kmeans_fit(points, n, seed, max_iter, restarts);
}

CoefficientVector make_reference_targets(const ClusterModel& model, const AccentEmbedding& z,
                                         const TargetSpec& spec) {
  check_dim(model, z);
  const std::size_t n = model.n();
  CoefficientVector out{std::vector<double>(n, 0.0)};
  switch (spec.mode) {
    case TargetMode::kHard:
      out.values[kmeans_assign(model, z)] = 1.0;
      break;
    case TargetMode::kUniform:
      std::fill(out.values.begin(), out.values.end(), 1.0 / static_cast<double>(n));
      break;
    case TargetMode::kSoft: {
      if (!(spec.temperature > 0.0))
        throw ConfigError("soft targets need a positive temperature");
      Matrix logits(1, n);
      for (std::size_t k = 0; k < n; ++k)
        logits(0, k) = -squared_distance(model.centroids.row(k), z.values) / spec.temperature;
      out.values = row_softmax(logits).data();
      break;
    }
  }
  return out;
}

std::vector<AccentEmbedding> synth_prototypes(std::size_t n_accents, std::size_t embed_dim,
                                              std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<AccentEmbedding> protos(n_accents);
  for (auto& p : protos) {
    p.values.resize(embed_dim);
    for (double& v : p.values) v = normal(rng);
  }
  return protos;
}

EmbeddingTable synth_embeddings(std::size_t n_accents, std::size_t embed_dim,
                                std::size_t per_accent, double spread, std::uint64_t seed) {
  if (n_accents < 1 || embed_dim < 1 || per_accent < 1)
    throw ConfigError("synth_embeddings: counts must be >= 1");
  const auto protos = synth_prototypes(n_accents, embed_dim, seed);
  Rng rng(seed + 1);
  std::normal_distribution<double> normal(0.0, 1.0);
  EmbeddingTable table;
  for (std::size_t a = 0; a < n_accents; ++a) {
    const std::string accent = "A" + std::to_string(a);
    for (std::size_t i = 0; i < per_accent; ++i) {
      AccentEmbedding z = protos[a];
      for (double& v : z.values) v += spread * normal(rng);
      table.add({accent + "_" + std::to_string(i), accent, std::move(z)});
    }
  }
  return table;
}

AccentEmbedding unit_normalized(const AccentEmbedding& z) {
  double norm = 0.0;
  for (double v : z.values) norm += v * v;
  norm = std::sqrt(norm);
  AccentEmbedding out = z;
  if (norm > 0.0)
    for (double& v : out.values) v /= norm;
  return out;
}

void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  out << "utt_id,accent";
  for (std::size_t j = 0; j < table.dim(); ++j) out << ",e" << j;
  out << '\n';
  for (const auto& r : table.records()) {
    out << r.utt_id << ',' << r.accent;
    for (double v : r.embedding.values) out << ',' << format_double(v);
    out << '\n';
  }
}

EmbeddingTable parse_embeddings(std::istream& in) {
  std::string line;
  std::size_t line_no = 1;
  if (!std::getline(in, line)) throw ParseError("missing header", line_no);
  const auto header = split_csv(line);
  if (header.size() < 3 || header[0] != "utt_id" || header[1] != "accent")
    throw ParseError("header must be utt_id,accent,e0,...", line_no);
  for (std::size_t j = 2; j < header.size(); ++j)
    if (header[j] != "e" + std::to_string(j - 2))
      throw ParseError("unexpected header column '" + header[j] + "'", line_no);
  const std::size_t columns = header.size();

  EmbeddingTable table;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_csv(line);
    if (fields.size() != columns)
      throw ParseError("expected " + std::to_string(columns) + " columns, found " +
                           std::to_string(fields.size()),
                       line_no);
    EmbeddingRecord rec{fields[0], fields[1], {}};
    if (rec.utt_id.empty()) throw ParseError("empty utt_id", line_no);
    for (std::size_t j = 2; j < fields.size(); ++j) {
      double v = 0.0;
      const auto& f = fields[j];
      auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), v);
      if (ec != std::errc() || ptr != f.data() + f.size() || !std::isfinite(v))
        throw ParseError("bad number '" + f + "'", line_no);
      rec.embedding.values.push_back(v);
    }
    try {
      table.add(std::move(rec));
    } catch (const InputError& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return table;
}

EmbeddingTable load_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  return parse_embeddings(in);
}

}  // namespace accent
