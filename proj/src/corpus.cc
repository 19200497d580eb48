#include "accent/corpus.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "accent/errors.h"

namespace accent {

using nlohmann::json;

void CorpusSpec::validate() const {
  if (n_accents < 1 || vocab_content < 1 || feat_dim < 1 || embed_dim < 1)
    throw ConfigError("corpus counts must be >= 1");
  if (frames_per_token < 3)
    throw ConfigError("frames_per_token must be >= 3 so every utterance is CTC-feasible");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (scale_min > scale_max || shift_min > shift_max)
    throw ConfigError("distortion ranges must be ordered");
  if (min_tokens < 1 || min_tokens > max_tokens)
    throw ConfigError("token length range must satisfy 1 <= min <= max");
  if (vocab_content < 2 && max_tokens > 1)
    throw ConfigError("multi-token utterances need at least 2 content tokens");
  if (train_size < 1 || cv_size < 1 || test_size < 1)
    throw ConfigError("split sizes must be >= 1");
  for (std::size_t a : held_out)
    if (a >= n_accents) throw ConfigError("held-out accent index out of range");
  if (held_out.size() >= n_accents) throw ConfigError("at least one accent must be seen");
}

const std::vector<Utterance>& Corpus::split(const std::string& name) const {
  if (name == "train") return train;
  if (name == "cv") return cv;
  if (name == "test") return test;
  throw UsageError("unknown split '" + name + "'");
}

std::string accent_name(std::size_t index) { return "A" + std::to_string(index); }

Matrix distort(const Corpus& corpus, const Matrix& frame, std::size_t accent) {
  const auto& d = corpus.distortions.at(accent);
  Matrix out = frame;
  for (std::size_t j = 0; j < out.cols(); ++j) out(0, j) = d.scale[j] * out(0, j) + d.shift[j];
  return out;
}

Corpus generate_corpus(const CorpusSpec& spec) {
  spec.validate();
  Corpus corpus;
  corpus.spec = spec;
  Rng rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> scale_dist(spec.scale_min, spec.scale_max);
  std::uniform_real_distribution<double> shift_dist(spec.shift_min, spec.shift_max);

  corpus.token_prototypes.resize(spec.vocab_size());
  for (std::size_t tok = 2; tok < spec.vocab_size(); ++tok) {
    Matrix p(1, spec.feat_dim);
    for (double& v : p.data()) v = normal(rng);
    corpus.token_prototypes[tok] = std::move(p);
  }
  for (std::size_t a = 0; a < spec.n_accents; ++a) {
    AccentDistortion d;
    for (std::size_t j = 0; j < spec.feat_dim; ++j) d.scale.push_back(scale_dist(rng));
    for (std::size_t j = 0; j < spec.feat_dim; ++j) d.shift.push_back(shift_dist(rng));
    corpus.distortions.push_back(std::move(d));
  }
  corpus.accent_prototypes = synth_prototypes(spec.n_accents, spec.embed_dim, spec.seed + 7919);

  std::vector<std::size_t> seen, all;
  for (std::size_t a = 0; a < spec.n_accents; ++a) {
    all.push_back(a);
    if (std::find(spec.held_out.begin(), spec.held_out.end(), a) == spec.held_out.end())
      seen.push_back(a);
  }

  std::uniform_int_distribution<std::size_t> len_dist(spec.min_tokens, spec.max_tokens);
  std::uniform_int_distribution<int> tok_dist(2, static_cast<int>(spec.vocab_size()) - 1);
  auto make = [&](const std::string& split, std::size_t index, std::size_t accent) {
    Utterance u;
    char id[64];
    std::snprintf(id, sizeof(id), "%s_%05zu", split.c_str(), index);
    u.utt_id = id;
    u.accent = accent_name(accent);
    const std::size_t len = len_dist(rng);
    while (u.tokens.size() < len) {
      const int t = tok_dist(rng);
      if (!u.tokens.empty() && u.tokens.back() == t) continue;
      u.tokens.push_back(t);
    }
    u.features = Matrix(len * spec.frames_per_token, spec.feat_dim);
    for (std::size_t i = 0; i < len; ++i) {
      const Matrix clean =
          distort(corpus, corpus.token_prototypes[static_cast<std::size_t>(u.tokens[i])], accent);
      for (std::size_t f = 0; f < spec.frames_per_token; ++f)
        for (std::size_t j = 0; j < spec.feat_dim; ++j)
          u.features(i * spec.frames_per_token + f, j) =
              clean(0, j) + spec.noise_sigma * normal(rng);
    }
    u.embedding = corpus.accent_prototypes[accent];
    for (double& v : u.embedding.values) v += spec.embed_spread * normal(rng);
    return u;
  };

  for (std::size_t i = 0; i < spec.train_size; ++i)
    corpus.train.push_back(make("train", i, seen[i % seen.size()]));
  for (std::size_t i = 0; i < spec.cv_size; ++i)
    corpus.cv.push_back(make("cv", i, seen[i % seen.size()]));
  for (std::size_t i = 0; i < spec.test_size; ++i)
    corpus.test.push_back(make("test", i, all[i % all.size()]));
  return corpus;
}

std::string to_string(CmvnMode m) {
  switch (m) {
    case CmvnMode::kUtterance: return "utterance";
    case CmvnMode::kGlobal: return "global";
    case CmvnMode::kNone: return "none";
  }
  return "none";
}

CmvnMode parse_cmvn_mode(const std::string& s) {
  if (s == "utterance") return CmvnMode::kUtterance;
  if (s == "global") return CmvnMode::kGlobal;
  if (s == "none") return CmvnMode::kNone;
  throw ConfigError("unknown cmvn mode '" + s + "'");
}

FeatureSequence cmvn(const FeatureSequence& features) {
  return apply_feature_stats(compute_feature_stats({Utterance{"", "", features, {}, {}}}),
                             features);
}

FeatureStats compute_feature_stats(const std::vector<Utterance>& utts) {
  if (utts.empty()) throw InputError("feature statistics need at least one utterance");
  const std::size_t d = utts.front().features.cols();
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  double frames = 0.0;
  for (const auto& u : utts) {
    for (std::size_t t = 0; t < u.features.rows(); ++t)
      for (std::size_t j = 0; j < d; ++j) sum[j] += u.features(t, j);
    frames += static_cast<double>(u.features.rows());
  }
  FeatureStats stats{std::vector<double>(d), std::vector<double>(d)};
  for (std::size_t j = 0; j < d; ++j) stats.mean[j] = sum[j] / frames;
  for (const auto& u : utts)
    for (std::size_t t = 0; t < u.features.rows(); ++t)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = u.features(t, j) - stats.mean[j];
        sq[j] += c * c;
      }
  for (std::size_t j = 0; j < d; ++j) stats.inv_std[j] = 1.0 / std::sqrt(sq[j] / frames + 1e-8);
  return stats;
}

FeatureSequence apply_feature_stats(const FeatureStats& stats, const FeatureSequence& features) {
  if (features.cols() != stats.mean.size())
    throw DimensionError("feature statistics cover " + std::to_string(stats.mean.size()) +
                         " dims, features have " + std::to_string(features.cols()));
  FeatureSequence out = features;
  for (std::size_t t = 0; t < out.rows(); ++t)
    for (std::size_t j = 0; j < out.cols(); ++j)
      out(t, j) = (out(t, j) - stats.mean[j]) * stats.inv_std[j];
  return out;
}

void save_split(const std::vector<Utterance>& utts, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw UsageError("cannot write " + path.string());
  for (const auto& u : utts) {
    json frames = json::array();
    for (std::size_t t = 0; t < u.features.rows(); ++t) {
      auto r = u.features.row(t);
      frames.push_back(std::vector<double>(r.begin(), r.end()));
    }
    json j = {{"utt_id", u.utt_id}, {"accent", u.accent}, {"tokens", u.tokens},
              {"features", std::move(frames)}};
    out << j.dump() << '\n';
  }
}

std::vector<Utterance> load_split(const std::filesystem::path& path,
                                  const EmbeddingTable& embeddings) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open " + path.string());
  std::vector<Utterance> utts;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      Utterance u;
      u.utt_id = j.at("utt_id").get<std::string>();
      u.accent = j.at("accent").get<std::string>();
      u.tokens = j.at("tokens").get<std::vector<int>>();
      const auto frames = j.at("features").get<std::vector<std::vector<double>>>();
      if (frames.empty() || frames.front().empty()) throw ParseError("empty features", line_no);
      u.features = Matrix(frames.size(), frames.front().size());
      for (std::size_t t = 0; t < frames.size(); ++t) {
        if (frames[t].size() != u.features.cols()) throw ParseError("ragged features", line_no);
        std::copy(frames[t].begin(), frames[t].end(), u.features.row(t).begin());
      }
      const EmbeddingRecord* rec = embeddings.find(u.utt_id);
      if (rec == nullptr) throw ParseError("no embedding for '" + u.utt_id + "'", line_no);
      u.embedding = rec->embedding;
      utts.push_back(std::move(u));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return utts;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  save_split(corpus.train, dir / "train.jsonl");
  save_split(corpus.cv, dir / "cv.jsonl");
  save_split(corpus.test, dir / "test.jsonl");
  EmbeddingTable table;
  for (const auto* split : {&corpus.train, &corpus.cv, &corpus.test})
    for (const auto& u : *split) table.add({u.utt_id, u.accent, u.embedding});
  save_embeddings(table, dir / "embeddings.csv");
}

Corpus load_corpus(const std::filesystem::path& dir) {
  const EmbeddingTable table = load_embeddings(dir / "embeddings.csv");
  Corpus corpus;
  corpus.train = load_split(dir / "train.jsonl", table);
  corpus.cv = load_split(dir / "cv.jsonl", table);
  corpus.test = load_split(dir / "test.jsonl", table);
  return corpus;
}

}  // namespace accent
