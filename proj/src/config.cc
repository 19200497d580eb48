#include "accent/config.h"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "accent/errors.h"

namespace accent {
namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::size_t to_count(const std::string& s) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  return v;
}

double to_real(const std::string& s) {
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size())
    throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("expected true/false, got '" + s + "'");
}

template <class T, class F>
std::vector<T> to_list(const std::string& s, F parse) {
  std::vector<T> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(static_cast<T>(parse(trim(item))));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define COUNT(path)                                                        \
  Field {                                                                  \
    [](TrainConfig& c, const std::string& v) { c.path = to_count(v); },    \
        [](const TrainConfig& c) { return std::to_string(c.path); }        \
  }
#define REAL(path)                                                         \
  Field {                                                                  \
    [](TrainConfig& c, const std::string& v) { c.path = to_real(v); },     \
        [](const TrainConfig& c) { return fmt_double(c.path); }            \
  }
#define FLAG(path)                                                         \
  Field {                                                                  \
    [](TrainConfig& c, const std::string& v) { c.path = to_bool(v); },     \
        [](const TrainConfig& c) { return std::string(c.path ? "true" : "false"); } \
  }
#define ENUM(path, parse)                                                  \
  Field {                                                                  \
    [](TrainConfig& c, const std::string& v) { c.path = parse(v); },       \
        [](const TrainConfig& c) { return to_string(c.path); }             \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"train.stage", ENUM(stage, parse_stage)},
      {"train.epochs_baseline", COUNT(epochs_baseline)},
      {"train.epochs_inject", COUNT(epochs_inject)},
      {"train.epochs_finetune", COUNT(epochs_finetune)},
      {"train.batch_size", COUNT(batch_size)},
      {"train.base_lr", REAL(base_lr)},
      {"train.warmup_steps", COUNT(warmup_steps)},
      {"train.lambda_ctc", REAL(lambda_ctc)},
      {"train.gamma_mtl", REAL(gamma_mtl)},
      {"train.mtl_mode", ENUM(mtl_mode, parse_mtl_mode)},
      {"train.soft_temperature", REAL(soft_temperature)},
      {"train.optimizer", ENUM(optimizer, parse_optimizer)},
      {"train.momentum", REAL(momentum)},
      {"train.adam_beta1", REAL(adam_beta1)},
      {"train.adam_beta2", REAL(adam_beta2)},
      {"train.adam_epsilon", REAL(adam_epsilon)},
      {"train.seed", COUNT(seed)},
      {"train.avg_last", COUNT(avg_last)},
      {"train.kmeans_max_iter", COUNT(kmeans_max_iter)},
      {"train.kmeans_restarts", COUNT(kmeans_restarts)},
      {"train.normalize_embeddings", FLAG(normalize_embeddings)},
      {"train.cmvn", ENUM(cmvn, parse_cmvn_mode)},
      {"model.feat_dim", COUNT(model.feat_dim)},
      {"model.d_model", COUNT(model.d_model)},
      {"model.n_heads", COUNT(model.n_heads)},
      {"model.enc_layers", COUNT(model.enc_layers)},
      {"model.dec_layers", COUNT(model.dec_layers)},
      {"model.ffn_dim", COUNT(model.ffn_dim)},
      {"model.vocab_size", COUNT(model.vocab_size)},
      {"model.max_len", COUNT(model.max_len)},
      {"model.positional_encoding", FLAG(model.positional_encoding)},
      {"adapter.mode", ENUM(adapter.mode, parse_adapter_mode)},
      {"adapter.positions",
       Field{[](TrainConfig& c, const std::string& v) {
               c.adapter.positions = to_list<int>(v, to_count);
             },
             [](const TrainConfig& c) { return join(c.adapter.positions); }}},
      {"adapter.n_bases", COUNT(adapter.n_bases)},
      {"adapter.connection", ENUM(adapter.connection, parse_connection)},
      {"adapter.bottleneck", COUNT(adapter.bottleneck)},
      {"adapter.embed_dim", COUNT(adapter.embed_dim)},
      {"adapter.predictor_hidden",
       Field{[](TrainConfig& c, const std::string& v) {
               c.adapter.predictor_hidden = to_list<std::size_t>(v, to_count);
             },
             [](const TrainConfig& c) { return join(c.adapter.predictor_hidden); }}},
      {"corpus.n_accents", COUNT(corpus.n_accents)},
      {"corpus.vocab_content", COUNT(corpus.vocab_content)},
      {"corpus.feat_dim", COUNT(corpus.feat_dim)},
      {"corpus.frames_per_token", COUNT(corpus.frames_per_token)},
      {"corpus.noise_sigma", REAL(corpus.noise_sigma)},
      {"corpus.scale_min", REAL(corpus.scale_min)},
      {"corpus.scale_max", REAL(corpus.scale_max)},
      {"corpus.shift_min", REAL(corpus.shift_min)},
      {"corpus.shift_max", REAL(corpus.shift_max)},
      {"corpus.min_tokens", COUNT(corpus.min_tokens)},
      {"corpus.max_tokens", COUNT(corpus.max_tokens)},
      {"corpus.train_size", COUNT(corpus.train_size)},
      {"corpus.cv_size", COUNT(corpus.cv_size)},
      {"corpus.test_size", COUNT(corpus.test_size)},
      {"corpus.embed_dim", COUNT(corpus.embed_dim)},
      {"corpus.embed_spread", REAL(corpus.embed_spread)},
      {"corpus.held_out",
       Field{[](TrainConfig& c, const std::string& v) {
               c.corpus.held_out = to_list<std::size_t>(v, to_count);
             },
             [](const TrainConfig& c) { return join(c.corpus.held_out); }}},
      {"corpus.seed", COUNT(corpus.seed)},
      {"data.corpus_dir",
       Field{[](TrainConfig& c, const std::string& v) { c.corpus_dir = v; },
             [](const TrainConfig& c) { return c.corpus_dir; }}},
      {"decode.beam", COUNT(decode.beam)},
      {"decode.ctc_weight", REAL(decode.ctc_weight)},
      {"decode.epoch_beam", COUNT(epoch_beam)},
  };
  return table;
}

#undef COUNT
#undef REAL
#undef FLAG
#undef ENUM

}  // namespace

std::string to_string(Stage s) {
  switch (s) {
    case Stage::kBaseline: return "baseline";
    case Stage::kInjectFrozen: return "inject-frozen";
    case Stage::kFinetuneAll: return "finetune-all";
  }
  return "baseline";
}

std::string to_string(MtlMode m) {
  switch (m) {
    case MtlMode::kNone: return "none";
    case MtlMode::kHard: return "hard";
    case MtlMode::kUniform: return "uniform";
    case MtlMode::kSoft: return "soft";
  }
  return "none";
}

std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::kSgd: return "sgd";
    case OptimizerKind::kMomentum: return "momentum";
    case OptimizerKind::kAdam: return "adam";
  }
  return "sgd";
}

Stage parse_stage(const std::string& s) {
  if (s == "baseline") return Stage::kBaseline;
  if (s == "inject-frozen" || s == "inject_frozen") return Stage::kInjectFrozen;
  if (s == "finetune-all" || s == "finetune_all") return Stage::kFinetuneAll;
  throw ConfigError("unknown stage '" + s + "'");
}

MtlMode parse_mtl_mode(const std::string& s) {
  if (s == "none") return MtlMode::kNone;
  if (s == "hard") return MtlMode::kHard;
  if (s == "uniform") return MtlMode::kUniform;
  if (s == "soft") return MtlMode::kSoft;
  throw ConfigError("unknown mtl mode '" + s + "'");
}

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::kSgd;
  if (s == "momentum") return OptimizerKind::kMomentum;
  if (s == "adam") return OptimizerKind::kAdam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

std::size_t TrainConfig::epochs_for(Stage s) const {
  switch (s) {
    case Stage::kBaseline: return epochs_baseline;
    case Stage::kInjectFrozen: return epochs_inject;
    case Stage::kFinetuneAll: return epochs_finetune;
  }
  return epochs_baseline;
}

std::size_t TrainConfig::epochs() const { return epochs_for(stage); }

TargetSpec TrainConfig::target_spec() const {
  TargetSpec t;
  t.temperature = soft_temperature;
  switch (mtl_mode) {
    case MtlMode::kUniform: t.mode = TargetMode::kUniform; break;
    case MtlMode::kSoft: t.mode = TargetMode::kSoft; break;
    default: t.mode = TargetMode::kHard; break;
  }
  return t;
}

void TrainConfig::finalize() {
  auto derive = [](std::size_t& field, std::size_t value, const char* name) {
    if (field == 0) {
      field = value;
    } else if (field != value) {
      throw ConfigError(std::string(name) + " = " + std::to_string(field) +
                        " disagrees with the corpus (" + std::to_string(value) + ")");
    }
  };
  derive(model.feat_dim, corpus.feat_dim, "model.feat_dim");
  derive(model.vocab_size, corpus.vocab_size(), "model.vocab_size");
  derive(adapter.embed_dim, corpus.embed_dim, "adapter.embed_dim");
  if (model.max_len < corpus.max_tokens)
    throw ConfigError("model.max_len must cover corpus.max_tokens");
  if (decode.max_len == 0 || decode.max_len > model.max_len) decode.max_len = model.max_len;
  if (epochs() < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
  if (!(lambda_ctc >= 0.0 && lambda_ctc <= 1.0)) throw ConfigError("lambda_ctc must lie in [0, 1]");
  if (!(gamma_mtl >= 0.0)) throw ConfigError("gamma_mtl must be >= 0");
  if (mtl_mode == MtlMode::kSoft && !(soft_temperature > 0.0))
    throw ConfigError("soft_temperature must be > 0");
  if (epoch_beam < 1) throw ConfigError("decode.epoch_beam must be >= 1");
  if (kmeans_restarts < 1) throw ConfigError("train.kmeans_restarts must be >= 1");
  model.validate();
  corpus.validate();
  decode.validate();
  adapter.validate(model.enc_layers);
}

TrainConfig parse_config(std::istream& in) {
  TrainConfig cfg;
  cfg.model.feat_dim = 0;
  cfg.model.vocab_size = 0;
  cfg.adapter.embed_dim = 0;
  cfg.decode.max_len = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected 'key = value'", line_no);
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = fields().find(key);
    if (it == fields().end()) throw ParseError("unknown key '" + key + "'", line_no);
    try {
      it->second.set(cfg, value);
    } catch (const ConfigError& e) {
      throw ParseError(key + ": " + e.what(), line_no);
    }
  }
  return cfg;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config " + path.string());
  return parse_config(in);
}

std::string write_config(const TrainConfig& config) {
  std::string out;
  for (const auto& [key, field] : fields()) out += key + " = " + field.get(config) + "\n";
  return out;
}

}  // namespace accent
