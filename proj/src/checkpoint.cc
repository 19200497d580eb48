#include "accent/checkpoint.h"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "accent/errors.h"

namespace accent {
namespace {

using nlohmann::json;

json model_config_json(const ModelConfig& c) {
  return {{"feat_dim", c.feat_dim},     {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"enc_layers", c.enc_layers},
          {"dec_layers", c.dec_layers}, {"ffn_dim", c.ffn_dim},
          {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
          {"positional_encoding", c.positional_encoding}};
}

ModelConfig model_config_from(const json& j) {
  ModelConfig c;
  c.feat_dim = j.at("feat_dim");
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.enc_layers = j.at("enc_layers");
  c.dec_layers = j.at("dec_layers");
  c.ffn_dim = j.at("ffn_dim");
  c.vocab_size = j.at("vocab_size");
  c.max_len = j.at("max_len");
  c.positional_encoding = j.at("positional_encoding");
  return c;
}

json adapter_spec_json(const AdapterSpec& s) {
  return {{"mode", to_string(s.mode)},
          {"positions", s.positions},
          {"n_bases", s.n_bases},
          {"connection", to_string(s.connection)},
          {"bottleneck", s.bottleneck},
          {"embed_dim", s.embed_dim},
          {"predictor_hidden", s.predictor_hidden}};
}

AdapterSpec adapter_spec_from(const json& j) {
  AdapterSpec s;
  s.mode = parse_adapter_mode(j.at("mode").get<std::string>());
  s.positions = j.at("positions").get<std::vector<int>>();
  s.n_bases = j.at("n_bases");
  s.connection = parse_connection(j.at("connection").get<std::string>());
  s.bottleneck = j.at("bottleneck");
  s.embed_dim = j.at("embed_dim");
  s.predictor_hidden = j.at("predictor_hidden").get<std::vector<std::size_t>>();
  return s;
}

json corpus_spec_json(const CorpusSpec& s) {
  return {{"n_accents", s.n_accents},
          {"vocab_content", s.vocab_content},
          {"feat_dim", s.feat_dim},
          {"frames_per_token", s.frames_per_token},
          {"noise_sigma", s.noise_sigma},
          {"scale_min", s.scale_min},
          {"scale_max", s.scale_max},
          {"shift_min", s.shift_min},
          {"shift_max", s.shift_max},
          {"min_tokens", s.min_tokens},
          {"max_tokens", s.max_tokens},
          {"train_size", s.train_size},
          {"cv_size", s.cv_size},
          {"test_size", s.test_size},
          {"embed_dim", s.embed_dim},
          {"embed_spread", s.embed_spread},
          {"held_out", s.held_out},
          {"seed", s.seed}};
}

CorpusSpec corpus_spec_from(const json& j) {
  CorpusSpec s;
  s.n_accents = j.at("n_accents");
  s.vocab_content = j.at("vocab_content");
  s.feat_dim = j.at("feat_dim");
  s.frames_per_token = j.at("frames_per_token");
  s.noise_sigma = j.at("noise_sigma");
  s.scale_min = j.at("scale_min");
  s.scale_max = j.at("scale_max");
  s.shift_min = j.at("shift_min");
  s.shift_max = j.at("shift_max");
  s.min_tokens = j.at("min_tokens");
  s.max_tokens = j.at("max_tokens");
  s.train_size = j.at("train_size");
  s.cv_size = j.at("cv_size");
  s.test_size = j.at("test_size");
  s.embed_dim = j.at("embed_dim");
  s.embed_spread = j.at("embed_spread");
  s.held_out = j.at("held_out").get<std::vector<std::size_t>>();
  s.seed = j.at("seed");
  return s;
}

json matrix_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

Matrix matrix_from(const json& j) {
  const std::size_t rows = j.at("rows"), cols = j.at("cols");
  auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != rows * cols) throw DimensionError("checkpoint tensor size mismatch");
  return Matrix(rows, cols, std::move(data));
}

const char* target_mode_name(TargetMode m) {
  switch (m) {
    case TargetMode::kHard: return "hard";
    case TargetMode::kUniform: return "uniform";
    case TargetMode::kSoft: return "soft";
  }
  return "hard";
}

TargetMode target_mode_from(const std::string& s) {
  if (s == "hard") return TargetMode::kHard;
  if (s == "uniform") return TargetMode::kUniform;
  if (s == "soft") return TargetMode::kSoft;
  throw ConfigError("unknown target mode '" + s + "'");
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
  Model& model = const_cast<Model&>(ckpt.model);  // for_each_param is non-const; read only
  json params = json::array();
  model.for_each_param([&params](Parameter& p) {
    json t = matrix_json(p.value);
    t["name"] = p.name;
    params.push_back(std::move(t));
  });

  json j;
  j["format"] = "accent-checkpoint";
  j["version"] = kCheckpointVersion;
  j["model_config"] = model_config_json(model.config());
  j["adapter_spec"] = adapter_spec_json(model.adapter_spec());
  j["params"] = std::move(params);
  j["cmvn"] = to_string(ckpt.cmvn);
  if (ckpt.feature_stats)
    j["feature_stats"] = {{"mean", ckpt.feature_stats->mean},
                          {"inv_std", ckpt.feature_stats->inv_std}};
  j["normalize_embeddings"] = ckpt.normalize_embeddings;
  if (ckpt.clusters) {
    j["clusters"] = {{"centroids", matrix_json(ckpt.clusters->centroids)},
                     {"inertia", ckpt.clusters->inertia},
                     {"iterations_run", ckpt.clusters->iterations_run},
                     {"inertia_trace", ckpt.clusters->inertia_trace}};
  }
  j["accent_clusters"] = ckpt.accent_clusters;
  if (ckpt.mtl_targets) {
    j["mtl_targets"] = {{"mode", target_mode_name(ckpt.mtl_targets->mode)},
                        {"temperature", ckpt.mtl_targets->temperature}};
  }
  j["lambda_ctc"] = ckpt.lambda_ctc;
  j["gamma_mtl"] = ckpt.gamma_mtl;
  j["corpus_spec"] = corpus_spec_json(ckpt.corpus_spec);
  j["corpus_dir"] = ckpt.corpus_dir;
  j["stage"] = ckpt.stage;
  j["epoch"] = ckpt.epoch;
  return j.dump(1) + "\n";
}

Checkpoint deserialize_checkpoint(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("checkpoint is not valid JSON: ") + e.what(), 1);
  }
  try {
    if (j.value("format", "") != "accent-checkpoint")
      throw UsageError("not an accent checkpoint");
    if (j.at("version").get<int>() != kCheckpointVersion)
      throw UsageError("unsupported checkpoint version " + j.at("version").dump());

    Checkpoint ckpt;
    ckpt.model = Model(model_config_from(j.at("model_config")),
                       adapter_spec_from(j.at("adapter_spec")));
    const json& params = j.at("params");
    std::size_t i = 0;
    ckpt.model.for_each_param([&](Parameter& p) {
      if (i >= params.size()) throw ConfigError("checkpoint is missing parameter " + p.name);
      const json& t = params[i++];
      if (t.at("name").get<std::string>() != p.name)
        throw ConfigError("checkpoint parameter '" + t.at("name").get<std::string>() +
                          "' where '" + p.name + "' was expected");
      Matrix value = matrix_from(t);
      if (!value.same_shape(p.value))
        throw DimensionError("checkpoint parameter " + p.name + " has shape " +
                             value.shape_string() + ", expected " + p.value.shape_string());
      p.value = std::move(value);
    });
    if (i != params.size()) throw ConfigError("checkpoint has unexpected extra parameters");

    ckpt.cmvn = parse_cmvn_mode(j.at("cmvn").get<std::string>());
    if (j.contains("feature_stats")) {
      ckpt.feature_stats = FeatureStats{
          j["feature_stats"].at("mean").get<std::vector<double>>(),
          j["feature_stats"].at("inv_std").get<std::vector<double>>()};
    }
    ckpt.normalize_embeddings = j.at("normalize_embeddings");
    if (j.contains("clusters")) {
      const json& c = j["clusters"];
      ClusterModel cm;
      cm.centroids = matrix_from(c.at("centroids"));
      cm.inertia = c.at("inertia");
      cm.iterations_run = c.at("iterations_run");
      cm.inertia_trace = c.at("inertia_trace").get<std::vector<double>>();
      ckpt.clusters = std::move(cm);
    }
    ckpt.accent_clusters = j.at("accent_clusters").get<std::map<std::string, std::size_t>>();
    if (j.contains("mtl_targets")) {
      TargetSpec t;
      t.mode = target_mode_from(j["mtl_targets"].at("mode").get<std::string>());
      t.temperature = j["mtl_targets"].at("temperature");
      ckpt.mtl_targets = t;
    }
    ckpt.lambda_ctc = j.at("lambda_ctc");
    ckpt.gamma_mtl = j.at("gamma_mtl");
    ckpt.corpus_spec = corpus_spec_from(j.at("corpus_spec"));
    ckpt.corpus_dir = j.at("corpus_dir");
    ckpt.stage = j.at("stage");
    ckpt.epoch = j.at("epoch");
    return ckpt;
  } catch (const json::exception& e) {
    throw UsageError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write checkpoint " + path.string());
  out << serialize_checkpoint(ckpt);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

bool same_architecture(Model& a, Model& b) {
  if (!(a.config() == b.config())) return false;
  auto pa = a.parameters();
  auto pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (pa[i]->name != pb[i]->name || !pa[i]->value.same_shape(pb[i]->value)) return false;
  return true;
}

Checkpoint average_checkpoints(const std::vector<Checkpoint>& ckpts) {
  if (ckpts.empty()) throw ConfigError("average_checkpoints needs at least one checkpoint");
  Checkpoint out = ckpts.back();
  if (ckpts.size() == 1) return out;
  auto target = out.model.parameters();
  for (Parameter* p : target) p->value.fill(0.0);
  const double k = static_cast<double>(ckpts.size());
  for (const auto& c : ckpts) {
    Model& m = const_cast<Model&>(c.model);
    if (!same_architecture(m, out.model))
      throw ConfigError("cannot average checkpoints with different architectures");
    auto src = m.parameters();
    for (std::size_t i = 0; i < src.size(); ++i) target[i]->value += src[i]->value;
  }
  for (Parameter* p : target) p->value *= 1.0 / k;
  return out;
}

std::string epoch_checkpoint_name(std::size_t epoch) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "epoch_%03zu.json", epoch);
  return buf;
}

std::vector<std::filesystem::path> last_epoch_checkpoints(const std::filesystem::path& dir,
                                                          std::size_t k) {
  if (k < 1) throw ConfigError("avg_last must be >= 1");
  std::vector<std::filesystem::path> found;
  if (!std::filesystem::is_directory(dir)) throw UsageError("no such directory " + dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.starts_with("epoch_") && name.ends_with(".json") && name != epoch_checkpoint_name(0))
      found.push_back(entry.path());
  }
  std::sort(found.begin(), found.end());
  if (found.empty()) throw UsageError("no epoch checkpoints in " + dir.string());
  if (found.size() > k) found.erase(found.begin(), found.end() - static_cast<std::ptrdiff_t>(k));
  return found;
}

}  // namespace accent
