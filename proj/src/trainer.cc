#include "accent/trainer.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <omp.h>

#include "accent/errors.h"
#include "accent/losses.h"

namespace accent {

double noam_lr(std::size_t step, double base_lr, std::size_t d_model, std::size_t warmup) {
  if (step < 1) throw ConfigError("noam_lr: step must be >= 1");
  if (warmup < 1) throw ConfigError("noam_lr: warmup must be >= 1");
  const double s = static_cast<double>(step);
  const double w = static_cast<double>(warmup);
  return base_lr / std::sqrt(static_cast<double>(d_model)) *
         std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

Optimizer::Optimizer(const TrainConfig& config, std::size_t n_params)
    : kind_(config.optimizer),
      momentum_(config.momentum),
      beta1_(config.adam_beta1),
      beta2_(config.adam_beta2),
      epsilon_(config.adam_epsilon),
      m_(n_params),
      v_(n_params) {}

void Optimizer::step(const std::vector<Parameter*>& params, double lr) {
  if (params.size() != m_.size()) throw DimensionError("optimizer parameter count changed");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.trainable) continue;
    auto& w = p.value.data();
    const auto& g = p.grad.data();
    switch (kind_) {
      case OptimizerKind::kSgd:
        for (std::size_t j = 0; j < w.size(); ++j) w[j] -= lr * g[j];
        break;
      case OptimizerKind::kMomentum: {
        if (m_[i].empty()) m_[i] = Matrix(p.value.rows(), p.value.cols());
        auto& m = m_[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
          m[j] = momentum_ * m[j] + g[j];
          w[j] -= lr * m[j];
        }
        break;
      }
      case OptimizerKind::kAdam: {
        if (m_[i].empty()) {
          m_[i] = Matrix(p.value.rows(), p.value.cols());
          v_[i] = Matrix(p.value.rows(), p.value.cols());
        }
        auto& m = m_[i].data();
        auto& v = v_[i].data();
        for (std::size_t j = 0; j < w.size(); ++j) {
          m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
          v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
          w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + epsilon_);
        }
        break;
      }
    }
  }
}

UtteranceLosses accumulate_utterance_gradient(Model& model, const PreparedUtterance& u,
                                              double lambda_ctc, double gamma_mtl,
                                              double weight) {
  const ForwardPass pass = model.forward(u.features, u.tokens, u.z);
  LossWithGrad ctc = ctc_loss(pass.output.ctc_log_probs, u.tokens);
  LossWithGrad s2s = s2s_loss(pass.output.s2s_log_probs, s2s_targets(u.tokens));
  ctc.grad *= weight * lambda_ctc;
  s2s.grad *= weight * (1.0 - lambda_ctc);

  UtteranceLosses l{ctc.loss, s2s.loss, 0.0};
  std::optional<Matrix> grad_alpha;
  if (pass.alpha && u.alpha_ref) {
    const MseWithGrad mse = coeff_mse(*u.alpha_ref, *pass.alpha);
    l.l_mse = mse.loss;
    grad_alpha = Matrix::row_vector(mse.grad);
    *grad_alpha *= weight * gamma_mtl;
  }
  model.backward(pass, ctc.grad, s2s.grad, grad_alpha ? &*grad_alpha : nullptr);
  return l;
}

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

/// Most frequent cluster among each accent's training utterances.
std::map<std::string, std::size_t> majority_clusters(const ClusterModel& clusters,
                                                     const std::vector<PreparedUtterance>& utts) {
  std::map<std::string, std::vector<std::size_t>> counts;
  for (const auto& u : utts) {
    auto& c = counts[u.accent];
    if (c.empty()) c.assign(clusters.n(), 0);
    ++c[kmeans_assign(clusters, u.z)];
  }
  std::map<std::string, std::size_t> out;
  for (const auto& [accent, c] : counts)
    out[accent] = static_cast<std::size_t>(std::max_element(c.begin(), c.end()) - c.begin());
  return out;
}

/// Sets up the stage's starting checkpoint and trainability flags.
Checkpoint start_checkpoint(const TrainConfig& config, const Corpus& corpus,
                            const std::optional<Checkpoint>& init) {
  if (config.stage != Stage::kBaseline && !init) {
    throw UsageError("stage " + to_string(config.stage) +
                     " needs a previous checkpoint (--init)");
  }
  Checkpoint ckpt;
  if (init) {
    ckpt = *init;
    require(ckpt.model.config() == config.model,
            "model settings in the config differ from the initial checkpoint");
    require(ckpt.cmvn == config.cmvn, "train.cmvn differs from the initial checkpoint");
    require(ckpt.normalize_embeddings == config.normalize_embeddings,
            "train.normalize_embeddings differs from the initial checkpoint");
  } else {
    ckpt.model = Model(config.model, AdapterSpec{});
    Rng rng(config.seed);
    ckpt.model.init_baseline(rng);
    ckpt.cmvn = config.cmvn;
    ckpt.normalize_embeddings = config.normalize_embeddings;
    if (config.cmvn == CmvnMode::kGlobal) ckpt.feature_stats = compute_feature_stats(corpus.train);
  }
  ckpt.corpus_spec = config.corpus;
  ckpt.corpus_dir = config.corpus_dir;
  ckpt.lambda_ctc = config.lambda_ctc;
  ckpt.gamma_mtl = config.gamma_mtl;
  ckpt.stage = to_string(config.stage);
  ckpt.epoch = 0;

  switch (config.stage) {
    case Stage::kBaseline:
      if (ckpt.model.adapter_spec().mode != AdapterMode::kNone)
        throw UsageError("baseline stage expects an adapter-free checkpoint");
      ckpt.model.for_each_param([](Parameter& p) { p.trainable = true; });
      break;
    case Stage::kInjectFrozen: {
      if (ckpt.model.adapter_spec().mode != AdapterMode::kNone)
        throw UsageError("inject-frozen expects an adapter-free checkpoint");
      require(config.adapter.mode != AdapterMode::kNone,
              "inject-frozen needs adapter.mode other than none");
      ckpt.model.for_each_param([](Parameter& p) { p.trainable = false; });
      Rng rng(config.seed + 17);
      ckpt.model.attach_adapters(config.adapter, rng);
      for (Parameter* p : ckpt.model.adapter_parameters()) p->trainable = true;
      ckpt.clusters.reset();
      ckpt.accent_clusters.clear();
      ckpt.mtl_targets.reset();
      if (config.adapter.uses_bases() && config.mtl_mode != MtlMode::kNone) {
        const auto train = prepare_utterances(ckpt, corpus.train);
        std::vector<AccentEmbedding> points;
        for (const auto& u : train) points.push_back(u.z);
        ckpt.clusters =
            kmeans_fit(points, config.adapter.n_bases, config.seed, config.kmeans_max_iter,
                       config.kmeans_restarts);
        ckpt.accent_clusters = majority_clusters(*ckpt.clusters, train);
        ckpt.mtl_targets = config.target_spec();
      }
      break;
    }
    case Stage::kFinetuneAll:
      if (ckpt.model.adapter_spec().mode == AdapterMode::kNone)
        throw UsageError("finetune-all expects a checkpoint with adapters");
      ckpt.model.for_each_param([](Parameter& p) { p.trainable = true; });
      break;
  }
  ckpt.model.zero_grad();
  return ckpt;
}

std::size_t stage_index(Stage s) { return static_cast<std::size_t>(s); }

}  // namespace

StageResult train_stage(const TrainConfig& config, const Corpus& corpus,
                        const std::optional<Checkpoint>& init) {
  Checkpoint ckpt = start_checkpoint(config, corpus, init);
  Model& model = ckpt.model;

  const auto train = prepare_utterances(ckpt, corpus.train);
  const auto cv = prepare_utterances(ckpt, corpus.cv);
  DecodeConfig epoch_decode = config.decode;
  epoch_decode.beam = config.epoch_beam;

  StageResult result;
  auto record = [&](std::size_t epoch) {
    for (const auto* split : {&train, &cv}) {
      const std::string name = split == &train ? "train" : "cv";
      result.metrics.push_back(
          evaluate(model, *split, epoch_decode, config.lambda_ctc, config.gamma_mtl, name, epoch)
              .row);
    }
  };
  record(0);

  std::vector<Parameter*> params = model.parameters();
  Optimizer optimizer(config, params.size());
  const int threads = omp_get_max_threads();
  std::vector<Model> replicas(static_cast<std::size_t>(threads), model);
  std::vector<std::vector<Parameter*>> replica_params;
  for (auto& r : replicas) replica_params.push_back(r.parameters());

  Rng shuffle_rng(config.seed * 1000003ULL + stage_index(config.stage));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t step = 0;

  for (std::size_t epoch = 1; epoch <= config.epochs(); ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::size_t b = end - start;
      const double weight = 1.0 / static_cast<double>(b);
      for (std::size_t r = 0; r < replicas.size(); ++r)
        for (std::size_t i = 0; i < params.size(); ++i)
          if (params[i]->trainable) replica_params[r][i]->value = params[i]->value;

      // One gradient buffer per utterance, summed below in batch order, so
      // the update does not depend on how utterances map to threads.
      std::vector<std::vector<Matrix>> grads(b);
#pragma omp parallel for schedule(dynamic)
      for (long long k = 0; k < static_cast<long long>(b); ++k) {
        const auto tid = static_cast<std::size_t>(omp_get_thread_num());
        Model& rep = replicas[tid];
        rep.zero_grad();
        accumulate_utterance_gradient(rep, train[order[start + k]], config.lambda_ctc,
                                      config.gamma_mtl, weight);
        auto& g = grads[k];
        for (Parameter* p : replica_params[tid]) g.push_back(p->trainable ? p->grad : Matrix());
      }
      model.zero_grad();
      for (std::size_t k = 0; k < b; ++k)
        for (std::size_t i = 0; i < params.size(); ++i)
          if (params[i]->trainable) params[i]->accumulate(grads[k][i]);
      for (Parameter* p : params) {
        if (p->trainable) continue;
        for (double g : p->grad.data())
          if (g != 0.0) ++result.frozen_grad_violations;
      }
      ++step;
      optimizer.step(params, noam_lr(step, config.base_lr, config.model.d_model,
                                     config.warmup_steps));
    }
    record(epoch);
    ckpt.epoch = epoch;
    result.epochs.push_back(ckpt);
  }
  result.final = ckpt;
  return result;
}

Corpus corpus_for(const TrainConfig& config) {
  Corpus corpus = config.corpus_dir.empty() ? generate_corpus(config.corpus)
                                            : load_corpus(config.corpus_dir);
  if (corpus.train.empty() || corpus.cv.empty()) throw UsageError("corpus has an empty split");
  const auto& u = corpus.train.front();
  if (u.features.cols() != config.model.feat_dim)
    throw ConfigError("corpus features have " + std::to_string(u.features.cols()) +
                      " dims, model.feat_dim is " + std::to_string(config.model.feat_dim));
  if (config.adapter.mode != AdapterMode::kNone && u.embedding.dim() != config.adapter.embed_dim)
    throw ConfigError("corpus embeddings have " + std::to_string(u.embedding.dim()) +
                      " dims, adapter.embed_dim is " + std::to_string(config.adapter.embed_dim));
  return corpus;
}

void write_stage(const StageResult& result, const TrainConfig& config,
                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_metrics_csv(result.metrics, dir / "metrics.csv");
  for (const auto& c : result.epochs) save_checkpoint(c, dir / epoch_checkpoint_name(c.epoch));
  save_checkpoint(result.final, dir / "final.json");
  std::ofstream out(dir / "config.txt", std::ios::binary);
  out << write_config(config);
}

}  // namespace accent
