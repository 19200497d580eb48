// Parallel kernels against their serial:: references.

#include <benchmark/benchmark.h>

#include "accent/accents.h"
#include "accent/config.h"
#include "accent/evaluate.h"
#include "accent/matrix.h"
#include "accent/trainer.h"

using namespace accent;

namespace {

Matrix filled(std::size_t r, std::size_t c, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Matrix m(r, c);
  for (double& v : m.data()) v = u(rng);
  return m;
}

template <Matrix (*Fn)(const Matrix&, const Matrix&)>
void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const Matrix a = filled(n, n, 1), b = filled(n, n, 2);
  for (auto _ : state) benchmark::DoNotOptimize(Fn(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

struct AssignFixture {
  ClusterModel model;
  std::vector<AccentEmbedding> points;
  AssignFixture() {
    const EmbeddingTable t = synth_embeddings(8, 256, 500, 0.3, 3);
    for (const auto& r : t.records()) points.push_back(r.embedding);
    model = kmeans_fit(points, 8, 1);
  }
};

const AssignFixture& assign_fixture() {
  static const AssignFixture f;
  return f;
}

void BM_AssignParallel(benchmark::State& state) {
  const auto& f = assign_fixture();
  for (auto _ : state) benchmark::DoNotOptimize(kmeans_assign_all(f.model, f.points));
}

void BM_AssignSerial(benchmark::State& state) {
  const auto& f = assign_fixture();
  for (auto _ : state) benchmark::DoNotOptimize(serial::kmeans_assign_all(f.model, f.points));
}

struct EvalFixture {
  Checkpoint checkpoint;
  std::vector<PreparedUtterance> utts;
  DecodeConfig decode;
  EvalFixture() {
    TrainConfig c;
    c.corpus.train_size = 40;
    c.corpus.cv_size = 40;
    c.epochs_baseline = 1;
    c.finalize();
    const Corpus corpus = corpus_for(c);
    checkpoint = train_stage(c, corpus, std::nullopt).final;
    utts = prepare_utterances(checkpoint, corpus.cv);
    decode = c.decode;
  }
};

const EvalFixture& eval_fixture() {
  static const EvalFixture f;
  return f;
}

void BM_EvaluateParallel(benchmark::State& state) {
  const auto& f = eval_fixture();
  for (auto _ : state)
    benchmark::DoNotOptimize(evaluate(f.checkpoint.model, f.utts, f.decode, 0.3, 0.01, "cv"));
}

void BM_EvaluateSerial(benchmark::State& state) {
  const auto& f = eval_fixture();
  for (auto _ : state)
    benchmark::DoNotOptimize(serial::evaluate(f.checkpoint.model, f.utts, f.decode, 0.3, 0.01, "cv"));
}

}  // namespace

BENCHMARK(BM_Matmul<matmul>)->Name("matmul/parallel")->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<serial::matmul>)->Name("matmul/serial")->Arg(64)->Arg(256);
BENCHMARK(BM_AssignParallel)->Name("kmeans_assign_all/parallel");
BENCHMARK(BM_AssignSerial)->Name("kmeans_assign_all/serial");
BENCHMARK(BM_EvaluateParallel)->Name("evaluate/parallel")->Unit(benchmark::kMillisecond);
BENCHMARK(BM_EvaluateSerial)->Name("evaluate/serial")->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
