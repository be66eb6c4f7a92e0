// Microbenchmarks for the paths that dominate wall time: dense matmul, the
// transformer forward/backward, CKA, and clustering. Run with
// --benchmark_min_time=... to tighten noise.
#include <benchmark/benchmark.h>

#include <vector>

#include "crash/analysis.hpp"
#include "crash/checkpoint_io.hpp"
#include "crash/clustering.hpp"
#include "crash/model.hpp"
#include "crash/numerics.hpp"
#include "crash/rng.hpp"
#include "crash/tasks.hpp"

using namespace crash;

namespace {

Mat random_mat(Rng& rng, std::size_t rows, std::size_t cols) {
    Mat m(rows, cols);
    for (double& v : m.data) v = rng.gauss();
    return m;
}

ModelConfig bench_config() {
    ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_layers = 8;
    cfg.d_ff = 128;
    cfg.max_seq_len = 48;
    return cfg;
}

TaskDataset bench_task() {
    TaskSizes sizes;
    sizes.n_train = 32;
    sizes.n_eval = 8;
    sizes.n_symbols = 26;
    sizes.n_pairs = 4;
    return make_task(TaskKind::KeyValueRecall, 7, sizes);
}

void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    const Mat a = random_mat(rng, n, n);
    const Mat b = random_mat(rng, n, n);
    for (auto _ : state) {
        benchmark::DoNotOptimize(matmul(a, b));
    }
    state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) *
                            static_cast<int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->Arg(32)->Arg(64)->Arg(128);

void BM_Forward(benchmark::State& state) {
    const Checkpoint ckpt = init_checkpoint(bench_config(), 2);
    const TaskDataset task = bench_task();
    const std::vector<TokenSeq> inputs = similarity_inputs(task);
    for (auto _ : state) {
        benchmark::DoNotOptimize(forward(ckpt, inputs, false));
    }
    state.SetItemsProcessed(static_cast<int64_t>(state.iterations()) *
                            static_cast<int64_t>(inputs.size()));
}
BENCHMARK(BM_Forward);

void BM_ForwardWithTrace(benchmark::State& state) {
    const Checkpoint ckpt = init_checkpoint(bench_config(), 2);
    const TaskDataset task = bench_task();
    const std::vector<TokenSeq> inputs = similarity_inputs(task);
    for (auto _ : state) {
        benchmark::DoNotOptimize(forward(ckpt, inputs, true));
    }
}
BENCHMARK(BM_ForwardWithTrace);

void BM_LossAndGrads(benchmark::State& state) {
    const Checkpoint ckpt = init_checkpoint(bench_config(), 2);
    const TaskDataset task = bench_task();
    const LossBatch batch = make_loss_batch(task, {0, 1, 2, 3, 4, 5, 6, 7});
    FreezeMask mask;
    for (std::size_t b = 0; b < ckpt.config.n_layers; ++b) mask.learnable_blocks.insert(b);
    mask.embeddings_learnable = true;
    mask.final_ln_learnable = true;
    for (auto _ : state) {
        benchmark::DoNotOptimize(loss_and_grads(ckpt, batch, mask));
    }
}
BENCHMARK(BM_LossAndGrads);

void BM_LinearCka(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    Rng rng(3);
    const Mat x = random_mat(rng, n, 32);
    const Mat y = random_mat(rng, n, 32);
    for (auto _ : state) {
        benchmark::DoNotOptimize(linear_cka(x, y));
    }
}
BENCHMARK(BM_LinearCka)->Arg(64)->Arg(256)->Arg(1024);

void BM_SimilarityMatrix(benchmark::State& state) {
    const Checkpoint ckpt = init_checkpoint(bench_config(), 2);
    const TaskDataset task = bench_task();
    const std::vector<TokenSeq> inputs = similarity_inputs(task);
    for (auto _ : state) {
        benchmark::DoNotOptimize(
            similarity_matrix(ckpt, inputs, PoolStrategy::WeightedMean, inputs.size(), task.id));
    }
}
BENCHMARK(BM_SimilarityMatrix);

void BM_AdjacentCluster(benchmark::State& state) {
    const auto L = static_cast<std::size_t>(state.range(0));
    Rng rng(4);
    SimilarityMatrix sim;
    sim.values = Mat(L + 1, L + 1);
    for (std::size_t i = 0; i <= L; ++i) {
        sim.values.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j <= L; ++j) {
            const double v = rng.canonical();
            sim.values.at(i, j) = v;
            sim.values.at(j, i) = v;
        }
    }
    for (auto _ : state) {
        benchmark::DoNotOptimize(adjacent_cluster(sim, 2, 0, 0));
    }
}
BENCHMARK(BM_AdjacentCluster)->Arg(12)->Arg(48);

void BM_SerializeCheckpoint(benchmark::State& state) {
    const Checkpoint ckpt = init_checkpoint(bench_config(), 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(serialize_checkpoint(ckpt));
    }
}
BENCHMARK(BM_SerializeCheckpoint);

}  // namespace

BENCHMARK_MAIN();
