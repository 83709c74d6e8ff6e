#include <benchmark/benchmark.h>

#include <random>

#include "coattn/data.hpp"
#include "coattn/encoders.hpp"
#include "coattn/nn.hpp"
#include "coattn/tasks.hpp"

using namespace coattn;

static void BM_Matmul64(benchmark::State& state) {
    std::mt19937_64 rng(1);
    Tensor a = rand_uniform({8, 64, 64}, rng, -1, 1);
    Tensor b = rand_uniform({8, 64, 64}, rng, -1, 1);
    for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
}
BENCHMARK(BM_Matmul64);

static void BM_Conv3dDeskVisual(benchmark::State& state) {
    std::mt19937_64 rng(2);
    Tensor x = rand_uniform({8, 8, 32, 32, 3}, rng, 0, 1);
    Conv3dSpec spec{16, {3, 3, 3}, {1, 2, 2}, {1, 1, 1}, true};
    Tensor w = rand_uniform({3, 3, 3, 3, 16}, rng, -0.3, 0.3);
    Tensor b = zeros({16});
    for (auto _ : state) benchmark::DoNotOptimize(conv3d(x, spec, w, b));
}
BENCHMARK(BM_Conv3dDeskVisual);

static void BM_StackForward(benchmark::State& state) {
    CoAttentionConfig cfg;
    std::mt19937_64 rng(3);
    ParamRegistry params;
    CoAttentionStack stack = CoAttentionStack::init(cfg, rng, params);
    StreamFeatures f{rand_uniform({8, 32, 64}, rng, -1, 1), rand_uniform({8, 64, 64}, rng, -1, 1)};
    for (auto _ : state) benchmark::DoNotOptimize(stack.forward(f));
}
BENCHMARK(BM_StackForward);

static void BM_DeskForwardEval(benchmark::State& state) {
    AvsModel model = AvsModel::init(ModelConfig::desk(), 4);
    std::mt19937_64 rng(5);
    Tensor audio = randn({8, 4096, 2}, rng, 0.2);
    Tensor frames = rand_uniform({8, 8, 32, 32, 3}, rng, 0, 1);
    for (auto _ : state) benchmark::DoNotOptimize(model.forward(audio, frames, Mode::eval));
}
BENCHMARK(BM_DeskForwardEval);

static void BM_DeskTrainStep(benchmark::State& state) {
    AvsModel model = AvsModel::init(ModelConfig::desk(), 6);
    std::mt19937_64 rng(7);
    Tensor audio = randn({8, 4096, 2}, rng, 0.2);
    Tensor frames = rand_uniform({8, 8, 32, 32, 3}, rng, 0, 1);
    std::vector<int64_t> labels = {0, 1, 0, 1, 0, 1, 0, 1};
    Optimizer opt({OptKind::sgd_momentum, 0.01, 0.9});
    for (auto _ : state) {
        model.params().zero_grad();
        Tape tape;
        AvsForwardOut out = model.forward(audio, frames, Mode::train, &rng);
        Tensor loss = cross_entropy_logits(out.logits, labels);
        backward(loss);
        opt.step(model.params());
        benchmark::DoNotOptimize(loss.item());
    }
}
BENCHMARK(BM_DeskTrainStep);

static void BM_RenderSample(benchmark::State& state) {
    DataGenConfig cfg;
    cfg.seed = 8;
    int64_t i = 0;
    for (auto _ : state) benchmark::DoNotOptimize(generate_sample(cfg, i++));
}
BENCHMARK(BM_RenderSample);

BENCHMARK_MAIN();
