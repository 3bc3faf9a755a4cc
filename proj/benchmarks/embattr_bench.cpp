#include <benchmark/benchmark.h>

#include <numeric>

#include "embattr/constraint.hpp"
#include "embattr/models.hpp"
#include "embattr/scores.hpp"
#include "embattr/synthdigits.hpp"

using namespace embattr;

namespace {

Tensor conv_input(std::int64_t b, std::int64_t c, std::int64_t hw) {
    Rng rng(1);
    return Tensor::normal({b, c, hw, hw}, rng);
}

void BM_Conv2dForward(benchmark::State& state) {
    Tensor x = conv_input(64, 8, 28);
    Rng rng(2);
    Tensor w = Tensor::normal({4, 8, 5, 5}, rng);
    for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, 1, 2));
}
BENCHMARK(BM_Conv2dForward)->Unit(benchmark::kMillisecond);

void BM_Conv2dBackward(benchmark::State& state) {
    Tensor x = conv_input(64, 8, 28);
    x.set_requires_grad(true);
    Rng rng(2);
    Tensor w = Tensor::normal({4, 8, 5, 5}, rng);
    w.set_requires_grad(true);
    for (auto _ : state) {
        Tensor loss = sum(square(conv2d(x, w, 1, 2)));
        benchmark::DoNotOptimize(grad(loss, std::vector<Tensor>{x, w}));
    }
}
BENCHMARK(BM_Conv2dBackward)->Unit(benchmark::kMillisecond);

struct TrainFixture {
    Dataset data = synth_digits(256, 7);
    Network net = build_model({ModelName::ConstrainedAe, 10, 1});
    std::vector<Tensor*> params;
    std::vector<Tensor> wrt;
    Tensor xb;
    std::vector<int> yb;
    Adam adam{1e-3};
    Rng noise{3};

    TrainFixture() {
        net.set_trainable(true);
        params = net.parameters();
        for (auto* p : params) wrt.push_back(*p);
        std::vector<int> idx(64);
        std::iota(idx.begin(), idx.end(), 0);
        xb = data.batch(idx);
        yb = data.batch_labels(idx);
    }
};

void BM_TrainingStep(benchmark::State& state) {
    TrainFixture f;
    ConstraintCfg cc;
    for (auto _ : state) {
        Tensor loss = constrained_loss(f.net, f.xb, f.yb, cc, false, f.noise);
        auto grads = grad(loss, f.wrt);
        f.adam.step(f.params, grads);
    }
}
BENCHMARK(BM_TrainingStep)->Unit(benchmark::kMillisecond);

void BM_ConstrainedStep(benchmark::State& state) {
    TrainFixture f;
    ConstraintCfg cc;
    cc.lambda1 = 0.1;
    cc.lambda2 = 0.1;
    for (auto _ : state) {
        Tensor loss = constrained_loss(f.net, f.xb, f.yb, cc, true, f.noise);
        auto grads = grad(loss, f.wrt);
        f.adam.step(f.params, grads);
    }
}
BENCHMARK(BM_ConstrainedStep)->Unit(benchmark::kMillisecond);

void BM_AttributionStack(benchmark::State& state) {
    Dataset data = synth_digits(32, 9);
    Network net = build_model({ModelName::ConstrainedAe, 10, 1});
    std::vector<int> idx(25);
    std::iota(idx.begin(), idx.end(), 0);
    Tensor xb = data.batch(idx);
    for (auto _ : state)
        benchmark::DoNotOptimize(
            attribute_batch(net, xb, 1, SaliencyMethod::VanillaGradients, {}));
}
BENCHMARK(BM_AttributionStack)->Unit(benchmark::kMillisecond);

void BM_NoiseScore(benchmark::State& state) {
    Dataset data = synth_digits(4, 11);
    Network net = build_model({ModelName::ConstrainedAe, 10, 1});
    ScoreConfig cfg;
    cfg.seed = 5;
    Tensor x = data.image(0);
    for (auto _ : state) benchmark::DoNotOptimize(noise_score(net, x, 1, cfg, 0));
}
BENCHMARK(BM_NoiseScore)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
