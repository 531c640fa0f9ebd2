// OpenMP kernels against the serial reference on one default-sized batch
// (8 images of 12x12 pixels, default model).

#include "cs2k/kernels.hpp"
#include "cs2k/rng.hpp"

#include <benchmark/benchmark.h>
#include <omp.h>

using namespace cs2k;

namespace {

struct Setup {
    Model model;
    Tensor x;
    std::vector<int> labels;
};

Setup make_setup(std::size_t rows) {
    ModelConfig cfg;
    SeededRandom rng(1);
    Setup s{Model(cfg, 5, rng), Tensor({rows, cfg.input_dim}), std::vector<int>(rows)};
    for (auto& v : s.x.data()) v = rng.normal();
    for (auto& y : s.labels) y = static_cast<int>(rng.below(5));
    return s;
}

constexpr std::size_t kRows = 8 * 12 * 12;

void BM_forward_reference(benchmark::State& state) {
    const Setup s = make_setup(kRows);
    for (auto _ : state) benchmark::DoNotOptimize(reference::forward(s.model, s.x));
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kRows));
}

void BM_forward_kernels(benchmark::State& state) {
    omp_set_num_threads(static_cast<int>(state.range(0)));
    const Setup s = make_setup(kRows);
    for (auto _ : state) benchmark::DoNotOptimize(kernels::forward(s.model, s.x));
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kRows));
}

void BM_gradient_reference(benchmark::State& state) {
    const Setup s = make_setup(kRows);
    const auto targets = PixelTargets::mean(s.labels);
    std::vector<double> grad(s.model.params().size());
    for (auto _ : state) {
        std::fill(grad.begin(), grad.end(), 0.0);
        benchmark::DoNotOptimize(reference::loss_and_gradient(s.model, s.x, targets, grad));
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kRows));
}

void BM_gradient_kernels(benchmark::State& state) {
    omp_set_num_threads(static_cast<int>(state.range(0)));
    const Setup s = make_setup(kRows);
    const auto targets = PixelTargets::mean(s.labels);
    std::vector<double> grad(s.model.params().size());
    for (auto _ : state) {
        std::fill(grad.begin(), grad.end(), 0.0);
        benchmark::DoNotOptimize(kernels::loss_and_gradient(s.model, s.x, targets, grad));
    }
    state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * kRows));
}

} // namespace

BENCHMARK(BM_forward_reference)->UseRealTime();
BENCHMARK(BM_forward_kernels)->Arg(1)->Arg(2)->Arg(4)->UseRealTime();
BENCHMARK(BM_gradient_reference)->UseRealTime();
BENCHMARK(BM_gradient_kernels)->Arg(1)->Arg(2)->Arg(4)->UseRealTime();

BENCHMARK_MAIN();
