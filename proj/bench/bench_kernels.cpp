// OpenMP kernels against their serial references, plus the FFT phase operator.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "caq/kernels.hpp"
#include "caq/phase_model.hpp"
#include "caq/spatial_priors.hpp"

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<double> v(n);
    for (double& x : v) {
        x = u(rng);
    }
    return v;
}

template <bool Parallel>
void BM_Dot(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_values(n, 1);
    const auto b = random_values(n, 2);
    for (auto _ : state) {
        benchmark::DoNotOptimize(Parallel ? caq::kernels::dot(a, b) : caq::kernels::reference::dot(a, b));
    }
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * n * 2 * sizeof(double)));
}

template <bool Parallel>
void BM_Axpy(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto x = random_values(n, 3);
    auto y = random_values(n, 4);
    for (auto _ : state) {
        if constexpr (Parallel) {
            caq::kernels::axpy(1e-9, x, y);
        } else {
            caq::kernels::reference::axpy(1e-9, x, y);
        }
        benchmark::ClobberMemory();
    }
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations() * n * 3 * sizeof(double)));
}

template <bool Parallel>
void BM_PrecisionApply(benchmark::State& state) {
    const auto edge = static_cast<std::size_t>(state.range(0));
    const caq::GridDims dims{edge, edge, edge, 1.0};
    const auto q = caq::leroux_precision({caq::build_graph(dims), 0.1, 0.7});
    const auto& g = *q.graph();
    const auto x = random_values(dims.size(), 5);
    std::vector<double> y(dims.size());
    for (auto _ : state) {
        if constexpr (Parallel) {
            caq::kernels::precision_apply(g.offsets(), g.adjacency(), q.diagonal(), q.off_diagonal(), x, y);
        } else {
            caq::kernels::reference::precision_apply(g.offsets(), g.adjacency(), q.diagonal(), q.off_diagonal(), x, y);
        }
        benchmark::ClobberMemory();
    }
}

template <bool Parallel>
void BM_ClassErrorSums(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto est = random_values(n, 6);
    const auto truth = random_values(n, 7);
    std::vector<std::uint8_t> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<std::uint8_t>(i % 6);
    }
    for (auto _ : state) {
        auto s = Parallel ? caq::kernels::class_error_sums(est, truth, labels, 6)
                          : caq::kernels::reference::class_error_sums(est, truth, labels, 6);
        benchmark::DoNotOptimize(s);
    }
}

void BM_PhaseApply(benchmark::State& state) {
    const auto edge = static_cast<std::size_t>(state.range(0));
    const caq::GridDims dims{edge, edge, edge, 1.0};
    const caq::PhaseOperator psi(caq::build_dipole_kernel(dims, 1.0));
    const auto x = random_values(dims.size(), 8);
    std::vector<double> y(dims.size());
    for (auto _ : state) {
        psi.apply(x, y);
        benchmark::ClobberMemory();
    }
}

}  // namespace

BENCHMARK(BM_Dot<true>)->Arg(1 << 12)->Arg(64 * 64 * 64);
BENCHMARK(BM_Dot<false>)->Arg(1 << 12)->Arg(64 * 64 * 64);
BENCHMARK(BM_Axpy<true>)->Arg(64 * 64 * 64);
BENCHMARK(BM_Axpy<false>)->Arg(64 * 64 * 64);
BENCHMARK(BM_PrecisionApply<true>)->Arg(10)->Arg(64);
BENCHMARK(BM_PrecisionApply<false>)->Arg(10)->Arg(64);
BENCHMARK(BM_ClassErrorSums<true>)->Arg(64 * 64 * 64);
BENCHMARK(BM_ClassErrorSums<false>)->Arg(64 * 64 * 64);
BENCHMARK(BM_PhaseApply)->Arg(10)->Arg(32)->Arg(64);

BENCHMARK_MAIN();
