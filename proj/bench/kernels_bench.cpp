// Serial reference kernels against the OpenMP versions.

#include <benchmark/benchmark.h>

#include <vector>

#include "ck/kernels.hpp"
#include "ck/rng.hpp"

namespace {

namespace k = ck::kernels;

std::vector<double> random_buffer(std::size_t n, std::uint64_t seed) {
    ck::Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

k::Conv2dGeometry conv_geometry(std::size_t channels) {
    k::Conv2dGeometry g;
    g.batch = 8;
    g.in_channels = channels;
    g.in_h = g.in_w = 16;
    g.out_channels = channels * 2;
    g.kernel_h = g.kernel_w = 3;
    g.padding = 1;
    return g;
}

template <bool Parallel>
void BM_Conv2dForward(benchmark::State& state) {
    const auto g = conv_geometry(static_cast<std::size_t>(state.range(0)));
    const auto x = random_buffer(g.input_size(), 1), w = random_buffer(g.weight_size(), 2);
    std::vector<double> y(g.output_size());
    for (auto _ : state) {
        if constexpr (Parallel) k::conv2d_forward(g, x, w, y);
        else k::reference::conv2d_forward(g, x, w, y);
        benchmark::DoNotOptimize(y.data());
    }
}

template <bool Parallel>
void BM_Conv2dBackward(benchmark::State& state) {
    const auto g = conv_geometry(static_cast<std::size_t>(state.range(0)));
    const auto x = random_buffer(g.input_size(), 1), w = random_buffer(g.weight_size(), 2);
    const auto gy = random_buffer(g.output_size(), 3);
    std::vector<double> gx(g.input_size()), gw(g.weight_size());
    for (auto _ : state) {
        if constexpr (Parallel) {
            k::conv2d_input_grad(g, gy, w, gx);
            k::conv2d_weight_grad(g, x, gy, gw);
        } else {
            k::reference::conv2d_input_grad(g, gy, w, gx);
            k::reference::conv2d_weight_grad(g, x, gy, gw);
        }
        benchmark::DoNotOptimize(gx.data());
        benchmark::DoNotOptimize(gw.data());
    }
}

template <bool Parallel>
void BM_Matmul(benchmark::State& state) {
    const auto n = static_cast<std::size_t>(state.range(0));
    const auto a = random_buffer(n * n, 4), b = random_buffer(n * n, 5);
    std::vector<double> c(n * n);
    for (auto _ : state) {
        if constexpr (Parallel) k::matmul(n, n, n, a, b, c);
        else k::reference::matmul(n, n, n, a, b, c);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}

template <bool Parallel>
void BM_PairwiseDistances(benchmark::State& state) {
    const auto count = static_cast<std::size_t>(state.range(0));
    const std::size_t dim = 64 * 9;
    const auto rows = random_buffer(count * dim, 6);
    std::vector<double> out(count);
    for (auto _ : state) {
        if constexpr (Parallel) k::pairwise_distance_sums(count, dim, rows, out);
        else k::reference::pairwise_distance_sums(count, dim, rows, out);
        benchmark::DoNotOptimize(out.data());
    }
}

} // namespace

BENCHMARK(BM_Conv2dForward<false>)->Name("conv2d_forward/reference")->Arg(8)->Arg(32);
BENCHMARK(BM_Conv2dForward<true>)->Name("conv2d_forward/openmp")->Arg(8)->Arg(32);
BENCHMARK(BM_Conv2dBackward<false>)->Name("conv2d_backward/reference")->Arg(8)->Arg(32);
BENCHMARK(BM_Conv2dBackward<true>)->Name("conv2d_backward/openmp")->Arg(8)->Arg(32);
BENCHMARK(BM_Matmul<false>)->Name("matmul/reference")->Arg(64)->Arg(256);
BENCHMARK(BM_Matmul<true>)->Name("matmul/openmp")->Arg(64)->Arg(256);
BENCHMARK(BM_PairwiseDistances<false>)->Name("pairwise_distance_sums/reference")->Arg(64)->Arg(256);
BENCHMARK(BM_PairwiseDistances<true>)->Name("pairwise_distance_sums/openmp")->Arg(64)->Arg(256);

BENCHMARK_MAIN();
