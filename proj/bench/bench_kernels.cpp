// Parallel kernels vs the serial reference on the shapes training produces:
// hidden layers (width x batch) and the KS autoencoder (200 x 64 weights).

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "stiffnode/kernels.hpp"

namespace kn = stiffnode::kernels;

namespace {

std::vector<double> random_block(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

template <bool Parallel>
void BM_MatmulNN(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_block(m * k, 1), b = random_block(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kn::matmul_nn(m, n, k, a.data(), b.data(), c.data(), false);
    } else {
      kn::reference::matmul_nn(m, n, k, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * m * n * k));
}

template <bool Parallel>
void BM_MatmulTN(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_block(k * m, 3), b = random_block(k * n, 4);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kn::matmul_tn(m, n, k, a.data(), b.data(), c.data(), false);
    } else {
      kn::reference::matmul_tn(m, n, k, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * m * n * k));
}

template <bool Parallel>
void BM_Tanh(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto x = random_block(n, 5);
  std::vector<double> y(n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kn::tanh_forward(n, x.data(), y.data());
    } else {
      kn::reference::tanh_forward(n, x.data(), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
  state.SetItemsProcessed(static_cast<int64_t>(state.iterations() * n));
}

void shapes(benchmark::internal::Benchmark* b) {
  b->Args({100, 3, 100})->Args({100, 100, 100})->Args({200, 64, 500})->Args({64, 200, 500});
}

}  // namespace

BENCHMARK(BM_MatmulNN<false>)->Name("matmul_nn/reference")->Apply(shapes);
BENCHMARK(BM_MatmulNN<true>)->Name("matmul_nn/parallel")->Apply(shapes);
BENCHMARK(BM_MatmulTN<false>)->Name("matmul_tn/reference")->Apply(shapes);
BENCHMARK(BM_MatmulTN<true>)->Name("matmul_tn/parallel")->Apply(shapes);
BENCHMARK(BM_Tanh<false>)->Name("tanh/reference")->Arg(1 << 12)->Arg(1 << 16);
BENCHMARK(BM_Tanh<true>)->Name("tanh/parallel")->Arg(1 << 12)->Arg(1 << 16);

BENCHMARK_MAIN();
