// Serial vs OpenMP kernels at the shapes the policy uses: per-step attention
// over a demo, and batched matmuls during updates.

#include <benchmark/benchmark.h>

#include <vector>

#include "dtsil/kernels.hpp"
#include "dtsil/rng.hpp"

using namespace dtsil;

namespace {

std::vector<double> random_vector(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform() * 2.0 - 1.0;
  return v;
}

template <bool Parallel>
void BM_matmul(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 64, n = 64;
  const auto a = random_vector(m * k, 1), b = random_vector(k * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::matmul(a, b, c, m, k, n, false);
    else
      kernels::serial::matmul(a, b, c, m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m * k * n));
}

template <bool Parallel>
void BM_matmul_tn(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const std::size_t k = 64, n = 64;
  const auto a = random_vector(m * k, 3), b = random_vector(m * n, 4);
  std::vector<double> c(k * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::matmul_tn(a, b, c, m, k, n, false);
    else
      kernels::serial::matmul_tn(a, b, c, m, k, n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(m * k * n));
}

template <bool Parallel>
void BM_attention(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const std::size_t l = 150, dim = 32;
  const auto q = random_vector(t * dim, 5), keys = random_vector(l * dim, 6), v = random_vector(dim, 7);
  std::vector<double> scores(t * l), act(t * l * dim);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::additive_scores(q, keys, v, scores, act, t, l, dim);
    else
      kernels::serial::additive_scores(q, keys, v, scores, act, t, l, dim);
    benchmark::DoNotOptimize(scores.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(t * l * dim));
}

template <bool Parallel>
void BM_attention_backward(benchmark::State& state) {
  const auto t = static_cast<std::size_t>(state.range(0));
  const std::size_t l = 150, dim = 32;
  const auto q = random_vector(t * dim, 8), keys = random_vector(l * dim, 9), v = random_vector(dim, 10);
  const auto d_scores = random_vector(t * l, 11);
  std::vector<double> scores(t * l), act(t * l * dim);
  kernels::serial::additive_scores(q, keys, v, scores, act, t, l, dim);
  std::vector<double> dq(t * dim), dk(l * dim), dv(dim);
  for (auto _ : state) {
    if constexpr (Parallel)
      kernels::parallel::additive_scores_backward(d_scores, act, v, dq, dk, dv, t, l, dim);
    else
      kernels::serial::additive_scores_backward(d_scores, act, v, dq, dk, dv, t, l, dim);
    benchmark::DoNotOptimize(dk.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(t * l * dim));
}

}  // namespace

BENCHMARK(BM_matmul<false>)->Name("matmul/serial")->Arg(8)->Arg(256)->Arg(1024);
BENCHMARK(BM_matmul<true>)->Name("matmul/openmp")->Arg(8)->Arg(256)->Arg(1024);
BENCHMARK(BM_matmul_tn<false>)->Name("matmul_tn/serial")->Arg(256)->Arg(1024);
BENCHMARK(BM_matmul_tn<true>)->Name("matmul_tn/openmp")->Arg(256)->Arg(1024);
BENCHMARK(BM_attention<false>)->Name("attention/serial")->Arg(8)->Arg(128);
BENCHMARK(BM_attention<true>)->Name("attention/openmp")->Arg(8)->Arg(128);
BENCHMARK(BM_attention_backward<false>)->Name("attention_backward/serial")->Arg(8)->Arg(128);
BENCHMARK(BM_attention_backward<true>)->Name("attention_backward/openmp")->Arg(8)->Arg(128);

BENCHMARK_MAIN();
