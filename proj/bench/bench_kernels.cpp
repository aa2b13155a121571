// Serial reference kernels vs. their OpenMP versions, at training shapes:
// batch 32, sequence 64, model width 32, 4 heads.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "pdl/kernels.hpp"

namespace k = pdl::kernels;

namespace {

constexpr std::size_t kB = 32, kT = 64, kD = 32, kH = 4, kDepthRows = 17;

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 0.5);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

std::vector<int> random_tape(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> t(kB * kT * kT, 0);
  for (std::size_t b = 0; b < kB; ++b)
    for (std::size_t i = 0; i < kT; ++i)
      for (std::size_t j = 0; j <= i; ++j) t[(b * kT + i) * kT + j] = static_cast<int>(rng() % kDepthRows);
  return t;
}

template <auto Fn>
void BM_matmul(benchmark::State& state) {
  const std::size_t m = kB * kT, kk = kD, n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2);
  std::vector<double> c(m * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    Fn(a.data(), b.data(), c.data(), m, kk, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * kk * n));
}

template <auto Fn>
void BM_matmul_tn(benchmark::State& state) {
  const std::size_t m = kB * kT, kk = kD, n = static_cast<std::size_t>(state.range(0));
  const auto a = random_vec(m * kk, 1), b = random_vec(m * n, 2);
  std::vector<double> c(kk * n);
  for (auto _ : state) {
    std::fill(c.begin(), c.end(), 0.0);
    Fn(a.data(), b.data(), c.data(), m, kk, n);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * kk * n));
}

template <auto Fwd>
void BM_attention_forward(benchmark::State& state) {
  const k::AttentionDims dims{kB, kT, kH, kD};
  const auto qkv = random_vec(kB * kT * 3 * kD, 3);
  const auto table = random_vec(kDepthRows * kD, 4);
  const auto tape = random_tape(5);
  const bool depth = state.range(0) != 0;
  std::vector<double> probs(kB * kH * kT * kT), out(kB * kT * kD);
  for (auto _ : state) {
    Fwd(dims, qkv.data(), depth ? table.data() : nullptr, depth ? tape.data() : nullptr, probs.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <auto Fwd, auto Bwd>
void BM_attention_backward(benchmark::State& state) {
  const k::AttentionDims dims{kB, kT, kH, kD};
  const auto qkv = random_vec(kB * kT * 3 * kD, 3);
  const auto table = random_vec(kDepthRows * kD, 4);
  const auto tape = random_tape(5);
  const auto dout = random_vec(kB * kT * kD, 6);
  std::vector<double> probs(kB * kH * kT * kT), out(kB * kT * kD);
  Fwd(dims, qkv.data(), table.data(), tape.data(), probs.data(), out.data());
  std::vector<double> dqkv(qkv.size()), ddepth(table.size());
  for (auto _ : state) {
    std::fill(dqkv.begin(), dqkv.end(), 0.0);
    std::fill(ddepth.begin(), ddepth.end(), 0.0);
    Bwd(dims, qkv.data(), table.data(), tape.data(), probs.data(), dout.data(), dqkv.data(), ddepth.data(),
        kDepthRows);
    benchmark::DoNotOptimize(dqkv.data());
  }
}

template <auto Fwd>
void BM_attach_forward(benchmark::State& state) {
  const k::AttachDims dims{kB, kT, kD};
  const auto u = random_vec(kB * kT * kD, 7), kpre = random_vec(kB * kT * kD, 8);
  const auto dpre = random_vec(kDepthRows * kD, 9), bias = random_vec(kB * kT, 10), self = random_vec(kB * kT, 11);
  const auto tape = random_tape(12);
  std::vector<double> logits(kB * kT * (kT + 1));
  for (auto _ : state) {
    Fwd(dims, u.data(), kpre.data(), dpre.data(), tape.data(), bias.data(), self.data(), k::Activation::gelu,
        0.125, logits.data());
    benchmark::DoNotOptimize(logits.data());
  }
}

template <auto Bwd>
void BM_attach_backward(benchmark::State& state) {
  const k::AttachDims dims{kB, kT, kD};
  const auto u = random_vec(kB * kT * kD, 7), kpre = random_vec(kB * kT * kD, 8);
  const auto dpre = random_vec(kDepthRows * kD, 9);
  const auto tape = random_tape(12);
  const auto dlogits = random_vec(kB * kT * (kT + 1), 13);
  std::vector<double> du(u.size()), dkpre(kpre.size()), ddpre(dpre.size()), dbias(kB * kT), dself(kB * kT);
  for (auto _ : state) {
    std::fill(du.begin(), du.end(), 0.0);
    std::fill(dkpre.begin(), dkpre.end(), 0.0);
    std::fill(ddpre.begin(), ddpre.end(), 0.0);
    Bwd(dims, u.data(), kpre.data(), dpre.data(), tape.data(), k::Activation::gelu, 0.125, dlogits.data(),
        du.data(), dkpre.data(), ddpre.data(), kDepthRows, dbias.data(), dself.data());
    benchmark::DoNotOptimize(du.data());
  }
}

}  // namespace

BENCHMARK(BM_matmul<k::serial::matmul>)->Name("matmul/serial")->Arg(32)->Arg(96)->Arg(128);
BENCHMARK(BM_matmul<k::omp::matmul>)->Name("matmul/omp")->Arg(32)->Arg(96)->Arg(128);
BENCHMARK(BM_matmul_tn<k::serial::matmul_tn>)->Name("matmul_tn/serial")->Arg(32)->Arg(128);
BENCHMARK(BM_matmul_tn<k::omp::matmul_tn>)->Name("matmul_tn/omp")->Arg(32)->Arg(128);
BENCHMARK(BM_attention_forward<k::serial::attention_forward>)->Name("attention_forward/serial")->Arg(0)->Arg(1);
BENCHMARK(BM_attention_forward<k::omp::attention_forward>)->Name("attention_forward/omp")->Arg(0)->Arg(1);
BENCHMARK(BM_attention_backward<k::omp::attention_forward, k::serial::attention_backward>)
    ->Name("attention_backward/serial");
BENCHMARK(BM_attention_backward<k::omp::attention_forward, k::omp::attention_backward>)
    ->Name("attention_backward/omp");
BENCHMARK(BM_attach_forward<k::serial::attach_forward>)->Name("attach_forward/serial");
BENCHMARK(BM_attach_forward<k::omp::attach_forward>)->Name("attach_forward/omp");
BENCHMARK(BM_attach_backward<k::serial::attach_backward>)->Name("attach_backward/serial");
BENCHMARK(BM_attach_backward<k::omp::attach_backward>)->Name("attach_backward/omp");

BENCHMARK_MAIN();
