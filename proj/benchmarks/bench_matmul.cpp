#include <benchmark/benchmark.h>

#include <vector>

#include "eve/ops.hpp"
#include "eve/rng.hpp"
#include "eve/tensor.hpp"

namespace {

eve::Tensor random_tensor(eve::Rng& rng, std::vector<int> shape, eve::DType dt,
                          bool requires_grad = false) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> vals(static_cast<std::size_t>(n));
  for (auto& v : vals) v = rng.normal() * 0.1;
  return eve::Tensor::from_vec(std::move(shape), vals, dt, requires_grad);
}

void bench_matmul_forward(benchmark::State& state, eve::DType dt) {
  int n = static_cast<int>(state.range(0));
  eve::Rng rng = eve::Rng::from_seed(1);
  eve::Tensor a = random_tensor(rng, {n, n}, dt);
  eve::Tensor b = random_tensor(rng, {n, n}, dt);
  for (auto _ : state) {
    eve::Tensor c = eve::matmul(a, b);
    benchmark::DoNotOptimize(c.node());
  }
  state.counters["flops"] = benchmark::Counter(
      2.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}

void bench_matmul_train_step(benchmark::State& state, eve::DType dt) {
  int n = static_cast<int>(state.range(0));
  eve::Rng rng = eve::Rng::from_seed(2);
  eve::Tensor a = random_tensor(rng, {n, n}, dt, true);
  eve::Tensor b = random_tensor(rng, {n, n}, dt, true);
  for (auto _ : state) {
    eve::Tensor loss = eve::sum_all(eve::matmul(a, b));
    eve::backward(loss);
    a.zero_grad();
    b.zero_grad();
    benchmark::DoNotOptimize(loss.node());
  }
  state.counters["flops"] = benchmark::Counter(
      6.0 * n * n * n, benchmark::Counter::kIsIterationInvariantRate);
}

}  // namespace

BENCHMARK_CAPTURE(bench_matmul_forward, f32, eve::DType::F32)->Arg(64)->Arg(128)->Arg(256)->Arg(512);
BENCHMARK_CAPTURE(bench_matmul_forward, f64, eve::DType::F64)->Arg(128)->Arg(256);
BENCHMARK_CAPTURE(bench_matmul_train_step, f32, eve::DType::F32)->Arg(128)->Arg(256);
