#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "perp/adapters.hpp"
#include "perp/autograd.hpp"
#include "perp/criteria.hpp"
#include "perp/kernels.hpp"
#include "perp/model.hpp"
#include "perp/optim.hpp"
#include "perp/sparsity.hpp"

using namespace perp;

namespace {

Tensor<float> gaussian(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor<float> t(shape, 0.0f);
  for (auto& v : t.vec()) v = n(rng);
  return t;
}

TokenBatch batch_of(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TokenBatch b{rows, cols, std::vector<std::int32_t>(rows * cols)};
  for (auto& t : b.tokens) t = static_cast<std::int32_t>(rng() % 256);
  return b;
}

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  auto a = gaussian({n, n}, 1), b = gaussian({n, n}, 2);
  std::vector<float> c(n * n);
  for (auto _ : state) {
    kernels::gemm(n, n, n, a.data(), b.data(), c.data(), false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Gemm)->Arg(64)->Arg(128)->Arg(256);

void BM_TrainStep(benchmark::State& state) {
  auto model = init_model(MiniGPTConfig{}, 0);
  model.set_trainable(all_group_tags());
  std::vector<Var<float>> params;
  for (auto& p : model.parameters()) params.push_back(p.var);
  AdamW<float> opt(params);
  const auto batch = batch_of(2, model.config().context_length + 1, 3);
  for (auto _ : state) {
    opt.zero_grad();
    backward(forward_loss(model, batch));
    opt.step(1e-4);
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.rows * (batch.cols - 1)));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond);

void BM_AdapterForward(benchmark::State& state) {
  const auto kind = static_cast<AdapterKind>(state.range(0));
  auto w0 = gaussian({224, 224}, 4);
  auto mask = build_mask(magnitude_scores(w0), Unstructured{0.5}).bits;
  Var<float> w(apply_mask(w0, mask));
  AdapterOptions o;
  o.rank = 16;
  auto pair = attach(w, kind, o, 0, needs_mask(kind) ? &mask : nullptr);
  auto x = constant(gaussian({64, 224}, 5));
  for (auto _ : state) benchmark::DoNotOptimize(adapter_forward(pair, w, x).value().data());
  state.SetLabel(to_string(kind));
}
BENCHMARK(BM_AdapterForward)
    ->Arg(static_cast<int>(AdapterKind::lora))
    ->Arg(static_cast<int>(AdapterKind::mult_lora))
    ->Arg(static_cast<int>(AdapterKind::masked_lora));

void BM_SparseGpt(benchmark::State& state) {
  const auto d = static_cast<std::size_t>(state.range(0));
  auto w = gaussian({d, d}, 6), x = gaussian({d, 512}, 7);
  for (auto _ : state) benchmark::DoNotOptimize(sparsegpt_prune(w, x, Unstructured{0.5}).weight.data());
}
BENCHMARK(BM_SparseGpt)->Arg(64)->Arg(224)->Unit(benchmark::kMillisecond);

void BM_MagnitudeMask(benchmark::State& state) {
  auto w = gaussian({896, 224}, 8);
  for (auto _ : state) benchmark::DoNotOptimize(build_mask(magnitude_scores(w), SemiStructured{2, 4}).bits.data());
}
BENCHMARK(BM_MagnitudeMask);

}  // namespace
BENCHMARK_MAIN();
