#include <benchmark/benchmark.h>

#include <random>

#include "masa/attention.hpp"
#include "masa/denoiser.hpp"
#include "masa/pipeline.hpp"
#include "masa/scene.hpp"

namespace {

masa::Heads<float> random_heads(std::mt19937_64& rng, int heads, int n, int d) {
  std::normal_distribution<float> n01;
  masa::Heads<float> out;
  for (int h = 0; h < heads; ++h) {
    masa::Mat<float> m(n, d);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n01(rng);
    out.push_back(m);
  }
  return out;
}

// Self-attention at an n-token grid with 4 heads of width 16.
void BM_Attention(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const int n = static_cast<int>(state.range(0));
  const auto q = random_heads(rng, 4, n, 16), k = random_heads(rng, 4, n, 16), v = random_heads(rng, 4, n, 16);
  for (auto _ : state) benchmark::DoNotOptimize(masa::attention(q, k, v));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_Attention)->Arg(64)->Arg(256)->Arg(1024);

void BM_MaskedAttention(benchmark::State& state) {
  std::mt19937_64 rng(2);
  const int n = static_cast<int>(state.range(0));
  const auto q = random_heads(rng, 4, n, 16), k = random_heads(rng, 4, n, 16), v = random_heads(rng, 4, n, 16);
  std::vector<std::uint8_t> keep(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i % 3 == 0;
  for (auto _ : state) benchmark::DoNotOptimize(masa::masked_attention(q, k, v, keep));
  state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_MaskedAttention)->Arg(256)->Arg(1024);

// One guided denoiser evaluation ([uncond, cond] batch) of the default model.
void BM_DenoiserForward(benchmark::State& state) {
  auto model = masa::Denoiser<float>::build(masa::DenoiserConfig{}, 3);
  model.init_parameters(3, false);
  const masa::Sampler sampler(model, masa::ScheduleParams{});
  const auto z = sampler.initial_noise(4);
  const auto prompt = masa::TokenGrammar(model.config().max_tokens).parse("red circle left on white");
  const double w = static_cast<double>(state.range(0)) / 10.0;
  for (auto _ : state) benchmark::DoNotOptimize(sampler.guided_eps(z, 500, prompt, w, 0, nullptr, nullptr));
}
BENCHMARK(BM_DenoiserForward)->Arg(10)->Arg(75)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
