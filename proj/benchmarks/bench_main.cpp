#include <benchmark/benchmark.h>

#include "chopgrad/decoder.hpp"
#include "chopgrad/locality.hpp"
#include "chopgrad/profiler.hpp"
#include "chopgrad/scheduler.hpp"

namespace {

using namespace chopgrad;

std::vector<FrameGroupLatent> groups_of(const Sample& s) {
  std::vector<FrameGroupLatent> out;
  for (std::size_t i = 0; i < s.latents.size(); ++i) out.push_back({i, s.latents[i]});
  return out;
}

DecoderConfig bench_config() {
  DecoderConfig cfg;
  cfg.channel_widths = {4, 4};
  cfg.cache_length = 2;
  cfg.init_seed = 1;
  return cfg;
}

void BM_DecodeCached(benchmark::State& state) {
  const DecoderConfig cfg = bench_config();
  const DecoderParams params = init_params(cfg);
  const Sample s = random_sample(cfg, static_cast<std::size_t>(state.range(0)), 3);
  const std::vector<FrameGroupLatent> z = groups_of(s);
  for (auto _ : state) benchmark::DoNotOptimize(decode_video(z, params));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DecodeCached)->Arg(4)->Arg(16);

void BM_DecodeMonolithic(benchmark::State& state) {
  const DecoderConfig cfg = bench_config();
  const DecoderParams params = init_params(cfg);
  const Sample s = random_sample(cfg, static_cast<std::size_t>(state.range(0)), 3);
  const std::vector<FrameGroupLatent> z = groups_of(s);
  for (auto _ : state) benchmark::DoNotOptimize(decode_monolithic(z, params));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_DecodeMonolithic)->Arg(4)->Arg(16);

// range(0): groups, range(1): D_trunc, range(2): 0 eager, s > 0 deferred stride.
void BM_Backward(benchmark::State& state) {
  const DecoderConfig cfg = bench_config();
  const DecoderParams params = init_params(cfg);
  const Sample s = random_sample(cfg, static_cast<std::size_t>(state.range(0)), 3);
  TruncationPolicy p;
  p.d_trunc = static_cast<std::size_t>(state.range(1));
  if (state.range(2) > 0) {
    p.mode = EvictionMode::Deferred;
    p.stride = static_cast<std::size_t>(state.range(2));
  }
  std::size_t peak = 0;
  for (auto _ : state) {
    const RunResult r = p.mode == EvictionMode::Eager
                            ? run_truncated_backprop(s.latents, s.targets, params, LossSpec{}, p)
                            : run_deferred(s.latents, s.targets, params, LossSpec{}, p);
    peak = r.trace.peak_bytes;
    benchmark::DoNotOptimize(r.grads.param_grad.data());
  }
  state.counters["peak_bytes"] = static_cast<double>(peak);
}
BENCHMARK(BM_Backward)->Args({16, 1, 0})->Args({16, 4, 0})->Args({16, 4, 1})->Args({16, 4, 4});

void BM_FullBackprop(benchmark::State& state) {
  const DecoderConfig cfg = bench_config();
  const DecoderParams params = init_params(cfg);
  const Sample s = random_sample(cfg, static_cast<std::size_t>(state.range(0)), 3);
  std::size_t peak = 0;
  for (auto _ : state) {
    const RunResult r = run_full_backprop(s.latents, s.targets, params, LossSpec{});
    peak = r.trace.peak_bytes;
    benchmark::DoNotOptimize(r.grads.param_grad.data());
  }
  state.counters["peak_bytes"] = static_cast<double>(peak);
}
BENCHMARK(BM_FullBackprop)->Arg(16);

void BM_SinkJacobians(benchmark::State& state) {
  DecoderConfig cfg = bench_config();
  cfg.latent_height = cfg.latent_width = 4;
  const DecoderParams params = init_params(cfg);
  const Sample s = random_sample(cfg, 5, 3);
  for (auto _ : state) benchmark::DoNotOptimize(sink_jacobians(4, s.latents, params));
}
BENCHMARK(BM_SinkJacobians)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
