#include <benchmark/benchmark.h>

#include <random>

#include "csformer/inference.hpp"
#include "csformer/model.hpp"
#include "csformer/ops.hpp"
#include "csformer/params.hpp"
#include "csformer/runtime.hpp"
#include "csformer/train.hpp"

using namespace csformer;

namespace {

Tensor32 random_tensor(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> values(static_cast<std::size_t>(shape_numel(shape)));
  for (float& v : values) v = dist(rng);
  return Tensor32(std::move(shape), std::move(values));
}

void BM_Matmul(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const Tensor32 a = random_tensor({n, n}, 1), b = random_tensor({n, n}, 2);
  for (auto _ : state) benchmark::DoNotOptimize(matmul(a, b));
  state.SetItemsProcessed(state.iterations() * std::int64_t{n} * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(256);

void BM_Conv3x3(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  const Tensor32 x = random_tensor({1, c, 64, 64}, 3), w = random_tensor({c, c, 3, 3}, 4);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, Tensor32{}, {1, 1, 1}));
  state.SetItemsProcessed(state.iterations() * std::int64_t{c} * c * 9 * 64 * 64);
}
BENCHMARK(BM_Conv3x3)->Arg(16)->Arg(32);

void BM_DepthwiseConv(benchmark::State& state) {
  const Tensor32 x = random_tensor({1, 64, 64, 64}, 5), w = random_tensor({64, 1, 3, 3}, 6);
  for (auto _ : state) benchmark::DoNotOptimize(conv2d(x, w, Tensor32{}, {1, 1, 64}));
}
BENCHMARK(BM_DepthwiseConv);

void BM_ShiftedWindowAttention(benchmark::State& state) {
  const ModelConfig config = ModelConfig::nano();
  const auto params = init_params<float>(config, {7, false});
  const PadPlan plan = plan_padding(60, 60, config);
  const AttentionMask mask = build_pad_mask(plan, 0, config.shift_size());
  const StageDims& d = plan.level(0);
  const Tensor32 x = random_tensor({1, config.width(0), d.padded_h, d.padded_w}, 8);
  for (auto _ : state)
    benchmark::DoNotOptimize(
        window_msa(x, params, "stage0.block0.attn", 1, config.window_size, config.shift_size(), &mask));
}
BENCHMARK(BM_ShiftedWindowAttention);

void BM_Forward(benchmark::State& state, const char* preset, bool input_padding) {
  const ModelConfig config = ModelConfig::preset(preset);
  const auto params = init_params<float>(config, {9, false});
  const int size = static_cast<int>(state.range(0));
  const Tensor32 image = random_tensor({1, 3, size, size}, 10);
  for (auto _ : state)
    benchmark::DoNotOptimize(input_padding ? infer_input_padded(image, params, config)
                                           : infer_full_image(image, params, config));
  state.counters["MACs"] = static_cast<double>(input_padding ? count_macs(config, size, size).baseline.total()
                                                             : count_macs(config, size, size).padded.total());
}
BENCHMARK_CAPTURE(BM_Forward, nano_feature_padded, "nano", false)->Arg(64)->Arg(100)->Unit(benchmark::kMillisecond);
BENCHMARK_CAPTURE(BM_Forward, nano_input_padded, "nano", true)->Arg(64)->Arg(100)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
  const ModelConfig config = ModelConfig::toy();
  auto params = init_params<float>(config, {11, true});
  OptimState<float> opt(params, {});
  const PairBatch batch{random_tensor({4, 3, 64, 64}, 12), random_tensor({4, 3, 64, 64}, 13)};
  const Schedule schedule{2e-4, 1e-6, 1 << 30};
  for (auto _ : state) benchmark::DoNotOptimize(finetune_step(batch, params, config, opt, schedule));
}
BENCHMARK(BM_TrainStep)->Unit(benchmark::kMillisecond)->Iterations(5);

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  benchmark::Initialize(&argc, argv);
  if (benchmark::ReportUnrecognizedArguments(argc, argv)) return 1;
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
