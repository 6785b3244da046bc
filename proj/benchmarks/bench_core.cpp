#include <benchmark/benchmark.h>

#include <random>

#include "nestseg/autodiff.hpp"
#include "nestseg/inference.hpp"
#include "nestseg/losses.hpp"
#include "nestseg/model.hpp"
#include "nestseg/phantom.hpp"
#include "nestseg/tensor.hpp"

using namespace nestseg;

namespace {

Tensor random_tensor(std::vector<int64_t> shape, uint64_t seed) {
  Tensor t(std::move(shape));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = u(rng);
  return t;
}

void BM_BlockifyRoundtrip(benchmark::State& state) {
  int level = static_cast<int>(state.range(0));
  NestModel model(ModelConfig::toy(4), 1);
  const ModelConfig& cfg = model.config();
  ad::NoGradGuard ng;
  ad::Var tokens = ad::constant(
      random_tensor({cfg.num_patches(level), cfg.embed_dims[level]}, 2));
  for (auto _ : state) {
    BlockedSequence seq = model.blockify(tokens, level);
    ad::Var back = model.deblockify(seq);
    benchmark::DoNotOptimize(back->value.data());
  }
}
BENCHMARK(BM_BlockifyRoundtrip)->Arg(0)->Arg(1)->Arg(2);

void BM_Conv3d(benchmark::State& state) {
  int64_t side = state.range(0);
  ad::NoGradGuard ng;
  ad::Var x = ad::constant(random_tensor({8, side, side, side}, 3));
  ad::Var w = ad::constant(random_tensor({8, 8, 3, 3, 3}, 4));
  ad::Var b = ad::constant(Tensor({8}));
  for (auto _ : state) {
    ad::Var y = ad::conv3d(x, w, b, 1);
    benchmark::DoNotOptimize(y->value.data());
  }
  state.SetItemsProcessed(state.iterations() * side * side * side);
}
BENCHMARK(BM_Conv3d)->Arg(8)->Arg(16)->Arg(32);

void BM_TransformerBlock(benchmark::State& state) {
  NestModel model(ModelConfig::toy(4), 5);
  const ModelConfig& cfg = model.config();
  ad::NoGradGuard ng;
  Tensor crop = random_tensor(
      {1, cfg.crop_size[0], cfg.crop_size[1], cfg.crop_size[2]}, 6);
  BlockedSequence seq = model.blockify(model.patch_embed(crop), 0);
  for (auto _ : state) {
    BlockedSequence out = model.transformer_block(seq, 0);
    benchmark::DoNotOptimize(out.data->value.data());
  }
}
BENCHMARK(BM_TransformerBlock);

void BM_ForwardToy(benchmark::State& state) {
  NestModel model(ModelConfig::toy(10), 7);
  const ModelConfig& cfg = model.config();
  ad::NoGradGuard ng;
  Tensor crop = random_tensor(
      {1, cfg.crop_size[0], cfg.crop_size[1], cfg.crop_size[2]}, 8);
  for (auto _ : state) {
    ModelOutput out = model.forward(crop, false);
    benchmark::DoNotOptimize(out.brain_logits->value.data());
  }
}
BENCHMARK(BM_ForwardToy);

void BM_WindowFusion(benchmark::State& state) {
  PhantomSpec spec;
  spec.shape = {64, 64, 64};
  spec.num_regions = 3;
  Phantom ph = generate_phantom(spec);
  const int64_t C = 6;
  WindowPlan plan = plan_windows({64, 64, 64}, {32, 32, 32});
  WindowFn fn = [&](const Tensor& crop) {
    Tensor out({C, crop.dim(1), crop.dim(2), crop.dim(3)});
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = crop[i % crop.numel()];
    return out;
  };
  for (auto _ : state) {
    Tensor fused = sliding_window_infer(ph.volume, fn, C, plan);
    benchmark::DoNotOptimize(fused.data());
  }
}
BENCHMARK(BM_WindowFusion);

void BM_DiceLoss(benchmark::State& state) {
  const int C = 16;
  const int64_t n = 32 * 32 * 32;
  Tensor probs = random_tensor({C, n}, 9);
  for (int64_t i = 0; i < probs.numel(); ++i) probs[i] = std::abs(probs[i]);
  Tensor target({C, n});
  for (int64_t i = 0; i < n; ++i) target[(i % C) * n + i] = 1.0;
  ad::NoGradGuard ng;
  ad::Var p = ad::constant(probs);
  for (auto _ : state) {
    ad::Var loss = dice_loss(p, target);
    benchmark::DoNotOptimize(loss->value[0]);
  }
  state.SetItemsProcessed(state.iterations() * C * n);
}
BENCHMARK(BM_DiceLoss);

}  // namespace

BENCHMARK_MAIN();
