#include <benchmark/benchmark.h>

#include "changeseg/chi2.hpp"
#include "changeseg/labelex.hpp"
#include "changeseg/losses.hpp"
#include "changeseg/patching.hpp"
#include "changeseg/pipeline.hpp"
#include "changeseg/rng.hpp"
#include "changeseg/synthdata.hpp"
#include "changeseg/vit.hpp"

using namespace changeseg;

namespace {

struct ExpansionFixture {
  StackedInput features;
  SeedSet seeds;
  PcaModel pca;
};

ExpansionFixture make_expansion_fixture(int size) {
  SceneSpec s;
  s.width = size;
  s.height = size;
  const auto scene = generate_scene(s);
  auto features = pipeline::expansion_features(stack(scene.pre, scene.post));
  auto pca = pipeline::full_pca(features);
  return {std::move(features), sample_seeds(scene.truth, 0.1, 0), std::move(pca)};
}

ViTConfig desk_config() {
  ViTConfig c;
  c.in_channels = 8;
  c.patch_size = 8;
  c.embed_dim = 32;
  c.depth = 2;
  c.num_heads = 2;
  c.input_h = 64;
  c.input_w = 64;
  return c;
}

std::vector<float> random_input(const ViTConfig& c) {
  Rng rng(1);
  std::vector<float> x(static_cast<std::size_t>(c.in_channels) * c.input_h * c.input_w);
  for (auto& v : x) v = static_cast<float>(rng.normal());
  return x;
}

}  // namespace

static void BM_Chi2Quantile(benchmark::State& state) {
  const int k = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(chi2_quantile(k, 0.95));
}
BENCHMARK(BM_Chi2Quantile)->Arg(2)->Arg(8)->Arg(16);

static void BM_FullPca(benchmark::State& state) {
  const ExpansionFixture f = make_expansion_fixture(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(pipeline::full_pca(f.features));
  state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}
BENCHMARK(BM_FullPca)->Arg(256)->Arg(512)->Unit(benchmark::kMillisecond);

// Expansion with a cached PCA, as the service runs it on every alpha/pc change.
static void BM_Expand(benchmark::State& state) {
  const ExpansionFixture f = make_expansion_fixture(static_cast<int>(state.range(0)));
  const int pc = static_cast<int>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(pipeline::expand(f.features, f.seeds, 0.95, pc, &f.pca));
  state.SetItemsProcessed(state.iterations() * state.range(0) * state.range(0));
}
BENCHMARK(BM_Expand)->Args({256, 2})->Args({256, 8})->Args({512, 2})->Unit(benchmark::kMillisecond);

static void BM_VitForward(benchmark::State& state) {
  ViTConfig c = desk_config();
  c.decoder = static_cast<DecoderKind>(state.range(0));
  if (c.decoder == DecoderKind::kB) c.patch_size = 16;
  const auto p = init_params<float>(c);
  const auto x = random_input(c);
  for (auto _ : state) benchmark::DoNotOptimize(forward<float>(p, c, x));
}
BENCHMARK(BM_VitForward)
    ->Arg(static_cast<int>(DecoderKind::kA))
    ->Arg(static_cast<int>(DecoderKind::kB))
    ->Arg(static_cast<int>(DecoderKind::kC))
    ->Unit(benchmark::kMicrosecond);

static void BM_VitBackward(benchmark::State& state) {
  ViTConfig c = desk_config();
  c.decoder = static_cast<DecoderKind>(state.range(0));
  if (c.decoder == DecoderKind::kB) c.patch_size = 16;
  const auto p = init_params<float>(c);
  const auto fwd = forward<float>(p, c, random_input(c));
  const std::vector<float> upstream(static_cast<std::size_t>(c.input_h) * c.input_w, 1e-3f);
  for (auto _ : state) benchmark::DoNotOptimize(backward<float>(p, c, fwd.cache, upstream));
}
BENCHMARK(BM_VitBackward)
    ->Arg(static_cast<int>(DecoderKind::kA))
    ->Arg(static_cast<int>(DecoderKind::kB))
    ->Arg(static_cast<int>(DecoderKind::kC))
    ->Unit(benchmark::kMicrosecond);

static void BM_IouLossWithGradient(benchmark::State& state) {
  const std::size_t n = static_cast<std::size_t>(state.range(0));
  Rng rng(2);
  std::vector<double> x(n), y(n), g(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = rng.uniform(0.01, 0.99);
    y[i] = rng.uniform() < 0.3 ? 1.0 : 0.0;
  }
  for (auto _ : state) benchmark::DoNotOptimize(iou_loss(x, y, 1.0, g));
  state.SetItemsProcessed(state.iterations() * state.range(0));
}
BENCHMARK(BM_IouLossWithGradient)->Arg(8 * 64 * 64);

static void BM_PatchRoundTrip(benchmark::State& state) {
  BandRaster r(1000, 700, 8);
  Rng rng(3);
  for (auto& v : r.data) v = static_cast<float>(rng.uniform());
  for (auto _ : state) {
    const PatchSet s = extract_patches(r, 64, 64);
    benchmark::DoNotOptimize(reassemble(s.patches, s.grid));
  }
}
BENCHMARK(BM_PatchRoundTrip)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
