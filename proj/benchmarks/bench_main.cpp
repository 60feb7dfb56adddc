#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "vndiff/adapter.hpp"
#include "vndiff/kernels.hpp"
#include "vndiff/metrics.hpp"
#include "vndiff/unet.hpp"

using namespace vndiff;

namespace {

std::vector<float> noise(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<float> d;
  std::vector<float> v(n);
  for (float& x : v) x = d(gen);
  return v;
}

UNetConfig desk_network(int edge) {
  UNetConfig c;
  c.levels = 2;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.blocks_per_level = 1;
  c.time_embed_dim = 32;
  c.patch_edge = edge;
  return c;
}

// args: channels, edge
void BM_Conv3dForward(benchmark::State& state) {
  kernels::ConvGeometry g;
  g.in_channels = g.out_channels = static_cast<int>(state.range(0));
  g.depth = g.height = g.width = static_cast<int>(state.range(1));
  const auto x = noise(g.in_channels * g.in_spatial(), 1);
  const auto w = noise(g.out_channels * g.patch_size(), 2);
  const auto b = noise(g.out_channels, 3);
  std::vector<float> out(g.out_channels * g.out_spatial());
  for (auto _ : state) {
    kernels::conv3d_forward(g, x.data(), w.data(), b.data(), out.data());
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(g.out_spatial() * g.out_channels * g.patch_size()));
}
BENCHMARK(BM_Conv3dForward)->Args({8, 16})->Args({16, 8})->Args({8, 32});

void BM_Conv3dBackwardParams(benchmark::State& state) {
  kernels::ConvGeometry g;
  g.in_channels = g.out_channels = static_cast<int>(state.range(0));
  g.depth = g.height = g.width = static_cast<int>(state.range(1));
  const auto x = noise(g.in_channels * g.in_spatial(), 1);
  const auto go = noise(g.out_channels * g.out_spatial(), 2);
  std::vector<float> gw(g.out_channels * g.patch_size()), gb(g.out_channels);
  for (auto _ : state) {
    kernels::conv3d_backward_params(g, x.data(), go.data(), gw.data(), gb.data());
    benchmark::DoNotOptimize(gw.data());
  }
}
BENCHMARK(BM_Conv3dBackwardParams)->Args({8, 16})->Args({16, 8});

void BM_UNetPredict(benchmark::State& state) {
  const int edge = static_cast<int>(state.range(0));
  UNet net(desk_network(edge), 1);
  Tensor<float> x({1, edge, edge, edge});
  const auto v = noise(x.size(), 4);
  std::copy(v.begin(), v.end(), x.data());
  for (auto _ : state) benchmark::DoNotOptimize(net.predict(x, 500));
}
BENCHMARK(BM_UNetPredict)->Arg(16)->Arg(32)->Unit(benchmark::kMillisecond);

void BM_ControlledPredict(benchmark::State& state) {
  UNet net(desk_network(16), 1);
  ControlAdapter<float> adapter(net);
  Tensor<float> x({1, 16, 16, 16}), y({1, 16, 16, 16});
  const auto v = noise(x.size(), 5);
  std::copy(v.begin(), v.end(), x.data());
  std::copy(v.begin(), v.end(), y.data());
  for (auto _ : state) benchmark::DoNotOptimize(predict_controlled(net, adapter, x, 500, y));
}
BENCHMARK(BM_ControlledPredict)->Unit(benchmark::kMillisecond);

void BM_Ssim3d(benchmark::State& state) {
  const int edge = static_cast<int>(state.range(0));
  Volume a({edge, edge, edge}), b({edge, edge, edge});
  a.data = noise(a.size(), 6);
  b.data = noise(b.size(), 7);
  for (auto _ : state) benchmark::DoNotOptimize(ssim3d(a, b, 2.0));
}
BENCHMARK(BM_Ssim3d)->Arg(32)->Arg(64)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
