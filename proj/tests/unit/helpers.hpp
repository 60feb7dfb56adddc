#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>

#include <unistd.h>

#include "vndiff/rng.hpp"
#include "vndiff/tensor.hpp"
#include "vndiff/unet.hpp"
#include "vndiff/volume.hpp"

namespace testutil {

inline vndiff::UNetConfig toy_config(int edge = 8) {
  vndiff::UNetConfig c;
  c.levels = 2;
  c.base_channels = 4;
  c.channel_mult = {1, 2};
  c.blocks_per_level = 1;
  c.time_embed_dim = 8;
  c.patch_edge = edge;
  return c;
}

template <typename Real = float>
vndiff::Tensor<Real> random_tensor(const vndiff::Shape& s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d(0.0, scale);
  vndiff::Tensor<Real> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<Real>(d(gen));
  return t;
}

inline vndiff::Volume random_volume(std::array<int, 3> dims, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<float> d(lo, hi);
  vndiff::Volume v(dims);
  for (float& x : v.data) x = d(gen);
  v.units = vndiff::Units::normalized;
  v.norm_constant = 8.0;
  return v;
}

// Gives a freshly built network a non-zero output layer so gradients reach
// every parameter.
template <typename Net>
void randomize_all(Net& net, std::uint64_t seed, double scale = 0.2) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d(0.0, scale);
  net.visit_parameters([&](const std::string& name, auto& p) {
    if (name.find("norm") != std::string::npos) return;
    using R = typename std::decay_t<decltype(p.value)>::value_type;
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += static_cast<R>(d(gen));
  });
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("vndiff_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testutil
