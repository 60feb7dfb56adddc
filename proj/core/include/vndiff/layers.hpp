#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "vndiff/graph.hpp"
#include "vndiff/rng.hpp"

namespace vndiff {

// Largest group count from {8, 4, 2, 1} that divides `channels`.
inline int norm_groups(int channels) {
  for (int g : {8, 4, 2}) {
    if (channels % g == 0) return g;
  }
  return 1;
}

template <typename Real>
void init_uniform(Tensor<Real>& t, double bound, Rng& rng) {
  for (auto& v : t.values()) v = static_cast<Real>((2.0 * rng.uniform() - 1.0) * bound);
}

template <typename Real>
struct Conv3d {
  Parameter<Real> weight;
  Parameter<Real> bias;
  int stride = 1;

  Conv3d() = default;
  Conv3d(int in, int out, int kernel, int stride_, Rng& rng)
      : weight(Shape{out, in, kernel, kernel, kernel}), bias(Shape{out}), stride(stride_) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in) * kernel * kernel * kernel);
    init_uniform(weight.value, bound, rng);
    init_uniform(bias.value, bound, rng);
  }
  // Weights and bias exactly zero.
  static Conv3d zeros(int in, int out, int kernel) {
    Conv3d c;
    c.weight = Parameter<Real>(Shape{out, in, kernel, kernel, kernel});
    c.bias = Parameter<Real>(Shape{out});
    return c;
  }

  int in_channels() const { return weight.value.shape()[1]; }
  int out_channels() const { return weight.value.shape()[0]; }

  Var operator()(Graph<Real>& g, Var x) {
    return g.conv3d(x, g.parameter(weight), g.parameter(bias), stride);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

template <typename Real>
struct GroupNorm {
  Parameter<Real> gamma;
  Parameter<Real> beta;
  int groups = 1;

  GroupNorm() = default;
  explicit GroupNorm(int channels)
      : gamma(Shape{channels}), beta(Shape{channels}), groups(norm_groups(channels)) {
    gamma.value.fill(Real(1));
  }

  Var operator()(Graph<Real>& g, Var x) {
    return g.group_norm(x, g.parameter(gamma), g.parameter(beta), groups);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".gamma", gamma);
    f(prefix + ".beta", beta);
  }
};

template <typename Real>
struct Linear {
  Parameter<Real> weight;
  Parameter<Real> bias;

  Linear() = default;
  Linear(int in, int out, Rng& rng) : weight(Shape{out, in}), bias(Shape{out}) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    init_uniform(weight.value, bound, rng);
    init_uniform(bias.value, bound, rng);
  }

  Var operator()(Graph<Real>& g, Var x) {
    return g.linear(x, g.parameter(weight), g.parameter(bias));
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".weight", weight);
    f(prefix + ".bias", bias);
  }
};

// Pre-activation residual block with an additive per-channel time bias:
//   h = conv1(silu(norm1(x))) + proj(temb)
//   out = skip(x) + conv2(silu(norm2(h)))
// `temb` is the already-activated time embedding.
template <typename Real>
struct ResBlock {
  GroupNorm<Real> norm1;
  Conv3d<Real> conv1;
  Linear<Real> time_proj;
  GroupNorm<Real> norm2;
  Conv3d<Real> conv2;
  std::optional<Conv3d<Real>> skip;

  ResBlock() = default;
  ResBlock(int in, int out, int time_dim, Rng& rng)
      : norm1(in),
        conv1(in, out, 3, 1, rng),
        time_proj(time_dim, out, rng),
        norm2(out),
        conv2(out, out, 3, 1, rng) {
    if (in != out) skip.emplace(in, out, 1, 1, rng);
  }

  Var operator()(Graph<Real>& g, Var x, Var temb) {
    Var h = conv1(g, g.silu(norm1(g, x)));
    h = g.add_channel_bias(h, time_proj(g, temb));
    h = conv2(g, g.silu(norm2(g, h)));
    Var shortcut = skip ? (*skip)(g, x) : x;
    return g.add(shortcut, h);
  }

  template <typename F>
  void visit(const std::string& prefix, F&& f) {
    norm1.visit(prefix + ".norm1", f);
    conv1.visit(prefix + ".conv1", f);
    time_proj.visit(prefix + ".time_proj", f);
    norm2.visit(prefix + ".norm2", f);
    conv2.visit(prefix + ".conv2", f);
    if (skip) skip->visit(prefix + ".skip", f);
  }
};

}  // namespace vndiff
