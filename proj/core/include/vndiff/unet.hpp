#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vndiff/layers.hpp"

namespace vndiff {

struct UNetConfig {
  int levels = 3;
  int base_channels = 32;
  std::vector<int> channel_mult{1, 2, 4};
  int blocks_per_level = 2;
  int time_embed_dim = 128;
  int in_channels = 1;
  int patch_edge = 16;

  // Throws ParameterError when a count is non-positive, channel_mult has the
  // wrong length, or patch_edge is not divisible by the downsampling factor.
  void validate() const;
  int downsample_factor() const { return 1 << (levels - 1); }
  int level_channels(int level) const {
    return base_channels * channel_mult.at(static_cast<std::size_t>(level));
  }
  bool operator==(const UNetConfig&) const = default;
};

void to_json(nlohmann::json& j, const UNetConfig& c);
void from_json(const nlohmann::json& j, UNetConfig& c);

// Number of scalars build_unet() allocates for `config`. Closed form,
// documented in the README.
std::size_t unet_parameter_count(const UNetConfig& config);

// Sinusoidal features of t, interleaved [sin(t w_0), cos(t w_0), sin(t w_1), ...]
// with w_i = 10000^(-i / (dim / 2)). Throws ParameterError for odd dim.
std::vector<double> time_embedding(int t, int dim);

template <typename Real>
struct EncoderLevel {
  std::vector<ResBlock<Real>> blocks;
  std::optional<Conv3d<Real>> down;  // stride-2 conv; absent at the bottom level
};

template <typename Real>
struct DecoderLevel {
  std::vector<ResBlock<Real>> blocks;
  std::optional<Conv3d<Real>> up;  // conv after nearest x2; absent at level 0
};

struct EncoderTrace {
  std::vector<Var> skips;  // one per level, before downsampling
  Var bottom;              // f_t: output of the last encoder level
};

// Runs encoder levels. Shared by the base trunk and the adapter copy.
template <typename Real>
EncoderTrace run_encoder(Graph<Real>& g, std::vector<EncoderLevel<Real>>& levels, Var h, Var temb);

template <typename Real>
void visit_encoder(std::vector<EncoderLevel<Real>>& levels, const std::string& prefix,
                   const std::function<void(const std::string&, Parameter<Real>&)>& f);

// 3D UNet noise predictor with an explicit trunk partition:
//   input layer F_I            conv 3^3, in_channels -> base_channels
//   encoder F_E                per level: residual blocks, then stride-2 conv
//   middle                     one residual block at the bottom resolution
//   decoder                    per level: concat skip, residual blocks, upsample
//   output layer               norm, silu, conv 3^3 -> 1 channel (zero init)
// Copyable; copies are deep.
template <typename Real>
class ScoreNetwork {
 public:
  using ParamVisitor = std::function<void(const std::string&, Parameter<Real>&)>;
  using ConstParamVisitor = std::function<void(const std::string&, const Parameter<Real>&)>;

  struct Output {
    Var eps;
    Var features;  // f_t
    std::vector<Var> skips;
  };

  ScoreNetwork() = default;
  ScoreNetwork(const UNetConfig& config, std::uint64_t seed);

  const UNetConfig& config() const { return config_; }

  bool frozen() const { return frozen_; }
  void set_frozen(bool frozen);

  // Activated time embedding for timestep t.
  Var embed_time(Graph<Real>& g, int t);
  Var input_layer(Graph<Real>& g, Var x);
  EncoderTrace encode(Graph<Real>& g, Var h, Var temb);
  // Middle block, decoder and output layer. `skips` holds one tensor per level.
  Var decode(Graph<Real>& g, Var features, std::span<const Var> skips, Var temb);

  Output forward(Graph<Real>& g, Var x, int t);
  // Gradient-free evaluation; x is [in_channels, D, H, W].
  Tensor<Real> predict(const Tensor<Real>& x, int t);

  void check_input(const Shape& s) const;

  Conv3d<Real>& input_conv() { return input_; }
  std::vector<EncoderLevel<Real>>& encoder() { return encoder_; }

  void visit_parameters(const ParamVisitor& f);
  void for_each_parameter(const ConstParamVisitor& f) const;
  std::size_t parameter_count() const;
  void zero_grad();

  // Re-instantiates the same weights at another precision.
  template <typename To>
  ScoreNetwork<To> cast() const;

 private:
  template <typename>
  friend class ScoreNetwork;

  UNetConfig config_;
  Linear<Real> time_fc1_;
  Linear<Real> time_fc2_;
  Conv3d<Real> input_;
  std::vector<EncoderLevel<Real>> encoder_;
  ResBlock<Real> middle_;
  std::vector<DecoderLevel<Real>> decoder_;  // indexed by level
  GroupNorm<Real> out_norm_;
  Conv3d<Real> output_;
  bool frozen_ = false;
};

template <typename Real>
ScoreNetwork<Real> build_unet(const UNetConfig& config, std::uint64_t seed) {
  return ScoreNetwork<Real>(config, seed);
}

template <typename Real>
template <typename To>
ScoreNetwork<To> ScoreNetwork<Real>::cast() const {
  ScoreNetwork<To> out(config_, 0);
  std::vector<const Parameter<Real>*> src;
  for_each_parameter([&](const std::string&, const Parameter<Real>& p) { src.push_back(&p); });
  std::size_t i = 0;
  out.visit_parameters([&](const std::string&, Parameter<To>& p) {
    p.value = src[i]->value.template cast<To>();
    p.requires_grad = src[i]->requires_grad;
    ++i;
  });
  out.frozen_ = frozen_;
  return out;
}

using UNet = ScoreNetwork<float>;

extern template class ScoreNetwork<float>;
extern template class ScoreNetwork<double>;

}  // namespace vndiff
