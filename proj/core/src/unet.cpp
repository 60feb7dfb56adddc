#include "vndiff/unet.hpp"

#include <cmath>
#include <nlohmann/json.hpp>

#include "vndiff/error.hpp"

namespace vndiff {

void UNetConfig::validate() const {
  if (levels < 1 || base_channels < 1 || blocks_per_level < 1 || time_embed_dim < 1 ||
      in_channels < 1 || patch_edge < 1) {
    throw ParameterError("UNetConfig: all counts must be positive");
  }
  if (channel_mult.size() != static_cast<std::size_t>(levels)) {
    throw ParameterError("UNetConfig: channel_mult needs one entry per level (" +
                         std::to_string(levels) + "), got " + std::to_string(channel_mult.size()));
  }
  for (int m : channel_mult) {
    if (m < 1) throw ParameterError("UNetConfig: channel multipliers must be positive");
  }
  if (time_embed_dim % 2 != 0) throw ParameterError("UNetConfig: time_embed_dim must be even");
  if (patch_edge % downsample_factor() != 0) {
    throw ParameterError("UNetConfig: patch_edge " + std::to_string(patch_edge) +
                         " is not divisible by " + std::to_string(downsample_factor()));
  }
}

void to_json(nlohmann::json& j, const UNetConfig& c) {
  j = nlohmann::json{{"levels", c.levels},
                     {"base_channels", c.base_channels},
                     {"channel_mult", c.channel_mult},
                     {"blocks_per_level", c.blocks_per_level},
                     {"time_embed_dim", c.time_embed_dim},
                     {"in_channels", c.in_channels},
                     {"patch_edge", c.patch_edge}};
}

void from_json(const nlohmann::json& j, UNetConfig& c) {
  static const char* known[] = {"levels",         "base_channels", "channel_mult", "blocks_per_level",
                                "time_embed_dim", "in_channels",   "patch_edge"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(known), std::end(known), key) == std::end(known)) {
      throw ParameterError("UNetConfig: unknown key '" + key + "'");
    }
  }
  UNetConfig d;
  c.levels = j.value("levels", d.levels);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.channel_mult = j.value("channel_mult", d.channel_mult);
  c.blocks_per_level = j.value("blocks_per_level", d.blocks_per_level);
  c.time_embed_dim = j.value("time_embed_dim", d.time_embed_dim);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.patch_edge = j.value("patch_edge", d.patch_edge);
}

std::size_t unet_parameter_count(const UNetConfig& c) {
  c.validate();
  const std::size_t E = static_cast<std::size_t>(c.time_embed_dim);
  auto conv = [](std::size_t k, std::size_t in, std::size_t out) { return k * k * k * in * out + out; };
  auto norm = [](std::size_t ch) { return 2 * ch; };
  auto lin = [](std::size_t in, std::size_t out) { return in * out + out; };
  auto res = [&](std::size_t in, std::size_t out) {
    return norm(in) + conv(3, in, out) + lin(E, out) + norm(out) + conv(3, out, out) +
           (in != out ? conv(1, in, out) : 0);
  };
  const auto C = [&](int l) { return static_cast<std::size_t>(c.level_channels(l)); };
  const std::size_t B = static_cast<std::size_t>(c.blocks_per_level);
  const int L = c.levels;

  std::size_t n = 2 * lin(E, E);
  n += conv(3, static_cast<std::size_t>(c.in_channels), static_cast<std::size_t>(c.base_channels));
  for (int l = 0; l < L; ++l) {
    const std::size_t in = l == 0 ? static_cast<std::size_t>(c.base_channels) : C(l - 1);
    n += res(in, C(l)) + (B - 1) * res(C(l), C(l));
    if (l < L - 1) n += conv(3, C(l), C(l));
  }
  n += res(C(L - 1), C(L - 1));
  for (int l = 0; l < L; ++l) {
    n += res(2 * C(l), C(l)) + (B - 1) * res(C(l), C(l));
    if (l > 0) n += conv(3, C(l), C(l - 1));
  }
  n += norm(C(0)) + conv(3, C(0), 1);
  return n;
}

std::vector<double> time_embedding(int t, int dim) {
  if (dim <= 0 || dim % 2 != 0) {
    throw ParameterError("time_embedding: dim must be positive and even, got " + std::to_string(dim));
  }
  const int half = dim / 2;
  std::vector<double> out(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
    out[2 * i] = std::sin(t * freq);
    out[2 * i + 1] = std::cos(t * freq);
  }
  return out;
}

template <typename Real>
EncoderTrace run_encoder(Graph<Real>& g, std::vector<EncoderLevel<Real>>& levels, Var h, Var temb) {
  EncoderTrace trace;
  for (auto& level : levels) {
    for (auto& block : level.blocks) h = block(g, h, temb);
    trace.skips.push_back(h);
    if (level.down) h = (*level.down)(g, h);
  }
  trace.bottom = trace.skips.back();
  return trace;
}

template <typename Real>
void visit_encoder(std::vector<EncoderLevel<Real>>& levels, const std::string& prefix,
                   const std::function<void(const std::string&, Parameter<Real>&)>& f) {
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const std::string lp = prefix + "." + std::to_string(l);
    for (std::size_t b = 0; b < levels[l].blocks.size(); ++b) {
      levels[l].blocks[b].visit(lp + ".block." + std::to_string(b), f);
    }
    if (levels[l].down) levels[l].down->visit(lp + ".down", f);
  }
}

template <typename Real>
ScoreNetwork<Real>::ScoreNetwork(const UNetConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const int E = config_.time_embed_dim;
  const int L = config_.levels;
  const int B = config_.blocks_per_level;
  time_fc1_ = Linear<Real>(E, E, rng);
  time_fc2_ = Linear<Real>(E, E, rng);
  input_ = Conv3d<Real>(config_.in_channels, config_.base_channels, 3, 1, rng);

  encoder_.resize(static_cast<std::size_t>(L));
  for (int l = 0; l < L; ++l) {
    const int ch = config_.level_channels(l);
    const int in = l == 0 ? config_.base_channels : config_.level_channels(l - 1);
    auto& level = encoder_[static_cast<std::size_t>(l)];
    for (int b = 0; b < B; ++b) level.blocks.emplace_back(b == 0 ? in : ch, ch, E, rng);
    if (l < L - 1) level.down.emplace(ch, ch, 3, 2, rng);
  }
  middle_ = ResBlock<Real>(config_.level_channels(L - 1), config_.level_channels(L - 1), E, rng);

  decoder_.resize(static_cast<std::size_t>(L));
  for (int l = L - 1; l >= 0; --l) {
    const int ch = config_.level_channels(l);
    auto& level = decoder_[static_cast<std::size_t>(l)];
    for (int b = 0; b < B; ++b) level.blocks.emplace_back(b == 0 ? 2 * ch : ch, ch, E, rng);
    if (l > 0) level.up.emplace(ch, config_.level_channels(l - 1), 3, 1, rng);
  }
  out_norm_ = GroupNorm<Real>(config_.level_channels(0));
  output_ = Conv3d<Real>::zeros(config_.level_channels(0), 1, 3);
}

template <typename Real>
void ScoreNetwork<Real>::set_frozen(bool frozen) {
  frozen_ = frozen;
  visit_parameters([frozen](const std::string&, Parameter<Real>& p) { p.requires_grad = !frozen; });
}

template <typename Real>
Var ScoreNetwork<Real>::embed_time(Graph<Real>& g, int t) {
  const auto feats = time_embedding(t, config_.time_embed_dim);
  Tensor<Real> v(Shape{config_.time_embed_dim});
  for (std::size_t i = 0; i < feats.size(); ++i) v[i] = static_cast<Real>(feats[i]);
  Var h = g.silu(time_fc1_(g, g.constant(std::move(v))));
  return g.silu(time_fc2_(g, h));
}

template <typename Real>
Var ScoreNetwork<Real>::input_layer(Graph<Real>& g, Var x) {
  return input_(g, x);
}

template <typename Real>
EncoderTrace ScoreNetwork<Real>::encode(Graph<Real>& g, Var h, Var temb) {
  return run_encoder(g, encoder_, h, temb);
}

template <typename Real>
Var ScoreNetwork<Real>::decode(Graph<Real>& g, Var features, std::span<const Var> skips, Var temb) {
  if (skips.size() != decoder_.size()) throw ShapeError("decode: one skip tensor per level required");
  Var h = middle_(g, features, temb);
  for (std::size_t l = decoder_.size(); l-- > 0;) {
    auto& level = decoder_[l];
    h = g.concat_channels(h, skips[l]);
    for (auto& block : level.blocks) h = block(g, h, temb);
    if (level.up) h = (*level.up)(g, g.upsample_nearest2(h));
  }
  return output_(g, g.silu(out_norm_(g, h)));
}

template <typename Real>
void ScoreNetwork<Real>::check_input(const Shape& s) const {
  if (s.rank() != 4 || s[0] != config_.in_channels) {
    throw ShapeError("score network expects [" + std::to_string(config_.in_channels) +
                     ", D, H, W] input, got " + s.str());
  }
  const int f = config_.downsample_factor();
  for (int i = 1; i < 4; ++i) {
    if (s[i] % f != 0) {
      throw ShapeError("score network input " + s.str() + " is not divisible by downsampling factor " +
                       std::to_string(f));
    }
  }
}

template <typename Real>
typename ScoreNetwork<Real>::Output ScoreNetwork<Real>::forward(Graph<Real>& g, Var x, int t) {
  check_input(g.value(x).shape());
  Var temb = embed_time(g, t);
  EncoderTrace enc = encode(g, input_layer(g, x), temb);
  Output out;
  out.eps = decode(g, enc.bottom, enc.skips, temb);
  out.features = enc.bottom;
  out.skips = std::move(enc.skips);
  return out;
}

template <typename Real>
Tensor<Real> ScoreNetwork<Real>::predict(const Tensor<Real>& x, int t) {
  Graph<Real> g(GradMode::disabled);
  return g.take(forward(g, g.constant(x), t).eps);
}

template <typename Real>
void ScoreNetwork<Real>::visit_parameters(const ParamVisitor& f) {
  time_fc1_.visit("time.fc1", f);
  time_fc2_.visit("time.fc2", f);
  input_.visit("input", f);
  visit_encoder(encoder_, "encoder", f);
  middle_.visit("middle", f);
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const std::string lp = "decoder." + std::to_string(l);
    for (std::size_t b = 0; b < decoder_[l].blocks.size(); ++b) {
      decoder_[l].blocks[b].visit(lp + ".block." + std::to_string(b), f);
    }
    if (decoder_[l].up) decoder_[l].up->visit(lp + ".up", f);
  }
  out_norm_.visit("output.norm", f);
  output_.visit("output.conv", f);
}

template <typename Real>
void ScoreNetwork<Real>::for_each_parameter(const ConstParamVisitor& f) const {
  const_cast<ScoreNetwork*>(this)->visit_parameters(
      [&f](const std::string& name, Parameter<Real>& p) { f(name, p); });
}

template <typename Real>
std::size_t ScoreNetwork<Real>::parameter_count() const {
  std::size_t n = 0;
  for_each_parameter([&n](const std::string&, const Parameter<Real>& p) { n += p.value.size(); });
  return n;
}

template <typename Real>
void ScoreNetwork<Real>::zero_grad() {
  visit_parameters([](const std::string&, Parameter<Real>& p) { p.zero_grad(); });
}

template EncoderTrace run_encoder<float>(Graph<float>&, std::vector<EncoderLevel<float>>&, Var, Var);
template EncoderTrace run_encoder<double>(Graph<double>&, std::vector<EncoderLevel<double>>&, Var, Var);
template void visit_encoder<float>(std::vector<EncoderLevel<float>>&, const std::string&,
                                   const std::function<void(const std::string&, Parameter<float>&)>&);
template void visit_encoder<double>(std::vector<EncoderLevel<double>>&, const std::string&,
                                    const std::function<void(const std::string&, Parameter<double>&)>&);
template class ScoreNetwork<float>;
template class ScoreNetwork<double>;

}  // namespace vndiff
