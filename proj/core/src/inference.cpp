#include "vndiff/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "vndiff/error.hpp"
#include "vndiff/training.hpp"

namespace vndiff {

std::string to_string(Method m) {
  switch (m) {
    case Method::controlnet: return "controlnet";
    case Method::con_ddpm: return "con_ddpm";
    case Method::unet: return "unet";
    case Method::ddpm_dc: return "ddpm_dc";
  }
  return "?";
}

Method parse_method(const std::string& tag) {
  if (tag == "controlnet") return Method::controlnet;
  if (tag == "con_ddpm") return Method::con_ddpm;
  if (tag == "unet") return Method::unet;
  if (tag == "ddpm_dc") return Method::ddpm_dc;
  throw ParameterError("unknown method '" + tag + "' (expected controlnet, con_ddpm, unet or ddpm_dc)");
}

void InferenceConfig::validate() const {
  if (patch_edge < 1) throw ParameterError("inference.patch_edge must be positive");
  if (stride < 1 || stride > patch_edge) throw ParameterError("inference.stride must lie in [1, patch_edge]");
  if (time_stride < 1) throw ParameterError("inference.time_stride must be positive");
  if (!(dc_strength >= 0.0) || !std::isfinite(dc_strength)) throw ParameterError("inference.dc_strength must be >= 0");
  if (workers < 1) throw ParameterError("inference.workers must be positive");
}

void to_json(nlohmann::json& j, const InferenceConfig& c) {
  j = nlohmann::json{{"patch_edge", c.patch_edge},
                     {"stride", c.stride},
                     {"time_stride", c.time_stride},
                     {"seed", c.seed},
                     {"method", to_string(c.method)},
                     {"dc_strength", c.dc_strength},
                     {"start_from_condition", c.start_from_condition},
                     {"clip_denoised", c.clip_denoised},
                     {"workers", c.workers}};
}

void from_json(const nlohmann::json& j, InferenceConfig& c) {
  for (const auto& [key, value] : j.items()) {
    if (key == "patch_edge") c.patch_edge = value.get<int>();
    else if (key == "stride") c.stride = value.get<int>();
    else if (key == "time_stride") c.time_stride = value.get<int>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "method") c.method = parse_method(value.get<std::string>());
    else if (key == "dc_strength") c.dc_strength = value.get<double>();
    else if (key == "start_from_condition") c.start_from_condition = value.get<bool>();
    else if (key == "clip_denoised") c.clip_denoised = value.get<bool>();
    else if (key == "workers") c.workers = value.get<int>();
    else throw ParameterError("unknown inference key '" + key + "'");
  }
}

std::uint64_t patch_seed(std::uint64_t seed, const std::array<int, 3>& o) {
  const std::uint64_t packed = (static_cast<std::uint64_t>(o[0]) << 42) | (static_cast<std::uint64_t>(o[1]) << 21) |
                               static_cast<std::uint64_t>(o[2]);
  return derive_seed(seed, packed);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t threads = std::min<std::size_t>(std::max(1, workers), n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

void dc_correct_eps(Tensor<float>& eps, const Tensor<float>& x_t, const Tensor<float>& y, double alpha_bar,
                    double lambda) {
  require_same_shape(eps.shape(), y.shape(), "dc_correct_eps");
  const double sa = std::sqrt(alpha_bar), sb = std::sqrt(1.0 - alpha_bar);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double x0 = (x_t[i] - sb * eps[i]) / sa;
    eps[i] = static_cast<float>(eps[i] + sa * lambda * (x0 - y[i]) / sb);
  }
}

void clip_denoised_eps(Tensor<float>& eps, const Tensor<float>& x_t, double alpha_bar) {
  require_same_shape(eps.shape(), x_t.shape(), "clip_denoised_eps");
  const double sa = std::sqrt(alpha_bar), sb = std::sqrt(1.0 - alpha_bar);
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double x0 = (x_t[i] - sb * eps[i]) / sa;
    const double c = std::clamp(x0, -1.0, 1.0);
    if (c != x0) eps[i] = static_cast<float>((x_t[i] - sa * c) / sb);
  }
}

namespace {

// Optional DC pull followed by optional x0 clipping; empty when neither applies.
EpsCorrection make_correction(const NoiseSchedule& s, const InferenceConfig& cfg, const Tensor<float>* y,
                              double lambda) {
  const bool dc = y && lambda != 0.0;
  if (!dc && !cfg.clip_denoised) return {};
  const bool clip = cfg.clip_denoised;
  return [&s, y, lambda, dc, clip](Tensor<float>& eps, const Tensor<float>& x_t, int t) {
    if (dc) dc_correct_eps(eps, x_t, *y, s.alpha_bar(t), lambda);
    if (clip) clip_denoised_eps(eps, x_t, s.alpha_bar(t));
  };
}

void require_normalized(const Volume& y) {
  y.validate();
  if (y.units != Units::normalized) throw DataError("inference input must be a normalized volume");
}

// Per-patch chain, stitched and clipped.
Volume run_patches(const Volume& y, const InferenceConfig& cfg,
                   const std::function<Tensor<float>(const Tensor<float>& patch, Rng& rng)>& chain) {
  cfg.validate();
  const PatchGrid grid = plan_patches(y.dims, cfg.patch_edge, cfg.stride);
  const auto inputs = extract_patches(y, grid);
  std::vector<Tensor<float>> outputs(inputs.size());
  parallel_for(inputs.size(), cfg.workers, [&](std::size_t i) {
    Rng rng(patch_seed(cfg.seed, grid.origins[i]));
    outputs[i] = chain(inputs[i], rng);
  });
  Volume out = stitch(outputs, grid, y);
  for (float& v : out.data) {
    if (!std::isfinite(v)) throw NumericError("inference produced non-finite voxels");
    v = std::clamp(v, -1.0f, 1.0f);
  }
  return out;
}

Tensor<float> initial_state(const Tensor<float>& y, const NoiseSchedule& sched, const InferenceConfig& cfg,
                            Rng& rng) {
  Tensor<float> noise = gaussian_like<float>(y.shape(), rng);
  if (!cfg.start_from_condition) return noise;
  return forward_sample(y, sched.steps(), noise, sched);
}

void check_patch(const UNet& net, const InferenceConfig& cfg) {
  if (cfg.patch_edge % net.config().downsample_factor() != 0)
    throw ParameterError("inference.patch_edge must be divisible by " +
                         std::to_string(net.config().downsample_factor()));
}

}  // namespace

Volume dc_baseline_denoise(UNet& base, const Volume& y, const NoiseSchedule& sched, const InferenceConfig& cfg) {
  if (!(cfg.dc_strength >= 0.0)) throw ParameterError("dc_strength must be >= 0");
  if (base.config().in_channels != 1) throw ParameterError("ddpm_dc needs an unconditional network");
  require_normalized(y);
  check_patch(base, cfg);
  const NoiseSchedule s = sched.strided(cfg.time_stride);
  const double lambda = cfg.dc_strength;
  return run_patches(y, cfg, [&](const Tensor<float>& yp, Rng& rng) {
    EpsModel model = [&](const Tensor<float>& x, int t) { return base.predict(x, t); };
    return sample_from(model, initial_state(yp, s, cfg, rng), s, rng, make_correction(s, cfg, &yp, lambda));
  });
}

Volume regress_volume(UNet& net, const Volume& y, const InferenceConfig& cfg) {
  if (net.config().in_channels != 1) throw ParameterError("unet regression needs a single-channel network");
  require_normalized(y);
  check_patch(net, cfg);
  return run_patches(y, cfg, [&](const Tensor<float>& yp, Rng&) { return net.predict(yp, 0); });
}

Volume denoise_volume(UNet& base, ControlAdapter<float>* adapter, const Volume& y, const NoiseSchedule& sched,
                      const InferenceConfig& cfg) {
  cfg.validate();
  switch (cfg.method) {
    case Method::unet:
      if (adapter) throw ParameterError("method unet takes no adapter");
      return regress_volume(base, y, cfg);
    case Method::ddpm_dc:
      if (adapter) throw ParameterError("method ddpm_dc takes no adapter");
      return dc_baseline_denoise(base, y, sched, cfg);
    case Method::con_ddpm: {
      if (adapter) throw ParameterError("method con_ddpm takes no adapter");
      if (base.config().in_channels != 2) throw ParameterError("con_ddpm needs a network with in_channels = 2");
      require_normalized(y);
      check_patch(base, cfg);
      const NoiseSchedule s = sched.strided(cfg.time_stride);
      return run_patches(y, cfg, [&](const Tensor<float>& yp, Rng& rng) {
        EpsModel model = [&](const Tensor<float>& x, int t) { return base.predict(concat_channels(x, yp), t); };
        return sample_from(model, initial_state(yp, s, cfg, rng), s, rng, make_correction(s, cfg, nullptr, 0.0));
      });
    }
    case Method::controlnet: {
      if (!adapter) throw ParameterError("method controlnet requires an adapter");
      if (adapter->base_config() != base.config()) throw ParameterError("adapter was built for a different base");
      require_normalized(y);
      check_patch(base, cfg);
      const NoiseSchedule s = sched.strided(cfg.time_stride);
      return run_patches(y, cfg, [&](const Tensor<float>& yp, Rng& rng) {
        EpsModel model = [&](const Tensor<float>& x, int t) { return predict_controlled(base, *adapter, x, t, yp); };
        return sample_from(model, initial_state(yp, s, cfg, rng), s, rng, make_correction(s, cfg, nullptr, 0.0));
      });
    }
  }
  throw ParameterError("unknown method");
}

}  // namespace vndiff
