#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "vndiff/adapter.hpp"
#include "vndiff/patches.hpp"
#include "vndiff/volume.hpp"

namespace vndiff {

enum class Method { controlnet, con_ddpm, unet, ddpm_dc };

std::string to_string(Method m);
// Throws ParameterError for an unknown tag.
Method parse_method(const std::string& tag);

struct InferenceConfig {
  int patch_edge = 16;
  int stride = 8;
  int time_stride = 10;  // keep every k-th diffusion step
  std::uint64_t seed = 0;
  Method method = Method::controlnet;
  double dc_strength = 0.5;  // ddpm_dc only
  // Start each chain from y noised to step T instead of pure noise.
  bool start_from_condition = false;
  // Clip every intermediate x0 prediction to [-1, 1] before the step.
  bool clip_denoised = false;
  int workers = 1;

  // Throws ParameterError on non-positive sizes or a negative dc_strength.
  void validate() const;
};

void to_json(nlohmann::json& j, const InferenceConfig& c);
void from_json(const nlohmann::json& j, InferenceConfig& c);

// Seed of the reverse chain for the patch at `origin`.
std::uint64_t patch_seed(std::uint64_t seed, const std::array<int, 3>& origin);

// Runs `fn(i)` for i in [0, n) on up to `workers` threads. Results must be
// written to per-index slots; the first exception is rethrown.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

// Patchwise reverse diffusion over y and Hann-weighted stitching. The method
// tag picks the noise model:
//   controlnet  base steered by `adapter` (required)
//   con_ddpm    `base` has two input channels and sees [x_t, y]
//   unet        `base` regresses x0 from y directly (see regress_volume)
//   ddpm_dc     unconditional base with a consistency pull towards y
// Output is clipped to [-1, 1] and carries y's metadata.
// Throws ParameterError when the method and supplied models disagree.
Volume denoise_volume(UNet& base, ControlAdapter<float>* adapter, const Volume& y, const NoiseSchedule& sched,
                      const InferenceConfig& cfg);

// Unconditional sampling where every step replaces x0_hat by
// x0_hat - lambda (x0_hat - y) before forming the step mean.
Volume dc_baseline_denoise(UNet& base, const Volume& y, const NoiseSchedule& sched, const InferenceConfig& cfg);

// One forward pass net(y_patch, t = 0) per patch, stitched.
Volume regress_volume(UNet& net, const Volume& y, const InferenceConfig& cfg);

// Replaces eps so that its x0 prediction is clipped to [-1, 1]; voxels whose
// prediction is already in range are left bit-identical.
void clip_denoised_eps(Tensor<float>& eps, const Tensor<float>& x_t, double alpha_bar);

// DC correction in noise space: with x0_hat from (eps, x_t), returns the
// eps whose x0 prediction is x0_hat - lambda (x0_hat - y).
void dc_correct_eps(Tensor<float>& eps, const Tensor<float>& x_t, const Tensor<float>& y, double alpha_bar,
                    double lambda);

}  // namespace vndiff
