#pragma once

#include <array>
#include <vector>

#include "vndiff/adapter.hpp"
#include "vndiff/volume.hpp"

namespace vndiff {

// Uniform random cubic crop origin inside `dims`.
std::array<int, 3> random_origin(std::array<int, 3> dims, int edge, Rng& rng);

// Draws `batch` crops of edge `edge` from randomly chosen volumes.
std::vector<Tensor<float>> sample_crops(const std::vector<Volume>& volumes, int edge, int batch, Rng& rng);

// Paired crops share one origin per entry.
struct PairedVolume {
  Volume x0;
  Volume y;
};
std::vector<PairedPatch> sample_paired_crops(const std::vector<PairedVolume>& pairs, int edge, int batch, Rng& rng);

// Unconditional epsilon objective, one Adam step on every trainable
// parameter of `net`. One uniform t and fresh noise per entry.
double pretrain_step(UNet& net, const std::vector<Tensor<float>>& batch, const NoiseSchedule& sched,
                     Adam& optimizer, Rng& rng);

// Epsilon objective for a network taking [x_t, y] on two input channels.
double conditional_step(UNet& net, const std::vector<PairedPatch>& batch, const NoiseSchedule& sched,
                        Adam& optimizer, Rng& rng);

// Direct regression mean((net(y, 0) - x0)^2); no diffusion.
double regression_step(UNet& net, const std::vector<PairedPatch>& batch, Adam& optimizer);

// [a; b] along channels.
Tensor<float> concat_channels(const Tensor<float>& a, const Tensor<float>& b);

}  // namespace vndiff
