#pragma once

#include <array>
#include <vector>

#include "vndiff/volume.hpp"

namespace vndiff {

// Overlapping cubic tiling of a volume. Origins are (x, y, z) voxel offsets
// in lexicographic z, y, x order.
struct PatchGrid {
  int patch_edge = 0;
  int stride = 0;
  std::array<int, 3> dims{};
  std::vector<std::array<int, 3>> origins;
  std::vector<float> window;  // patch_edge^3 blend weights, x fastest

  std::size_t patch_voxels() const {
    return static_cast<std::size_t>(patch_edge) * patch_edge * patch_edge;
  }
};

// Per-axis origins 0, s, 2s, ... with the last clamped to dim - patch_edge.
std::vector<int> axis_origins(int dim, int patch_edge, int stride);

// Throws ParameterError when patch_edge exceeds a dim or stride is outside
// [1, patch_edge].
PatchGrid plan_patches(std::array<int, 3> dims, int patch_edge, int stride);

// Separable Hann window, each axis factor floored at `floor`.
std::vector<float> hann_window(int edge, double floor = 1e-3);

// Cuts every patch of the grid as a [1, p, p, p] tensor.
std::vector<Tensor<float>> extract_patches(const Volume& v, const PatchGrid& grid);
Tensor<float> extract_patch(const Volume& v, std::array<int, 3> origin, int edge);

// Sum of window weights covering each voxel.
std::vector<double> accumulated_weights(const PatchGrid& grid);

// out(v) = sum_i w_i(v) p_i(v) / sum_i w_i(v). Metadata comes from `like`.
// Throws ShapeError when the patch list does not match the grid.
Volume stitch(const std::vector<Tensor<float>>& patches, const PatchGrid& grid, const Volume& like);

}  // namespace vndiff
