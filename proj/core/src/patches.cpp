#include "vndiff/patches.hpp"

#include <cmath>
#include <numbers>

#include "vndiff/error.hpp"

namespace vndiff {

std::vector<int> axis_origins(int dim, int patch_edge, int stride) {
  std::vector<int> out;
  for (int o = 0; o + patch_edge < dim; o += stride) out.push_back(o);
  out.push_back(dim - patch_edge);
  return out;
}

PatchGrid plan_patches(std::array<int, 3> dims, int patch_edge, int stride) {
  if (patch_edge < 1) throw ParameterError("patch_edge must be positive");
  for (int d : dims)
    if (patch_edge > d)
      throw ParameterError("patch_edge " + std::to_string(patch_edge) + " exceeds volume dim " + std::to_string(d));
  if (stride < 1 || stride > patch_edge) throw ParameterError("stride must lie in [1, patch_edge]");
  PatchGrid grid;
  grid.patch_edge = patch_edge;
  grid.stride = stride;
  grid.dims = dims;
  const auto ox = axis_origins(dims[0], patch_edge, stride);
  const auto oy = axis_origins(dims[1], patch_edge, stride);
  const auto oz = axis_origins(dims[2], patch_edge, stride);
  for (int z : oz)
    for (int y : oy)
      for (int x : ox) grid.origins.push_back({x, y, z});
  grid.window = hann_window(patch_edge);
  return grid;
}

std::vector<float> hann_window(int edge, double floor) {
  std::vector<double> w1(edge);
  for (int i = 0; i < edge; ++i)
    w1[i] = std::max(floor, 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (i + 0.5) / edge));
  std::vector<float> w(static_cast<std::size_t>(edge) * edge * edge);
  std::size_t k = 0;
  for (int z = 0; z < edge; ++z)
    for (int y = 0; y < edge; ++y)
      for (int x = 0; x < edge; ++x) w[k++] = static_cast<float>(w1[z] * w1[y] * w1[x]);
  return w;
}

Tensor<float> extract_patch(const Volume& v, std::array<int, 3> o, int edge) {
  for (int a = 0; a < 3; ++a)
    if (o[a] < 0 || o[a] + edge > v.dims[a]) throw ShapeError("patch outside the volume");
  Tensor<float> t(Shape{1, edge, edge, edge});
  float* dst = t.data();
  for (int z = 0; z < edge; ++z)
    for (int y = 0; y < edge; ++y) {
      const float* src = v.data.data() + v.index(o[0], o[1] + y, o[2] + z);
      std::copy(src, src + edge, dst);
      dst += edge;
    }
  return t;
}

std::vector<Tensor<float>> extract_patches(const Volume& v, const PatchGrid& grid) {
  if (v.dims != grid.dims) throw ShapeError("volume does not match the patch grid");
  std::vector<Tensor<float>> out;
  out.reserve(grid.origins.size());
  for (const auto& o : grid.origins) out.push_back(extract_patch(v, o, grid.patch_edge));
  return out;
}

namespace {

template <typename F>
void for_each_patch_voxel(const PatchGrid& grid, std::array<int, 3> o, F&& f) {
  const int p = grid.patch_edge;
  std::size_t k = 0;
  for (int z = 0; z < p; ++z)
    for (int y = 0; y < p; ++y) {
      const std::size_t row = (static_cast<std::size_t>(o[2] + z) * grid.dims[1] + (o[1] + y)) * grid.dims[0] + o[0];
      for (int x = 0; x < p; ++x, ++k) f(row + x, k);
    }
}

}  // namespace

std::vector<double> accumulated_weights(const PatchGrid& grid) {
  std::vector<double> acc(static_cast<std::size_t>(grid.dims[0]) * grid.dims[1] * grid.dims[2], 0.0);
  for (const auto& o : grid.origins)
    for_each_patch_voxel(grid, o, [&](std::size_t v, std::size_t k) { acc[v] += grid.window[k]; });
  return acc;
}

Volume stitch(const std::vector<Tensor<float>>& patches, const PatchGrid& grid, const Volume& like) {
  if (patches.size() != grid.origins.size())
    throw ShapeError("stitch: " + std::to_string(patches.size()) + " patches for a grid of " +
                     std::to_string(grid.origins.size()));
  if (like.dims != grid.dims) throw ShapeError("stitch: reference volume does not match the grid");
  const int p = grid.patch_edge;
  const Shape expected{1, p, p, p};
  std::vector<double> num(static_cast<std::size_t>(grid.dims[0]) * grid.dims[1] * grid.dims[2], 0.0);
  std::vector<double> den(num.size(), 0.0);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    require_same_shape(patches[i].shape(), expected, "stitch");
    const float* src = patches[i].data();
    for_each_patch_voxel(grid, grid.origins[i], [&](std::size_t v, std::size_t k) {
      num[v] += static_cast<double>(grid.window[k]) * src[k];
      den[v] += grid.window[k];
    });
  }
  Volume out = like;
  for (std::size_t v = 0; v < num.size(); ++v) out.data[v] = static_cast<float>(num[v] / den[v]);
  return out;
}

}  // namespace vndiff
