#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "vndiff/tensor.hpp"

namespace vndiff {

enum class Units : std::uint8_t { activity = 0, normalized = 1 };

// Scalar field on a regular grid, x fastest. `norm_constant` is the vmax used
// by normalize() and must be positive when units == normalized.
struct Volume {
  std::array<int, 3> dims{0, 0, 0};  // (nx, ny, nz)
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm
  Units units = Units::activity;
  double norm_constant = 0.0;
  std::vector<float> data;

  Volume() = default;
  Volume(std::array<int, 3> dims, float fill = 0.0f);

  std::size_t size() const { return data.size(); }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[0] + x;
  }
  float& at(int x, int y, int z) { return data[index(x, y, z)]; }
  float at(int x, int y, int z) const { return data[index(x, y, z)]; }

  // [1, nz, ny, nx] view of the voxels; shares no storage.
  Tensor<float> tensor() const;
  // Copies metadata from `like` and voxels from a [1, nz, ny, nx] tensor.
  static Volume from_tensor(const Tensor<float>& t, const Volume& like);

  bool same_grid(const Volume& other) const { return dims == other.dims && spacing == other.spacing; }

  // Throws DataError on non-positive dims, data length mismatch, non-finite
  // voxels or a missing normalisation constant.
  void validate() const;
};

// Affine map [0, vmax] -> [-1, 1], clipping outside. Throws ParameterError
// for vmax <= 0.
Volume normalize(const Volume& v, double vmax);
// Inverse of normalize() on [-1, 1]; uses v.norm_constant when vmax is 0.
Volume denormalize(const Volume& v, double vmax = 0.0);

// VNVOL1 container, little-endian:
//   "VNVOL1\0\0", u32 nx ny nz, f64 sx sy sz, f64 norm_constant, u8 units,
//   f32 voxels x fastest.
inline constexpr char kVolumeMagic[8] = {'V', 'N', 'V', 'O', 'L', '1', '\0', '\0'};
inline constexpr std::size_t kVolumeHeaderBytes = 8 + 3 * 4 + 3 * 8 + 8 + 1;

std::vector<std::byte> encode_volume(const Volume& v);
// Throws BadMagicError, TruncatedError (header cut short) or
// PayloadLengthError (payload disagrees with dims).
Volume decode_volume(std::span<const std::byte> bytes);
void save_volume(const Volume& v, const std::filesystem::path& path);
Volume load_volume(const std::filesystem::path& path);

}  // namespace vndiff
