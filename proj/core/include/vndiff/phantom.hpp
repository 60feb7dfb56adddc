#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vndiff/volume.hpp"

namespace vndiff {

// Positions and radii are in voxels; x, y, z order.
struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};
  double intensity = 1.0;
};

struct Lesion {
  std::array<double, 3> center{};
  double radius = 1.0;
  double contrast = 2.0;  // multiplies the underlying activity
};

struct PhantomSpec {
  std::array<int, 3> dims{32, 32, 32};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  double background_level = 0.1;
  std::vector<Ellipsoid> organs;  // painted in order, later ones overwrite
  std::vector<Lesion> lesions;
  double smoothing_mm = 1.0;  // Gaussian sigma; 0 disables

  // Throws ParameterError when a shape leaves the grid or an intensity is
  // negative.
  void validate() const;
};

void to_json(nlohmann::json& j, const PhantomSpec& s);

// Ranges for random_phantom_spec().
struct PhantomRanges {
  double background_level = 0.1;
  double body_intensity = 1.0;
  int min_organs = 2, max_organs = 4;
  double organ_min = 1.5, organ_max = 3.0;
  int min_lesions = 1, max_lesions = 3;
  double lesion_radius_min = 1.5, lesion_radius_max = 3.0;
  double contrast_min = 1.5, contrast_max = 2.5;
  double smoothing_mm = 1.0;
};

// Body ellipsoid, organs inside it and hot lesions, all drawn from `seed`.
PhantomSpec random_phantom_spec(std::array<int, 3> dims, std::uint64_t seed, const PhantomRanges& ranges = {});

// Rasterises the spec and blurs it. The spec fully determines the result;
// `seed` is accepted for symmetry with the random generators.
Volume generate_phantom(const PhantomSpec& spec, std::uint64_t seed);

// Separable Gaussian blur with per-axis sigma in voxels; borders replicate.
void gaussian_smooth(Volume& v, std::array<double, 3> sigma_vox);

// Poisson thinning in count space: Poisson(v * c * f) / (c * f) per voxel.
// Throws ParameterError for f outside (0, 1] or c <= 0 and DataError for a
// negative voxel.
Volume simulate_low_dose(const Volume& v, double dose_fraction, double counts_per_unit, std::uint64_t seed);

}  // namespace vndiff
