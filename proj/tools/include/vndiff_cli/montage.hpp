#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "vndiff/volume.hpp"

namespace vndiff::cli {

// Grey image, row-major.
struct Image {
  int width = 0, height = 0;
  std::vector<float> pixels;
};

// Central axial (xy), coronal (xz) and sagittal (yz) slices of every volume,
// one row per volume, slices side by side with a 1-pixel gap.
Image slice_montage(const std::vector<const Volume*>& rows);

// Binary P5 graymap windowed to [lo, hi]; writes `path` and a JSON sidecar
// `path` + ".json" with the window and row labels.
void write_pgm_montage(const Image& img, const std::vector<std::string>& row_labels,
                       const std::filesystem::path& path);

}  // namespace vndiff::cli
