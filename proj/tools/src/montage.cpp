#include "vndiff_cli/montage.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <nlohmann/json.hpp>

#include "vndiff/binary_io.hpp"
#include "vndiff/error.hpp"

namespace vndiff::cli {

Image slice_montage(const std::vector<const Volume*>& rows) {
  if (rows.empty()) throw ParameterError("montage needs at least one volume");
  const auto d = rows.front()->dims;
  for (const Volume* v : rows)
    if (v->dims != d) throw ShapeError("montage volumes differ in dims");
  const int nx = d[0], ny = d[1], nz = d[2];
  const int gap = 1;
  const int tile_h = std::max(ny, nz);
  Image img;
  img.width = nx + gap + nx + gap + ny;
  img.height = static_cast<int>(rows.size()) * (tile_h + gap) - gap;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, std::nanf(""));
  auto put = [&img](int x, int y, float v) { img.pixels[static_cast<std::size_t>(y) * img.width + x] = v; };
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const Volume& v = *rows[r];
    const int top = static_cast<int>(r) * (tile_h + gap);
    // Display rows run from high to low index so "up" is +y / +z.
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) put(x, top + (ny - 1 - y), v.at(x, y, nz / 2));
    for (int z = 0; z < nz; ++z)
      for (int x = 0; x < nx; ++x) put(nx + gap + x, top + (nz - 1 - z), v.at(x, ny / 2, z));
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y) put(2 * (nx + gap) + y, top + (nz - 1 - z), v.at(nx / 2, y, z));
  }
  return img;
}

void write_pgm_montage(const Image& img, const std::vector<std::string>& row_labels,
                       const std::filesystem::path& path) {
  float lo = std::numeric_limits<float>::infinity(), hi = -lo;
  for (float p : img.pixels)
    if (!std::isnan(p)) {
      lo = std::min(lo, p);
      hi = std::max(hi, p);
    }
  if (!(hi > lo)) hi = lo + 1.0f;
  std::string bytes = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  for (float p : img.pixels) {
    const double u = std::isnan(p) ? 0.0 : (p - lo) / (hi - lo);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(u, 0.0, 1.0) * 255.0))));
  }
  io::write_text_atomic(path, bytes);
  nlohmann::json side{{"format", "P5"},
                      {"width", img.width},
                      {"height", img.height},
                      {"window_min", lo},
                      {"window_max", hi},
                      {"rows", row_labels},
                      {"columns", {"axial", "coronal", "sagittal"}}};
  io::write_text_atomic(path.string() + ".json", side.dump(2) + "\n");
}

}  // namespace vndiff::cli
