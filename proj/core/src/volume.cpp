#include "vndiff/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "vndiff/binary_io.hpp"
#include "vndiff/error.hpp"

namespace vndiff {

Volume::Volume(std::array<int, 3> d, float fill) : dims(d) {
  for (int n : dims)
    if (n <= 0) throw ParameterError("volume dims must be positive");
  data.assign(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2], fill);
}

Tensor<float> Volume::tensor() const {
  return Tensor<float>(Shape{1, dims[2], dims[1], dims[0]}, data);
}

Volume Volume::from_tensor(const Tensor<float>& t, const Volume& like) {
  const Shape expected{1, like.dims[2], like.dims[1], like.dims[0]};
  require_same_shape(t.shape(), expected, "Volume::from_tensor");
  Volume out;
  out.dims = like.dims;
  out.spacing = like.spacing;
  out.units = like.units;
  out.norm_constant = like.norm_constant;
  out.data.assign(t.values().begin(), t.values().end());
  return out;
}

void Volume::validate() const {
  for (int n : dims)
    if (n <= 0) throw DataError("volume dims must be positive");
  if (data.size() != static_cast<std::size_t>(dims[0]) * dims[1] * dims[2])
    throw DataError("volume data length disagrees with dims");
  for (float v : data)
    if (!std::isfinite(v)) throw DataError("volume contains non-finite voxels");
  if (units == Units::normalized && !(norm_constant > 0.0))
    throw DataError("normalized volume needs a positive normalisation constant");
}

Volume normalize(const Volume& v, double vmax) {
  if (!(vmax > 0.0) || !std::isfinite(vmax)) throw ParameterError("normalize: vmax must be positive");
  Volume out = v;
  const double scale = 2.0 / vmax;
  for (float& x : out.data) x = static_cast<float>(std::clamp(x * scale - 1.0, -1.0, 1.0));
  out.units = Units::normalized;
  out.norm_constant = vmax;
  return out;
}

Volume denormalize(const Volume& v, double vmax) {
  if (vmax == 0.0) vmax = v.norm_constant;
  if (!(vmax > 0.0) || !std::isfinite(vmax)) throw ParameterError("denormalize: vmax must be positive");
  Volume out = v;
  const double scale = vmax / 2.0;
  for (float& x : out.data) x = static_cast<float>((x + 1.0) * scale);
  out.units = Units::activity;
  out.norm_constant = vmax;
  return out;
}

std::vector<std::byte> encode_volume(const Volume& v) {
  std::vector<std::byte> out;
  out.reserve(kVolumeHeaderBytes + 4 * v.size());
  for (char c : kVolumeMagic) out.push_back(static_cast<std::byte>(c));
  for (int n : v.dims) io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(n));
  for (double s : v.spacing) io::put_le<double>(out, s);
  io::put_le<double>(out, v.norm_constant);
  io::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(v.units));
  io::put_floats_le(out, v.data);
  return out;
}

Volume decode_volume(std::span<const std::byte> bytes) {
  if (bytes.size() < sizeof kVolumeMagic || std::memcmp(bytes.data(), kVolumeMagic, sizeof kVolumeMagic) != 0)
    throw BadMagicError("not a VNVOL1 file");
  if (bytes.size() < kVolumeHeaderBytes) throw TruncatedError("VNVOL1 header truncated");
  const std::byte* p = bytes.data() + sizeof kVolumeMagic;
  Volume v;
  for (int& n : v.dims) {
    n = static_cast<int>(io::get_le<std::uint32_t>(p));
    p += 4;
  }
  for (double& s : v.spacing) {
    s = io::get_le<double>(p);
    p += 8;
  }
  v.norm_constant = io::get_le<double>(p);
  p += 8;
  const auto units = io::get_le<std::uint8_t>(p);
  if (units > 1) throw FormatError("VNVOL1 unknown units tag");
  v.units = static_cast<Units>(units);
  const std::uint64_t count =
      static_cast<std::uint64_t>(v.dims[0]) * static_cast<std::uint64_t>(v.dims[1]) * static_cast<std::uint64_t>(v.dims[2]);
  if (count == 0) throw FormatError("VNVOL1 zero dimension");
  if (bytes.size() - kVolumeHeaderBytes != count * 4)
    throw PayloadLengthError("VNVOL1 payload has " + std::to_string(bytes.size() - kVolumeHeaderBytes) +
                             " bytes, dims require " + std::to_string(count * 4));
  v.data.resize(count);
  io::get_floats_le(bytes.data() + kVolumeHeaderBytes, v.data);
  return v;
}

void save_volume(const Volume& v, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_volume(v));
}

Volume load_volume(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return decode_volume(bytes);
}

}  // namespace vndiff
