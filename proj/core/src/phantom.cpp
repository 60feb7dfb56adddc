#include "vndiff/phantom.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "vndiff/error.hpp"
#include "vndiff/rng.hpp"

namespace vndiff {

namespace {

bool inside_grid(const std::array<double, 3>& c, const std::array<int, 3>& dims) {
  for (int a = 0; a < 3; ++a)
    if (!(c[a] >= 0.0 && c[a] <= dims[a] - 1)) return false;
  return true;
}

}  // namespace

void PhantomSpec::validate() const {
  for (int n : dims)
    if (n <= 0) throw ParameterError("phantom dims must be positive");
  for (double s : spacing)
    if (!(s > 0.0)) throw ParameterError("phantom spacing must be positive");
  if (!(background_level >= 0.0)) throw ParameterError("phantom background must be nonnegative");
  if (!(smoothing_mm >= 0.0)) throw ParameterError("phantom smoothing must be nonnegative");
  for (const auto& o : organs) {
    if (!inside_grid(o.center, dims)) throw ParameterError("organ centre outside the grid");
    for (int a = 0; a < 3; ++a) {
      if (!(o.radii[a] > 0.0)) throw ParameterError("organ radii must be positive");
      if (o.center[a] - o.radii[a] < -0.5 || o.center[a] + o.radii[a] > dims[a] - 0.5)
        throw ParameterError("organ extends outside the grid");
    }
    if (!(o.intensity >= 0.0)) throw ParameterError("organ intensity must be nonnegative");
  }
  for (const auto& l : lesions) {
    if (!inside_grid(l.center, dims)) throw ParameterError("lesion centre outside the grid");
    if (!(l.radius > 0.0)) throw ParameterError("lesion radius must be positive");
    for (int a = 0; a < 3; ++a)
      if (l.center[a] - l.radius < -0.5 || l.center[a] + l.radius > dims[a] - 0.5)
        throw ParameterError("lesion extends outside the grid");
    if (!(l.contrast >= 0.0)) throw ParameterError("lesion contrast must be nonnegative");
  }
}

void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = nlohmann::json{{"dims", s.dims},
                     {"spacing", s.spacing},
                     {"background_level", s.background_level},
                     {"smoothing_mm", s.smoothing_mm}};
  auto& organs = j["organs"] = nlohmann::json::array();
  for (const auto& o : s.organs)
    organs.push_back({{"center", o.center}, {"radii", o.radii}, {"intensity", o.intensity}});
  auto& lesions = j["lesions"] = nlohmann::json::array();
  for (const auto& l : s.lesions)
    lesions.push_back({{"center", l.center}, {"radius", l.radius}, {"contrast", l.contrast}});
}

PhantomSpec random_phantom_spec(std::array<int, 3> dims, std::uint64_t seed, const PhantomRanges& r) {
  Rng rng(seed);
  auto between = [&rng](double lo, double hi) { return lo + (hi - lo) * rng.uniform(); };
  PhantomSpec spec;
  spec.dims = dims;
  spec.background_level = r.background_level;
  spec.smoothing_mm = r.smoothing_mm;

  Ellipsoid body;
  for (int a = 0; a < 3; ++a) {
    const double half = 0.5 * (dims[a] - 1);
    body.radii[a] = half * between(0.70, 0.90);
    body.center[a] = half + between(-0.5, 0.5) * (half - body.radii[a]);
  }
  body.intensity = r.body_intensity;
  spec.organs.push_back(body);

  // Organs and lesions sit in the body's inner region so they never cross
  // the grid edge.
  auto point_in_body = [&](double margin) {
    std::array<double, 3> c{};
    for (;;) {
      double q = 0.0;
      for (int a = 0; a < 3; ++a) {
        const double u = between(-1.0, 1.0);
        c[a] = body.center[a] + u * std::max(0.0, body.radii[a] - margin);
        q += u * u;
      }
      if (q <= 1.0) return c;
    }
  };
  const int n_organs = rng.uniform_int(r.min_organs, r.max_organs);
  for (int i = 0; i < n_organs; ++i) {
    Ellipsoid o;
    for (int a = 0; a < 3; ++a) o.radii[a] = between(0.12, 0.30) * dims[a];
    const double margin = *std::max_element(o.radii.begin(), o.radii.end());
    o.center = point_in_body(margin);
    for (int a = 0; a < 3; ++a)
      o.radii[a] = std::min({o.radii[a], o.center[a] + 0.5, dims[a] - 0.5 - o.center[a]});
    o.intensity = between(r.organ_min, r.organ_max);
    spec.organs.push_back(o);
  }
  const int n_lesions = rng.uniform_int(r.min_lesions, r.max_lesions);
  for (int i = 0; i < n_lesions; ++i) {
    Lesion l;
    l.radius = between(r.lesion_radius_min, r.lesion_radius_max);
    l.center = point_in_body(l.radius + 1.0);
    for (int a = 0; a < 3; ++a) l.radius = std::min({l.radius, l.center[a] + 0.5, dims[a] - 0.5 - l.center[a]});
    l.contrast = between(r.contrast_min, r.contrast_max);
    spec.lesions.push_back(l);
  }
  return spec;
}

Volume generate_phantom(const PhantomSpec& spec, std::uint64_t /*seed*/) {
  spec.validate();
  Volume v(spec.dims, static_cast<float>(spec.background_level));
  v.spacing = spec.spacing;
  for (const auto& o : spec.organs) {
    for (int z = 0; z < spec.dims[2]; ++z)
      for (int y = 0; y < spec.dims[1]; ++y)
        for (int x = 0; x < spec.dims[0]; ++x) {
          const double dx = (x - o.center[0]) / o.radii[0], dy = (y - o.center[1]) / o.radii[1],
                       dz = (z - o.center[2]) / o.radii[2];
          if (dx * dx + dy * dy + dz * dz <= 1.0) v.at(x, y, z) = static_cast<float>(o.intensity);
        }
  }
  const Volume base = v;
  for (const auto& l : spec.lesions) {
    const double r2 = l.radius * l.radius;
    for (int z = 0; z < spec.dims[2]; ++z)
      for (int y = 0; y < spec.dims[1]; ++y)
        for (int x = 0; x < spec.dims[0]; ++x) {
          const double dx = x - l.center[0], dy = y - l.center[1], dz = z - l.center[2];
          if (dx * dx + dy * dy + dz * dz <= r2) v.at(x, y, z) = static_cast<float>(base.at(x, y, z) * l.contrast);
        }
  }
  if (spec.smoothing_mm > 0.0) {
    gaussian_smooth(v, {spec.smoothing_mm / spec.spacing[0], spec.smoothing_mm / spec.spacing[1],
                        spec.smoothing_mm / spec.spacing[2]});
  }
  return v;
}

void gaussian_smooth(Volume& v, std::array<double, 3> sigma) {
  const std::array<std::size_t, 3> stride{1, static_cast<std::size_t>(v.dims[0]),
                                          static_cast<std::size_t>(v.dims[0]) * v.dims[1]};
  std::vector<double> line;
  for (int axis = 0; axis < 3; ++axis) {
    if (!(sigma[axis] > 0.0)) continue;
    const int radius = static_cast<int>(std::ceil(3.0 * sigma[axis]));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma[axis] * sigma[axis]));
    for (double& w : k) w /= sum;

    const int n = v.dims[axis];
    line.resize(n);
    const std::size_t lines = v.size() / n;
    for (std::size_t li = 0; li < lines; ++li) {
      // Decompose the line index into the two remaining axes.
      std::size_t start;
      if (axis == 0) {
        start = li * n;
      } else if (axis == 1) {
        start = (li / v.dims[0]) * stride[2] + li % v.dims[0];
      } else {
        start = li;
      }
      for (int i = 0; i < n; ++i) line[i] = v.data[start + i * stride[axis]];
      for (int i = 0; i < n; ++i) {
        double acc = 0.0;
        for (int j = -radius; j <= radius; ++j) acc += k[j + radius] * line[std::clamp(i + j, 0, n - 1)];
        v.data[start + i * stride[axis]] = static_cast<float>(acc);
      }
    }
  }
}

Volume simulate_low_dose(const Volume& v, double dose_fraction, double counts_per_unit, std::uint64_t seed) {
  if (!(dose_fraction > 0.0 && dose_fraction <= 1.0)) throw ParameterError("dose_fraction must lie in (0, 1]");
  if (!(counts_per_unit > 0.0) || !std::isfinite(counts_per_unit))
    throw ParameterError("counts_per_unit must be positive");
  const double scale = counts_per_unit * dose_fraction;
  Rng rng(seed);
  Volume out = v;
  for (float& x : out.data) {
    if (!(x >= 0.0f)) throw DataError("simulate_low_dose: negative or non-finite activity");
    x = static_cast<float>(static_cast<double>(rng.poisson(x * scale)) / scale);
  }
  return out;
}

}  // namespace vndiff
