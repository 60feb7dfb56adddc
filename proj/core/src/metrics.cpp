#include "vndiff/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vndiff/binary_io.hpp"
#include "vndiff/error.hpp"
#include "vndiff/inference.hpp"

namespace vndiff {

double psnr(std::span<const float> a, std::span<const float> ref, double data_range) {
  if (a.size() != ref.size() || a.empty()) throw ShapeError("psnr: volumes differ in size");
  if (!(data_range > 0.0)) throw ParameterError("psnr: data_range must be positive");
  double sse = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - ref[i];
    sse += d * d;
  }
  if (sse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(data_range * data_range / (sse / static_cast<double>(a.size())));
}

double psnr(const Volume& a, const Volume& ref, double data_range) {
  if (a.dims != ref.dims) throw ShapeError("psnr: volume dims differ");
  return psnr(std::span<const float>(a.data), std::span<const float>(ref.data), data_range);
}

double dynamic_range(const Volume& ref) {
  const auto [lo, hi] = std::minmax_element(ref.data.begin(), ref.data.end());
  return static_cast<double>(*hi) - *lo;
}

namespace {

// Valid-mode separable filtering along one axis of a [nz][ny][nx] field.
std::vector<double> filter_axis(const std::vector<double>& in, std::array<int, 3>& dims, int axis,
                                const std::vector<double>& k) {
  const int e = static_cast<int>(k.size());
  std::array<int, 3> od = dims;
  od[axis] -= e - 1;
  std::vector<double> out(static_cast<std::size_t>(od[0]) * od[1] * od[2]);
  const std::size_t sx = 1, sy = dims[0], sz = static_cast<std::size_t>(dims[0]) * dims[1];
  const std::size_t step = axis == 0 ? sx : (axis == 1 ? sy : sz);
  std::size_t o = 0;
  for (int z = 0; z < od[2]; ++z)
    for (int y = 0; y < od[1]; ++y)
      for (int x = 0; x < od[0]; ++x) {
        const double* p = in.data() + z * sz + y * sy + x;
        double acc = 0.0;
        for (int i = 0; i < e; ++i) acc += k[i] * p[i * step];
        out[o++] = acc;
      }
  dims = od;
  return out;
}

std::vector<double> gaussian_filter_valid(const std::vector<double>& in, std::array<int, 3> dims,
                                          const std::vector<double>& k) {
  auto a = filter_axis(in, dims, 0, k);
  a = filter_axis(a, dims, 1, k);
  return filter_axis(a, dims, 2, k);
}

}  // namespace

double ssim3d(const Volume& a, const Volume& ref, double data_range, const SsimOptions& opts) {
  if (a.dims != ref.dims) throw ShapeError("ssim3d: volume dims differ");
  if (!(data_range > 0.0)) throw ParameterError("ssim3d: data_range must be positive");
  const int e = opts.window_edge;
  if (e < 1 || e % 2 == 0) throw ParameterError("ssim3d: window_edge must be odd");
  for (int d : a.dims)
    if (e > d) throw ParameterError("ssim3d: window larger than the volume");
  if (!(opts.window_sigma > 0.0)) throw ParameterError("ssim3d: window_sigma must be positive");

  std::vector<double> k(e);
  double ks = 0.0;
  for (int i = 0; i < e; ++i) {
    const double r = i - e / 2;
    ks += k[i] = std::exp(-0.5 * r * r / (opts.window_sigma * opts.window_sigma));
  }
  for (double& w : k) w /= ks;

  const std::size_t n = a.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a.data[i];
    y[i] = ref.data[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = gaussian_filter_valid(x, a.dims, k);
  const auto my = gaussian_filter_valid(y, a.dims, k);
  const auto mxx = gaussian_filter_valid(xx, a.dims, k);
  const auto myy = gaussian_filter_valid(yy, a.dims, k);
  const auto mxy = gaussian_filter_valid(xy, a.dims, k);

  const double c1 = (opts.k1 * data_range) * (opts.k1 * data_range);
  const double c2 = (opts.k2 * data_range) * (opts.k2 * data_range);
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = mxx[i] - mx[i] * mx[i];
    const double vy = myy[i] - my[i] * my[i];
    const double cxy = mxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

std::vector<double> signed_rank_null_counts(std::span<const double> ranks) {
  // Work in doubled ranks so midranks stay integral.
  int total = 0;
  std::vector<int> r2;
  for (double r : ranks) {
    r2.push_back(static_cast<int>(std::lround(2 * r)));
    total += r2.back();
  }
  std::vector<double> counts(static_cast<std::size_t>(total) + 1, 0.0);
  counts[0] = 1.0;
  int reach = 0;
  for (int r : r2) {
    for (int s = reach; s >= 0; --s)
      if (counts[s] != 0.0) counts[s + r] += counts[s];
    reach += r;
  }
  return counts;
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y, WilcoxonMethod method) {
  if (x.size() != y.size()) throw ShapeError("wilcoxon: samples differ in length");
  std::vector<double> d;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i] - y[i];
    if (!std::isfinite(v)) throw DataError("wilcoxon: non-finite difference");
    if (v != 0.0) d.push_back(v);
  }
  const int n = static_cast<int>(d.size());
  if (n < 5) throw InsufficientDataError("wilcoxon: " + std::to_string(n) + " nonzero differences, need at least 5");

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) { return std::abs(d[i]) < std::abs(d[j]); });
  std::vector<double> rank(n);
  double tie_term = 0.0;
  for (int i = 0; i < n;) {
    int j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double mid = 0.5 * (i + j) + 1.0;
    for (int k = i; k <= j; ++k) rank[order[k]] = mid;
    const double t = j - i + 1;
    tie_term += t * t * t - t;
    i = j + 1;
  }

  WilcoxonResult res;
  res.n = n;
  for (int i = 0; i < n; ++i) (d[i] > 0 ? res.w_plus : res.w_minus) += rank[i];

  const bool exact = method == WilcoxonMethod::exact || (method == WilcoxonMethod::automatic && n <= 25);
  res.exact = exact;
  if (exact) {
    const auto counts = signed_rank_null_counts(rank);
    const double all = std::ldexp(1.0, n);
    const auto w2 = static_cast<std::size_t>(std::lround(2 * res.w_plus));
    double lower = 0.0, upper = 0.0;
    for (std::size_t s = 0; s < counts.size(); ++s) {
      if (s <= w2) lower += counts[s];
      if (s >= w2) upper += counts[s];
    }
    res.p_value = std::min(1.0, 2.0 * std::min(lower, upper) / all);
  } else {
    const double mean = n * (n + 1) / 4.0;
    const double var = n * (n + 1) * (2.0 * n + 1) / 24.0 - tie_term / 48.0;
    if (!(var > 0.0)) throw InsufficientDataError("wilcoxon: zero variance");
    const double dev = std::max(0.0, std::abs(res.w_plus - mean) - 0.5);
    const double z = dev / std::sqrt(var);
    res.p_value = std::min(1.0, std::erfc(z / std::sqrt(2.0)));
  }
  return res;
}

std::string MetricsReport::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "subject,method,psnr_db,ssim,error\n";
  for (const auto& r : rows) {
    out << r.subject << ',' << r.method << ',';
    if (r.error.empty()) {
      if (std::isinf(r.psnr)) out << "identical";
      else out << r.psnr;
      out << ',' << r.ssim << ",\n";
    } else {
      std::string e = r.error;
      std::replace(e.begin(), e.end(), ',', ';');
      std::replace(e.begin(), e.end(), '\n', ' ');
      out << ",," << e << '\n';
    }
  }
  return out.str();
}

nlohmann::json MetricsReport::summary_json() const {
  nlohmann::json j;
  auto& methods = j["methods"] = nlohmann::json::array();
  for (const auto& s : summaries) {
    methods.push_back({{"method", s.method},
                       {"count", s.count},
                       {"psnr_mean", std::isfinite(s.psnr_mean) ? nlohmann::json(s.psnr_mean) : nlohmann::json("identical")},
                       {"psnr_std", std::isfinite(s.psnr_std) ? nlohmann::json(s.psnr_std) : nlohmann::json(nullptr)},
                       {"ssim_mean", s.ssim_mean},
                       {"ssim_std", s.ssim_std}});
  }
  auto& tests = j["tests"] = nlohmann::json::array();
  for (const auto& t : this->tests) {
    nlohmann::json e{{"method_a", t.method_a}, {"method_b", t.method_b}, {"metric", t.metric}};
    if (t.result) {
      e["n"] = t.result->n;
      e["w_plus"] = t.result->w_plus;
      e["w_minus"] = t.result->w_minus;
      e["p_value"] = t.result->p_value;
      e["exact"] = t.result->exact;
    } else {
      e["error"] = t.error;
    }
    tests.push_back(e);
  }
  j["errors"] = std::count_if(rows.begin(), rows.end(), [](const MetricRow& r) { return !r.error.empty(); });
  return j;
}

void MetricsReport::write(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  io::write_text_atomic(dir / "metrics.csv", to_csv());
  io::write_text_atomic(dir / "summary.json", summary_json().dump(2) + "\n");
}

namespace {

void mean_std(const std::vector<double>& v, double& mean, double& sd) {
  mean = sd = 0.0;
  if (v.empty()) return;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  if (v.size() < 2 || !std::isfinite(mean)) {
    sd = std::isfinite(mean) ? 0.0 : std::numeric_limits<double>::quiet_NaN();
    return;
  }
  for (double x : v) sd += (x - mean) * (x - mean);
  sd = std::sqrt(sd / static_cast<double>(v.size() - 1));
}

}  // namespace

MetricsReport evaluate_suite(const std::vector<Denoiser>& methods, const std::vector<TestCase>& cases,
                             const SsimOptions& ssim_opts, int workers) {
  std::vector<MetricRow> rows(methods.size() * cases.size());
  parallel_for(rows.size(), workers, [&](std::size_t k) {
    const Denoiser& m = methods[k / cases.size()];
    const TestCase& c = cases[k % cases.size()];
    MetricRow& row = rows[k];
    row.subject = c.subject;
    row.method = m.method;
    try {
      const Volume out = m.run(c);
      if (out.dims != c.x0.dims) throw ShapeError("output dims differ from ground truth");
      const double range = dynamic_range(c.x0);
      row.psnr = psnr(out, c.x0, range);
      row.ssim = ssim3d(out, c.x0, range, ssim_opts);
    } catch (const std::exception& e) {
      row.error = e.what();
    }
  });
  std::stable_sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
    return std::tie(a.method, a.subject) < std::tie(b.method, b.subject);
  });

  MetricsReport report;
  report.rows = rows;
  // Per-method values keyed by subject so paired tests line up.
  std::map<std::string, std::map<std::string, std::pair<double, double>>> ok;
  for (const auto& r : rows)
    if (r.error.empty()) ok[r.method][r.subject] = {r.psnr, r.ssim};
  for (const auto& m : methods) {
    MethodSummary s;
    s.method = m.method;
    std::vector<double> p, q;
    for (const auto& [subject, v] : ok[m.method]) {
      p.push_back(v.first);
      q.push_back(v.second);
    }
    s.count = static_cast<int>(p.size());
    mean_std(p, s.psnr_mean, s.psnr_std);
    mean_std(q, s.ssim_mean, s.ssim_std);
    report.summaries.push_back(s);
  }
  for (std::size_t i = 0; i < methods.size(); ++i)
    for (std::size_t j = i + 1; j < methods.size(); ++j)
      for (const char* metric : {"psnr", "ssim"}) {
        PairedTest t{methods[i].method, methods[j].method, metric, std::nullopt, {}};
        std::vector<double> a, b;
        for (const auto& [subject, va] : ok[t.method_a]) {
          auto it = ok[t.method_b].find(subject);
          if (it == ok[t.method_b].end()) continue;
          const bool is_psnr = t.metric == "psnr";
          a.push_back(is_psnr ? va.first : va.second);
          b.push_back(is_psnr ? it->second.first : it->second.second);
        }
        try {
          t.result = wilcoxon_signed_rank(a, b);
        } catch (const Error& e) {
          t.error = e.what();
        }
        report.tests.push_back(std::move(t));
      }
  return report;
}

}  // namespace vndiff
