#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "vndiff/volume.hpp"

namespace vndiff {

// +inf when a == ref. Throws ShapeError / ParameterError.
double psnr(const Volume& a, const Volume& ref, double data_range);
double psnr(std::span<const float> a, std::span<const float> ref, double data_range);

struct SsimOptions {
  int window_edge = 7;
  double window_sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

// Mean of the local SSIM map over window positions fully inside the volume,
// Gaussian-weighted local moments. Throws ParameterError for even windows or
// windows larger than the volume.
double ssim3d(const Volume& a, const Volume& ref, double data_range, const SsimOptions& opts = {});

// max - min of the reference; the default data range for both metrics.
double dynamic_range(const Volume& ref);

enum class WilcoxonMethod { automatic, exact, normal };

struct WilcoxonResult {
  int n = 0;             // nonzero differences
  double w_plus = 0.0;   // sum of ranks of positive differences
  double w_minus = 0.0;
  double p_value = 1.0;  // two-sided
  bool exact = false;
};

// Paired two-sided signed-rank test on x - y. Zero differences are dropped;
// fewer than 5 remaining throws InsufficientDataError. `automatic` is exact
// for n <= 25 and the tie- and continuity-corrected normal approximation
// above that.
WilcoxonResult wilcoxon_signed_rank(std::span<const double> x, std::span<const double> y,
                                    WilcoxonMethod method = WilcoxonMethod::automatic);

// Exact null distribution of W+ for the given ranks, as counts indexed by
// 2 W+ (ranks may be half-integers). Size is 2 * sum(ranks) + 1.
std::vector<double> signed_rank_null_counts(std::span<const double> ranks);

struct MetricRow {
  std::string subject;
  std::string method;
  double psnr = 0.0;
  double ssim = 0.0;
  std::string error;  // non-empty when the method failed on this subject
};

struct MethodSummary {
  std::string method;
  int count = 0;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
};

struct PairedTest {
  std::string method_a, method_b, metric;
  std::optional<WilcoxonResult> result;
  std::string error;
};

struct MetricsReport {
  std::vector<MetricRow> rows;  // sorted by (method, subject)
  std::vector<MethodSummary> summaries;
  std::vector<PairedTest> tests;

  std::string to_csv() const;
  nlohmann::json summary_json() const;
  // Writes metrics.csv and summary.json atomically under `dir`.
  void write(const std::filesystem::path& dir) const;
};

struct TestCase {
  std::string subject;
  Volume x0;  // ground truth
  Volume y;   // degraded input
};

struct Denoiser {
  std::string method;
  std::function<Volume(const TestCase&)> run;
};

// Scores every method on every case. Method failures become row errors;
// rows with errors are skipped in summaries and tests. Volumes are compared
// in the space they are given in.
MetricsReport evaluate_suite(const std::vector<Denoiser>& methods, const std::vector<TestCase>& cases,
                             const SsimOptions& ssim = {}, int workers = 1);

}  // namespace vndiff
