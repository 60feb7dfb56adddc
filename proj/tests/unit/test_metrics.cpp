#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include <nlohmann/json.hpp>

#include "helpers.hpp"
#include "vndiff/error.hpp"
#include "vndiff/metrics.hpp"

using namespace vndiff;

namespace {

Volume constant(std::array<int, 3> dims, float c) {
  Volume v(dims, c);
  return v;
}

Volume noisy_copy(const Volume& ref, double amplitude, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d(0.0, amplitude);
  Volume out = ref;
  for (float& v : out.data) v = static_cast<float>(v + d(gen));
  return out;
}

// Brute-force two-sided exact p over all 2^n sign assignments.
double enumerate_p(const std::vector<double>& ranks, double w_plus) {
  const int n = static_cast<int>(ranks.size());
  double total = 0.0;
  for (double r : ranks) total += r;
  const double mean = total / 2.0;
  const double dev = std::abs(w_plus - mean);
  std::uint64_t extreme = 0;
  for (std::uint64_t mask = 0; mask < (1ull << n); ++mask) {
    double w = 0.0;
    for (int i = 0; i < n; ++i)
      if (mask >> i & 1) w += ranks[static_cast<std::size_t>(i)];
    if (std::abs(w - mean) >= dev - 1e-9) ++extreme;
  }
  return std::min(1.0, static_cast<double>(extreme) / std::ldexp(1.0, n));
}

}  // namespace

TEST(Psnr, ClosedForm) {
  Volume ref = constant({10, 10, 1}, 0.0f);
  Volume a = constant({10, 10, 1}, 0.1f);  // MSE = 0.01
  EXPECT_NEAR(psnr(a, ref, 1.0), 20.0, 1e-5);
}

TEST(Psnr, IdenticalIsSentinel) {
  const Volume v = testutil::random_volume({4, 4, 4}, 1);
  EXPECT_TRUE(std::isinf(psnr(v, v, 2.0)));
  EXPECT_GT(psnr(v, v, 2.0), 0.0);
}

TEST(Psnr, MatchesOneLineOracle) {
  const Volume a = testutil::random_volume({8, 8, 8}, 3);
  const Volume b = testutil::random_volume({8, 8, 8}, 4);
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (double(a.data[i]) - b.data[i]) * (double(a.data[i]) - b.data[i]);
  const double oracle = 10.0 * std::log10(1.7 * 1.7 / (s / a.size()));
  EXPECT_NEAR(psnr(a, b, 1.7), oracle, 1e-9);
}

TEST(Psnr, RejectsBadInput) {
  const Volume a = testutil::random_volume({4, 4, 4}, 1);
  EXPECT_THROW(psnr(a, testutil::random_volume({4, 4, 5}, 1), 1.0), ShapeError);
  EXPECT_THROW(psnr(a, a, 0.0), ParameterError);
}

TEST(Ssim, IdentityIsOne) {
  const Volume v = testutil::random_volume({9, 9, 9}, 5);
  EXPECT_EQ(ssim3d(v, v, dynamic_range(v)), 1.0);
}

TEST(Ssim, ConstantFieldsLuminanceOnly) {
  const double want = (2.0 * 1.0 * 2.0 + 1e-4) / (1.0 + 4.0 + 1e-4);
  EXPECT_NEAR(want, 0.800004, 1e-6);
  EXPECT_NEAR(ssim3d(constant({8, 8, 8}, 1.0f), constant({8, 8, 8}, 2.0f), 1.0), want, 1e-9);
}

TEST(Ssim, Symmetric) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const Volume a = testutil::random_volume({10, 9, 8}, 10 + s);
    const Volume b = noisy_copy(a, 0.3, s);
    EXPECT_NEAR(ssim3d(a, b, 2.0), ssim3d(b, a, 2.0), 1e-12);
    const double v = ssim3d(a, b, 2.0);
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Ssim, RejectsBadWindows) {
  const Volume a = testutil::random_volume({6, 8, 8}, 1);
  EXPECT_THROW(ssim3d(a, a, 1.0), ParameterError);  // 7 > 6
  SsimOptions even;
  even.window_edge = 4;
  EXPECT_THROW(ssim3d(a, a, 1.0, even), ParameterError);
  EXPECT_THROW(ssim3d(a, testutil::random_volume({6, 8, 9}, 1), 1.0), ShapeError);
}

TEST(MetricsProperty, MonotoneUnderGrowingNoise) {
  int psnr_ok = 0, ssim_ok = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Volume ref = testutil::random_volume({12, 12, 12}, 100 + seed, 0.0f, 1.0f);
    const double r = dynamic_range(ref);
    double prev_p = INFINITY, prev_s = 1.0;
    bool p_mono = true, s_mono = true;
    for (double amp : {0.01, 0.05, 0.1}) {
      const Volume a = noisy_copy(ref, amp, seed * 7 + static_cast<std::uint64_t>(amp * 1000));
      const double p = psnr(a, ref, r), s = ssim3d(a, ref, r);
      p_mono = p_mono && p < prev_p;
      s_mono = s_mono && s < prev_s;
      prev_p = p;
      prev_s = s;
    }
    psnr_ok += p_mono;
    ssim_ok += s_mono;
  }
  EXPECT_GE(psnr_ok, 19);
  EXPECT_GE(ssim_ok, 19);
}

TEST(Wilcoxon, AllPositiveSixIsExactTwoOver64) {
  const std::vector<double> x{1, 2, 3, 4, 5, 6}, y(6, 0.0);
  const auto r = wilcoxon_signed_rank(x, y);
  EXPECT_EQ(r.n, 6);
  EXPECT_TRUE(r.exact);
  EXPECT_EQ(r.w_minus, 0.0);
  EXPECT_EQ(r.w_plus, 21.0);
  EXPECT_DOUBLE_EQ(r.p_value, 0.03125);
  EXPECT_DOUBLE_EQ(wilcoxon_signed_rank(y, x).p_value, 0.03125);
}

TEST(Wilcoxon, IdenticalSamplesAreInsufficient) {
  const std::vector<double> x{1, 2, 3, 4, 5, 6};
  EXPECT_THROW(wilcoxon_signed_rank(x, x), InsufficientDataError);
  const std::vector<double> a{1, 2, 3, 4, 5, 6}, b{1, 2, 3, 4, 0, 0};
  EXPECT_THROW(wilcoxon_signed_rank(a, b), InsufficientDataError);
  EXPECT_THROW(wilcoxon_signed_rank(a, std::vector<double>{1, 2}), ShapeError);
}

TEST(Wilcoxon, ExactMatchesBruteForceEnumeration) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> d(0.3, 1.0);
  for (int n = 5; n <= 14; ++n) {
    std::vector<double> x(n), y(n, 0.0);
    // Rounding creates tied magnitudes, exercising midranks.
    for (double& v : x) v = std::round(d(gen) * 4.0) / 4.0;
    for (auto& v : x)
      if (v == 0.0) v = 0.25;
    const auto r = wilcoxon_signed_rank(x, y, WilcoxonMethod::exact);
    std::vector<double> mags;
    for (double v : x) mags.push_back(std::abs(v));
    std::vector<double> ranks(n);
    for (int i = 0; i < n; ++i) {
      double less = 0, equal = 0;
      for (double m : mags) {
        less += m < mags[i];
        equal += m == mags[i];
      }
      ranks[i] = less + (equal + 1.0) / 2.0;
    }
    double w = 0;
    for (int i = 0; i < n; ++i)
      if (x[i] > 0) w += ranks[i];
    EXPECT_DOUBLE_EQ(r.w_plus, w) << n;
    EXPECT_NEAR(r.p_value, enumerate_p(ranks, w), 1e-12) << n;
  }
}

TEST(Wilcoxon, NullDistributionSumsToOne) {
  for (int n = 1; n <= 10; ++n) {
    std::vector<double> ranks(n);
    for (int i = 0; i < n; ++i) ranks[i] = i + 1;
    if (n >= 4) ranks[1] = ranks[2] = 2.5;  // one tie
    const auto counts = signed_rank_null_counts(ranks);
    double total = 0;
    for (double c : counts) total += c;
    EXPECT_DOUBLE_EQ(total, std::ldexp(1.0, n));
  }
}

TEST(Wilcoxon, ExactAndNormalAgreeAtTwenty) {
  std::mt19937_64 gen(11);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> x(60), y(60);
  for (int i = 0; i < 60; ++i) {
    y[i] = d(gen);
    x[i] = y[i] + 0.3 + 0.8 * d(gen);
  }
  const std::vector<double> xs(x.begin(), x.begin() + 20), ys(y.begin(), y.begin() + 20);
  const auto e = wilcoxon_signed_rank(xs, ys, WilcoxonMethod::exact);
  const auto a = wilcoxon_signed_rank(xs, ys, WilcoxonMethod::normal);
  EXPECT_TRUE(e.exact);
  EXPECT_FALSE(a.exact);
  EXPECT_NEAR(e.p_value, a.p_value, 0.01);
  EXPECT_FALSE(wilcoxon_signed_rank(x, y).exact);
  EXPECT_TRUE(wilcoxon_signed_rank(xs, ys).exact);
  const auto full = wilcoxon_signed_rank(x, y);
  EXPECT_GT(full.p_value, 0.0);
  EXPECT_LE(full.p_value, 1.0);
}

TEST(EvaluateSuite, IdentityMethodGivesSentinelAndUnitSsim) {
  std::vector<TestCase> cases;
  for (int i = 0; i < 3; ++i)
    cases.push_back({"s" + std::to_string(i), testutil::random_volume({8, 8, 8}, i), testutil::random_volume({8, 8, 8}, 10 + i)});
  const auto report = evaluate_suite({{"oracle", [](const TestCase& c) { return c.x0; }}}, cases);
  ASSERT_EQ(report.rows.size(), 3u);
  for (const auto& r : report.rows) {
    EXPECT_TRUE(std::isinf(r.psnr));
    EXPECT_EQ(r.ssim, 1.0);
  }
  EXPECT_NE(report.to_csv().find("identical"), std::string::npos);
}

TEST(EvaluateSuite, IdenticalMethodsPairAsInsufficient) {
  std::vector<TestCase> cases;
  for (int i = 0; i < 6; ++i)
    cases.push_back({"s" + std::to_string(i), testutil::random_volume({8, 8, 8}, i), testutil::random_volume({8, 8, 8}, 10 + i)});
  auto same = [](const TestCase& c) { return c.y; };
  const auto report = evaluate_suite({{"a", same}, {"b", same}}, cases);
  ASSERT_EQ(report.tests.size(), 2u);
  for (const auto& t : report.tests) {
    EXPECT_FALSE(t.result.has_value());
    EXPECT_FALSE(t.error.empty());
  }
}

TEST(EvaluateSuite, TwoMethodsTenSubjectsStructure) {
  std::vector<TestCase> cases;
  for (int i = 0; i < 10; ++i) {
    Volume x0 = testutil::random_volume({8, 8, 8}, 50 + i);
    cases.push_back({"subject" + std::to_string(9 - i), x0, noisy_copy(x0, 0.3, i)});
  }
  std::vector<Denoiser> methods{
      {"unet", [](const TestCase& c) { return noisy_copy(c.x0, 0.2, c.y.data.size() + c.subject.size()); }},
      {"controlnet", [](const TestCase& c) {
         if (c.subject == "subject3") throw NumericError("diverged");
         return noisy_copy(c.x0, 0.1, c.subject.back());
       }}};
  const auto report = evaluate_suite(methods, cases, {}, 3);
  ASSERT_EQ(report.rows.size(), 20u);
  for (std::size_t i = 1; i < report.rows.size(); ++i) {
    const auto& a = report.rows[i - 1];
    const auto& b = report.rows[i];
    EXPECT_TRUE(std::tie(a.method, a.subject) < std::tie(b.method, b.subject));
  }
  EXPECT_EQ(report.rows[0].method, "controlnet");
  EXPECT_EQ(report.rows[3].error, "diverged");
  // Summaries keep the order methods were supplied in.
  ASSERT_EQ(report.summaries.size(), 2u);
  EXPECT_EQ(report.summaries[0].method, "unet");
  EXPECT_EQ(report.summaries[0].count, 10);
  EXPECT_EQ(report.summaries[1].method, "controlnet");
  EXPECT_EQ(report.summaries[1].count, 9);
  ASSERT_EQ(report.tests.size(), 2u);
  for (const auto& t : report.tests) {
    ASSERT_TRUE(t.result.has_value()) << t.error;
    EXPECT_EQ(t.result->n, 9);
    EXPECT_GT(t.result->p_value, 0.0);
    EXPECT_LE(t.result->p_value, 1.0);
  }
  EXPECT_EQ(report.tests[0].metric, "psnr");
  EXPECT_EQ(report.tests[1].metric, "ssim");

  double mean = 0;
  std::vector<double> xs;
  for (const auto& r : report.rows)
    if (r.method == "unet") xs.push_back(r.psnr);
  for (double v : xs) mean += v / xs.size();
  double var = 0;
  for (double v : xs) var += (v - mean) * (v - mean) / (xs.size() - 1);
  EXPECT_NEAR(report.summaries[0].psnr_mean, mean, 1e-9);
  EXPECT_NEAR(report.summaries[0].psnr_std, std::sqrt(var), 1e-9);

  const auto sequential = evaluate_suite(methods, cases, {}, 1);
  EXPECT_EQ(sequential.to_csv(), report.to_csv());

  const std::string csv = report.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "subject,method,psnr_db,ssim,error");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 21);
  const auto j = report.summary_json();
  EXPECT_EQ(j["methods"].size(), 2u);
  EXPECT_EQ(j["tests"].size(), 2u);
  EXPECT_EQ(j["errors"], 1);
}

TEST(EvaluateSuite, WritesReportFiles) {
  const auto dir = testutil::temp_dir("report");
  std::vector<TestCase> cases{{"a", testutil::random_volume({8, 8, 8}, 1), testutil::random_volume({8, 8, 8}, 2)}};
  const auto report = evaluate_suite({{"id", [](const TestCase& c) { return c.y; }}}, cases);
  report.write(dir);
  std::ifstream csv(dir / "metrics.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(header, "subject,method,psnr_db,ssim,error");
  EXPECT_TRUE(std::filesystem::exists(dir / "summary.json"));
  std::filesystem::remove_all(dir);
}
