// Acceptance driver: one PASS/FAIL line per criterion, exit status 1 if any
// selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vndiff/adapter.hpp"
#include "vndiff/diffusion.hpp"
#include "vndiff/error.hpp"
#include "vndiff/metrics.hpp"
#include "vndiff/patches.hpp"
#include "vndiff/phantom.hpp"
#include "vndiff/training.hpp"
#include "vndiff/unet.hpp"
#include "vndiff_cli/commands.hpp"

using namespace vndiff;
namespace fs = std::filesystem;

namespace {

// Tolerances and sizes, fixed here so a run cannot loosen them.
constexpr double kIdentityTol = 1e-6;
constexpr double kIdentityBudgetS = 10.0;
constexpr int kFreezeSteps = 1000;
constexpr double kFreezeBudgetS = 300.0;
constexpr std::size_t kMonteCarloTrials = 100000;
constexpr double kStdErrors = 4.0;
constexpr double kSamplerTol = 1e-5;
constexpr double kSamplerValue = 1.00596;
constexpr double kZeroNetVariance = 5.0;
constexpr double kZeroNetRelTol = 0.02;
constexpr double kGradRelTol = 1e-3;
constexpr int kGradMinParams = 50;
constexpr int kGradTrials = 60;
constexpr double kGradBudgetS = 120.0;
constexpr double kStitchTol = 1e-6;
constexpr double kSsimConstant = 0.8000;
constexpr double kSsimTol = 1e-4;
constexpr double kWilcoxonP = 0.03125;
constexpr double kDoseValue = 4.0;
constexpr double kDoseFraction = 1.0 / 20.0;
constexpr double kCountsPerUnit = 100.0;
constexpr double kGainDb = 1.0;
constexpr int kMinImproved = 8;
constexpr double kUnetSlackDb = 0.5;
constexpr double kEndToEndBudgetS = 3600.0;

using clk = std::chrono::steady_clock;
double seconds_since(clk::time_point t0) { return std::chrono::duration<double>(clk::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

UNetConfig toy_config() {
  UNetConfig c;
  c.levels = 2;
  c.base_channels = 4;
  c.channel_mult = {1, 2};
  c.blocks_per_level = 1;
  c.time_embed_dim = 8;
  c.patch_edge = 8;
  return c;
}

template <typename R>
Tensor<R> gaussian(const Shape& s, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d(0.0, scale);
  Tensor<R> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<R>(d(gen));
  return t;
}

// A fresh network has a zero output layer; perturb everything except norms so
// the checks exercise a non-trivial function.
template <typename Net>
void perturb(Net& net, std::uint64_t seed, double scale) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> d(0.0, scale);
  net.visit_parameters([&](const std::string& name, auto& p) {
    if (name.find("norm") != std::string::npos) return;
    using R = typename std::decay_t<decltype(p.value)>::value_type;
    for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += static_cast<R>(d(gen));
  });
}

struct Moments {
  double mean = 0.0, var = 0.0;
};

Moments moments(std::span<const float> v) {
  Moments m;
  for (float x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (float x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(v.size() - 1);
  return m;
}

// Gaussian moments within kStdErrors standard errors.
bool gaussian_moments_ok(const Moments& m, double mean, double var, std::size_t n) {
  const double se_mean = std::sqrt(var / static_cast<double>(n));
  const double se_var = var * std::sqrt(2.0 / static_cast<double>(n - 1));
  return std::abs(m.mean - mean) <= kStdErrors * se_mean && std::abs(m.var - var) <= kStdErrors * se_var;
}

Outcome zero_init_identity() {
  const auto t0 = clk::now();
  UNetConfig c = cli::RunConfig{}.network;
  c.patch_edge = 16;
  UNet base(c, 101);
  perturb(base, 102, 0.1);
  ControlAdapter<float> adapter(base);
  std::mt19937_64 gen(103);
  double worst = 0.0;
  for (int k = 0; k < 10; ++k) {
    const auto x = gaussian<float>({1, 16, 16, 16}, gen());
    const auto y = gaussian<float>({1, 16, 16, 16}, gen());
    const int t = 1 + static_cast<int>(gen() % 1000);
    const auto a = predict_controlled(base, adapter, x, t, y);
    const auto b = base.predict(x, t);
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(a[i] - b[i])));
  }
  const double s = seconds_since(t0);
  return {worst <= kIdentityTol && s < kIdentityBudgetS, fmt("max |diff| %.3g over 10 triples at 16^3, %.1f s", worst, s)};
}

Outcome freeze_contract() {
  const auto t0 = clk::now();
  UNet base(toy_config(), 201);
  perturb(base, 202, 0.1);
  const std::string before = parameter_digest(base);
  ControlAdapter<float> adapter(base);
  const std::string adapter_before = parameter_digest(adapter);
  Adam opt(AdamOptions{1e-3});
  const auto sched = NoiseSchedule::linear(1000, 1e-4, 0.02);
  std::vector<PairedPatch> batch;
  for (int i = 0; i < 2; ++i) {
    auto x0 = gaussian<float>({1, 8, 8, 8}, 210 + i, 0.5);
    auto y = x0;
    y += gaussian<float>({1, 8, 8, 8}, 220 + i, 0.2);
    batch.push_back({x0, y});
  }
  for (int s = 0; s < kFreezeSteps; ++s) {
    Rng rng(derive_seed(203, static_cast<std::uint64_t>(s)));
    finetune_step(base, adapter, batch, sched, opt, rng);
  }
  const bool same = parameter_digest(base) == before && freeze_check(base, before);
  const bool moved = parameter_digest(adapter) != adapter_before;
  const double s = seconds_since(t0);
  return {same && moved && s < kFreezeBudgetS,
          fmt("base digest %s, adapter %s after %d steps, %.1f s", same ? "unchanged" : "CHANGED",
              moved ? "updated" : "not updated", kFreezeSteps, s)};
}

Outcome forward_consistency() {
  const auto sched = NoiseSchedule::linear(1000, 1e-4, 0.02);
  const Shape sh{1, 1, 1, static_cast<int>(kMonteCarloTrials)};
  const std::set<int> targets{1, 250, 500, 1000};
  Rng chain_rng(301), direct_rng(302);
  Tensor<float> x(sh, 1.0f);
  const Tensor<float> x0(sh, 1.0f);
  bool ok = true;
  std::string detail;
  for (int t = 1; t <= 1000; ++t) {
    x = forward_step(x, t, sched, chain_rng);
    if (!targets.contains(t)) continue;
    const double mean = std::sqrt(sched.alpha_bar(t)), var = 1.0 - sched.alpha_bar(t);
    const Moments composed = moments(x.values());
    const Moments direct = moments(forward_sample(x0, t, gaussian_like<float>(sh, direct_rng), sched).values());
    const bool here = gaussian_moments_ok(composed, mean, var, kMonteCarloTrials) &&
                      gaussian_moments_ok(direct, mean, var, kMonteCarloTrials);
    ok = ok && here;
    detail += fmt("t=%d mean %.4f/%.4f var %.4f/%.4f%s; ", t, composed.mean, mean, composed.var, var, here ? "" : " (off)");
  }
  return {ok, detail};
}

Outcome sampler_algebra() {
  const auto two = NoiseSchedule::linear(2, 0.5, 0.5);
  const Shape one{1, 1, 1, 1};
  const float v = reverse_step(Tensor<float>(one, 1.0f), Tensor<float>(one, 0.5f), 2, two, Tensor<float>(one, 0.0f))[0];
  const bool algebra = std::abs(v - kSamplerValue) <= kSamplerTol;

  const Shape sh{1, 1, 1, static_cast<int>(kMonteCarloTrials)};
  EpsModel zero = [](const Tensor<float>& x, int) { return Tensor<float>(x.shape()); };
  Rng rng(401);
  const Moments m = moments(sample(zero, sh, two, rng).values());
  const bool variance = std::abs(m.var - kZeroNetVariance) <= kZeroNetRelTol * kZeroNetVariance;
  return {algebra && variance, fmt("reverse step %.6f (want %.5f), zero-network variance %.4f (want %.1f)", v,
                                   kSamplerValue, m.var, kZeroNetVariance)};
}

struct GradCheck {
  int checked = 0, passed = 0;
  double worst = 0.0;
};

template <typename Visit>
GradCheck finite_differences(const ScoreFn<double>& fn, const std::function<void()>& zero_grad, Visit visit,
                             std::uint64_t seed) {
  const auto sched = NoiseSchedule::linear(1000, 1e-4, 0.02);
  const Shape sh{1, 8, 8, 8};
  const auto x0 = gaussian<double>(sh, seed + 1);
  const auto eps = gaussian<double>(sh, seed + 2);
  const int t = 1 + static_cast<int>(seed % 997);
  zero_grad();
  training_loss(fn, x0, t, eps, sched);
  std::vector<Parameter<double>*> params;
  std::vector<Tensor<double>> grads;
  visit([&](const std::string&, Parameter<double>& p) {
    params.push_back(&p);
    grads.push_back(p.grad);
  });
  std::mt19937_64 gen(seed);
  GradCheck out;
  for (int trial = 0; trial < kGradTrials; ++trial) {
    const std::size_t k = gen() % params.size();
    Parameter<double>& p = *params[k];
    const std::size_t i = gen() % p.value.size();
    const double h = 1e-5, orig = p.value[i];
    p.value[i] = orig + h;
    const double up = training_loss(fn, x0, t, eps, sched);
    p.value[i] = orig - h;
    const double down = training_loss(fn, x0, t, eps, sched);
    p.value[i] = orig;
    const double numeric = (up - down) / (2 * h);
    const double analytic = grads[k][i];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-7});
    out.worst = std::max(out.worst, rel);
    ++out.checked;
    out.passed += rel < kGradRelTol;
  }
  return out;
}

Outcome gradient_correctness() {
  const auto t0 = clk::now();
  auto base = UNet(toy_config(), 501).cast<double>();
  perturb(base, 502, 0.2);
  ScoreFn<double> base_fn = [&](Graph<double>& g, Var x, int t) { return base.forward(g, x, t).eps; };
  const GradCheck b = finite_differences(base_fn, [&] { base.zero_grad(); },
                                         [&](auto f) { base.visit_parameters(f); }, 503);

  ControlAdapter<double> adapter(base);
  perturb(adapter, 504, 0.1);
  const auto y = gaussian<double>({1, 8, 8, 8}, 505);
  ScoreFn<double> ad_fn = [&](Graph<double>& g, Var x, int t) { return adapter.forward(g, base, x, t, g.constant(y)); };
  const GradCheck a = finite_differences(ad_fn, [&] { adapter.zero_grad(); },
                                         [&](auto f) { adapter.visit_parameters(f); }, 506);
  const double s = seconds_since(t0);
  const bool ok = b.passed == b.checked && a.passed == a.checked && b.checked >= kGradMinParams &&
                  a.checked >= kGradMinParams && s < kGradBudgetS;
  return {ok, fmt("base %d/%d (worst rel %.2g), adapter %d/%d (worst rel %.2g), %.1f s", b.passed, b.checked, b.worst,
                  a.passed, a.checked, a.worst, s)};
}

Outcome stitch_exactness() {
  Volume v({48, 32, 32});
  std::mt19937_64 gen(601);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  for (float& x : v.data) x = d(gen);
  v.units = Units::normalized;
  const PatchGrid grid = plan_patches(v.dims, 32, 16);
  const Volume back = stitch(extract_patches(v, grid), grid, v);
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, static_cast<double>(std::abs(back.data[i] - v.data[i])));

  // Normalised weights sum to one iff stitching all-ones patches gives ones.
  std::vector<Tensor<float>> ones(grid.origins.size(), Tensor<float>({1, 32, 32, 32}, 1.0f));
  const Volume w = stitch(ones, grid, v);
  double weight_err = 0.0;
  for (float x : w.data) weight_err = std::max(weight_err, std::abs(static_cast<double>(x) - 1.0));
  const auto acc = accumulated_weights(grid);
  const bool covered = std::all_of(acc.begin(), acc.end(), [](double a) { return a > 0.0; });
  return {worst <= kStitchTol && weight_err <= kStitchTol && covered,
          fmt("%zu patches, max reconstruction error %.3g, max |sum w - 1| %.3g", grid.origins.size(), worst, weight_err)};
}

Outcome metric_oracles() {
  // Unit error against a range of 10 gives MSE 1 and exactly 20 dB.
  const double p = psnr(Volume({10, 10, 10}, 1.0f), Volume({10, 10, 10}, 0.0f), 10.0);
  const double s = ssim3d(Volume({9, 9, 9}, 1.0f), Volume({9, 9, 9}, 2.0f), 1.0);
  const std::vector<double> x{1, 2, 3, 4, 5, 6}, y(6, 0.0);
  const WilcoxonResult w = wilcoxon_signed_rank(x, y, WilcoxonMethod::exact);
  const bool ok = p == 20.0 && std::abs(s - kSsimConstant) <= kSsimTol && w.exact && w.p_value == kWilcoxonP;
  return {ok, fmt("psnr %.17g dB, constant-field ssim %.6f, wilcoxon n=%d p=%.17g", p, s, w.n, w.p_value)};
}

Outcome dose_moments() {
  // 10^5 voxels at v, each an independent Poisson draw.
  Volume v({100, 100, 10}, static_cast<float>(kDoseValue));
  const Volume y = simulate_low_dose(v, kDoseFraction, kCountsPerUnit, 801);
  const Moments m = moments(y.data);
  const double n = static_cast<double>(y.size());
  const double k = kCountsPerUnit * kDoseFraction, lambda = kDoseValue * k;
  const double var = kDoseValue / k;
  const double se_mean = std::sqrt(var / n);
  const double se_var = std::sqrt((lambda + 2.0 * lambda * lambda) / std::pow(k, 4) / n);
  const bool ok = std::abs(m.mean - kDoseValue) <= kStdErrors * se_mean && std::abs(m.var - var) <= kStdErrors * se_var;
  return {ok, fmt("mean %.4f (want %.1f, se %.4f), variance %.4f (want %.2f, se %.4f)", m.mean, kDoseValue, se_mean,
                  m.var, var, se_var)};
}

struct PipelineRun {
  MetricsReport report;
  std::map<std::string, double> low_dose_psnr;
  std::string csv;
  double seconds = 0.0;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

PipelineRun run_pipeline(const fs::path& dir) {
  const auto t0 = clk::now();
  fs::remove_all(dir);
  cli::CommandContext ctx;
  ctx.config = cli::RunConfig{};
  ctx.argv = {"acceptance", dir.string()};
  ctx.out_dir = dir / "data";
  cli::cmd_gen_data(ctx);
  ctx.out_dir = dir / "run";
  cli::cmd_pretrain(ctx, dir / "data");
  cli::cmd_finetune(ctx, dir / "run" / cli::kBaseCheckpoint, dir / "data");
  cli::cmd_train_baseline(ctx, "unet", dir / "data");
  cli::ModelPaths models;
  models.base = dir / "run" / cli::kBaseCheckpoint;
  models.adapter = dir / "run" / cli::kAdapterCheckpoint;
  models.unet = dir / "run" / cli::kUnetCheckpoint;
  PipelineRun out;
  out.report = cli::cmd_evaluate(ctx, models, dir / "data");
  for (const TestCase& c : cli::load_dataset(dir / "data").test)
    out.low_dose_psnr[c.subject] = psnr(c.y, c.x0, dynamic_range(c.x0));
  out.csv = slurp(dir / "run" / "report" / "metrics.csv");
  out.seconds = seconds_since(t0);
  return out;
}

Outcome end_to_end(const PipelineRun& run) {
  int improved = 0, scored = 0;
  std::string per_subject;
  for (const MetricRow& r : run.report.rows) {
    if (r.method != "controlnet" || !r.error.empty()) continue;
    const double gain = r.psnr - run.low_dose_psnr.at(r.subject);
    ++scored;
    improved += gain >= kGainDb;
    per_subject += fmt(" %+.2f", gain);
  }
  double adapter_mean = NAN, unet_mean = NAN;
  for (const MethodSummary& s : run.report.summaries) {
    if (s.method == "controlnet") adapter_mean = s.psnr_mean;
    if (s.method == "unet") unet_mean = s.psnr_mean;
  }
  double low_mean = 0.0;
  for (const auto& [_, v] : run.low_dose_psnr) low_mean += v;
  low_mean /= static_cast<double>(run.low_dose_psnr.size());
  const bool a = improved >= kMinImproved;
  const bool b = adapter_mean >= unet_mean - kUnetSlackDb;
  const bool ok = a && b && run.seconds <= kEndToEndBudgetS;
  return {ok, fmt("(a) %d/%d subjects gain >= %.0f dB [gains:%s] %s; (b) adapter %.2f dB vs unet %.2f dB %s; "
                  "low-dose mean %.2f dB; %.0f s",
                  improved, scored, kGainDb, per_subject.c_str(), a ? "ok" : "short", adapter_mean, unet_mean,
                  b ? "ok" : "short", low_mean, run.seconds)};
}

Outcome determinism(const PipelineRun& a, const PipelineRun& b) {
  bool rows_equal = a.report.rows.size() == b.report.rows.size();
  for (std::size_t i = 0; rows_equal && i < a.report.rows.size(); ++i) {
    const MetricRow &x = a.report.rows[i], &y = b.report.rows[i];
    rows_equal = x.subject == y.subject && x.method == y.method && x.error == y.error &&
                 std::memcmp(&x.psnr, &y.psnr, sizeof(double)) == 0 && std::memcmp(&x.ssim, &y.ssim, sizeof(double)) == 0;
  }
  const bool csv_equal = !a.csv.empty() && a.csv == b.csv;
  return {rows_equal && csv_equal, fmt("%zu metric rows %s, metrics.csv %s", a.report.rows.size(),
                                       rows_equal ? "bit-identical" : "DIFFER", csv_equal ? "byte-identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-10"};
  fs::path work_dir = fs::temp_directory_path() / "vndiff_acceptance";
  bool keep = false;
  std::vector<int> selected;
  app.add_option("--work-dir", work_dir, "Scratch directory for the end-to-end runs");
  app.add_flag("--keep", keep, "Keep the end-to-end run directories");
  app.add_option("criteria", selected, "Criterion numbers to run (default: all)")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  if (selected.empty())
    for (int i = 1; i <= 10; ++i) selected.push_back(i);
  const std::set<int> want(selected.begin(), selected.end());

  const std::map<int, std::pair<std::string, std::function<Outcome()>>> unit_checks{
      {1, {"zero-init identity", zero_init_identity}},
      {2, {"freeze contract", freeze_contract}},
      {3, {"forward-process consistency", forward_consistency}},
      {4, {"sampler algebra", sampler_algebra}},
      {5, {"gradient correctness", gradient_correctness}},
      {6, {"stitch exactness", stitch_exactness}},
      {7, {"metric oracles", metric_oracles}},
      {8, {"dose simulator moments", dose_moments}},
  };

  int failures = 0;
  auto report = [&](int n, const std::string& name, const Outcome& o) {
    std::printf("criterion %2d %s: %s: %s\n", n, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };
  auto guarded = [](const std::function<Outcome()>& f) -> Outcome {
    try {
      return f();
    } catch (const std::exception& e) {
      return {false, std::string("threw: ") + e.what()};
    }
  };

  for (const auto& [n, check] : unit_checks)
    if (want.contains(n)) report(n, check.first, guarded(check.second));

  if (want.contains(9) || want.contains(10)) {
    PipelineRun first, second;
    const Outcome e2e = guarded([&] {
      first = run_pipeline(work_dir / "run_a");
      return end_to_end(first);
    });
    if (want.contains(9)) report(9, "end-to-end desk experiment", e2e);
    if (want.contains(10))
      report(10, "determinism", guarded([&] {
               if (first.csv.empty()) return Outcome{false, "first run did not complete"};
               second = run_pipeline(work_dir / "run_b");
               return determinism(first, second);
             }));
    if (!keep) fs::remove_all(work_dir);
  }
  std::printf("%d of %zu criteria failed\n", failures, want.size());
  return failures == 0 ? 0 : 1;
}
