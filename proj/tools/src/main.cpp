#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "vndiff/error.hpp"
#include "vndiff_cli/commands.hpp"

using namespace vndiff::cli;

int main(int argc, char** argv) {
  CLI::App app{"vndiff: volumetric diffusion denoising with a zero-convolution control adapter"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out_dir = ".";
  bool force = false;
  app.add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "master seed (overrides the config)");
  app.add_option("--out-dir", out_dir, "run directory for outputs");
  app.add_flag("--force", force, "overwrite existing outputs");
  app.add_option("--workers", workers, "worker threads (overrides the config)")->check(CLI::PositiveNumber);

  std::string data_dir, resume, base, adapter, unet, con_ddpm, input, output, kind = "unet", split = "test",
                                                                             method;
  auto* gen = app.add_subcommand("gen-data", "generate phantom splits into --out-dir");
  auto* pre = app.add_subcommand("pretrain", "pre-train the unconditional noise model");
  pre->add_option("--data", data_dir, "dataset directory")->required();
  pre->add_option("--resume", resume, "continue from this checkpoint");
  auto* fin = app.add_subcommand("finetune", "fine-tune the control adapter on paired data");
  fin->add_option("--data", data_dir, "dataset directory")->required();
  fin->add_option("--base", base, "pre-trained base checkpoint")->required();
  auto* bas = app.add_subcommand("train-baseline", "train a supervised or conditional baseline");
  bas->add_option("--data", data_dir, "dataset directory")->required();
  bas->add_option("--kind", kind, "unet or con_ddpm")->check(CLI::IsMember({"unet", "con_ddpm"}));
  auto add_models = [&](CLI::App* c) {
    c->add_option("--base", base, "base checkpoint (controlnet, ddpm_dc)");
    c->add_option("--adapter", adapter, "adapter checkpoint (controlnet)");
    c->add_option("--unet", unet, "supervised UNet checkpoint");
    c->add_option("--con-ddpm", con_ddpm, "conditional DDPM checkpoint");
  };
  auto* den = app.add_subcommand("denoise", "denoise one normalized volume");
  add_models(den);
  den->add_option("--in", input, "input VNVOL1 volume")->required()->check(CLI::ExistingFile);
  den->add_option("--out", output, "output VNVOL1 volume")->required();
  den->add_option("--method", method, "controlnet, con_ddpm, unet or ddpm_dc");
  auto* ev = app.add_subcommand("evaluate", "score methods on a split and render montages");
  add_models(ev);
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--split", split, "test or val")->check(CLI::IsMember({"test", "val"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    CommandContext ctx;
    ctx.config = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    if (seed) ctx.config.seed = *seed;
    if (workers) ctx.config.workers = *workers;
    if (!method.empty()) ctx.config.inference.method = vndiff::parse_method(method);
    ctx.config.validate();
    ctx.out_dir = out_dir;
    ctx.force = force;
    ctx.argv.assign(argv, argv + argc);

    ModelPaths models;
    auto opt = [](const std::string& s) { return s.empty() ? std::nullopt : std::optional<fs::path>(s); };
    models.base = opt(base);
    models.adapter = opt(adapter);
    models.unet = opt(unet);
    models.con_ddpm = opt(con_ddpm);

    if (*gen) {
      cmd_gen_data(ctx);
    } else if (*pre) {
      cmd_pretrain(ctx, data_dir, opt(resume));
    } else if (*fin) {
      cmd_finetune(ctx, base, data_dir);
    } else if (*bas) {
      cmd_train_baseline(ctx, kind, data_dir);
    } else if (*den) {
      cmd_denoise(ctx, models, input, output);
    } else if (*ev) {
      const auto report = cmd_evaluate(ctx, models, data_dir, split);
      for (const auto& s : report.summaries)
        std::printf("%-12s n=%d  PSNR %.3f +- %.3f dB  SSIM %.4f +- %.4f\n", s.method.c_str(), s.count,
                    s.psnr_mean, s.psnr_std, s.ssim_mean, s.ssim_std);
    }
  } catch (const std::exception& e) {
    std::cerr << "vndiff: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kOk;
}
