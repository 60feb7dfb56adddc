#include "vndiff_cli/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "vndiff/binary_io.hpp"
#include "vndiff/digest.hpp"
#include "vndiff/error.hpp"
#include "vndiff/training.hpp"
#include "vndiff_cli/montage.hpp"

namespace vndiff::cli {

using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ParameterError*>(&e)) return kConfigError;
  if (dynamic_cast<const ContractViolation*>(&e)) return kContractViolation;
  if (dynamic_cast<const NumericError*>(&e)) return kNumericFailure;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const ShapeError*>(&e) ||
      dynamic_cast<const InsufficientDataError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e))
    return kDataError;
  if (dynamic_cast<const json::exception*>(&e)) return kConfigError;
  return kDataError;
}

namespace {

// Seed stream tags.
enum : std::uint64_t { kTagInit = 1, kTagPretrain, kTagFinetune, kTagBaseline, kTagData };

const char* const kSplits[] = {"pretrain", "finetune", "val", "test"};

void refuse_existing(const fs::path& p, bool force) {
  if (!force && fs::exists(p)) throw ParameterError(p.string() + " exists; pass --force to overwrite");
}

json digests_of(const std::vector<fs::path>& paths) {
  json out = json::object();
  for (const auto& p : paths) {
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file()) files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) out[f.string()] = file_digest(f);
    } else if (fs::exists(p)) {
      out[p.string()] = file_digest(p);
    }
  }
  return out;
}

// Echoes the resolved config and input/output digests as
// <command>.config.json and <command>.provenance.json in the run directory.
void write_provenance(const CommandContext& ctx, const std::string& command, const std::vector<fs::path>& inputs,
                      const std::vector<fs::path>& outputs, json extra = json::object()) {
  fs::create_directories(ctx.out_dir);
  io::write_text_atomic(ctx.out_dir / (command + ".config.json"), to_json(ctx.config).dump(2) + "\n");
  json p{{"command", command},
         {"argv", ctx.argv},
         {"inputs", digests_of(inputs)},
         {"outputs", digests_of(outputs)},
         {"extra", std::move(extra)}};
  io::write_text_atomic(ctx.out_dir / (command + ".provenance.json"), p.dump(2) + "\n");
}

void write_loss_log(const fs::path& path, const std::vector<std::pair<int, double>>& losses) {
  std::ostringstream out;
  out.precision(17);
  out << "step,loss\n";
  for (const auto& [step, loss] : losses) out << step << ',' << loss << '\n';
  io::write_text_atomic(path, out.str());
}

void check_finite(double loss, int step) {
  if (!std::isfinite(loss))
    throw NumericError("non-finite training loss at step " + std::to_string(step));
}

void log_progress(const char* what, int step, int total, const std::vector<std::pair<int, double>>& losses,
                  int every) {
  if ((step + 1) % every != 0 && step + 1 != total) return;
  const std::size_t n = std::min<std::size_t>(losses.size(), static_cast<std::size_t>(every));
  double mean = 0.0;
  for (std::size_t i = losses.size() - n; i < losses.size(); ++i) mean += losses[i].second;
  std::fprintf(stderr, "%s step %d/%d loss %.6f\n", what, step + 1, total, mean / static_cast<double>(n));
}

NoiseSchedule schedule_of(const RunConfig& c) {
  return NoiseSchedule::linear(c.schedule.steps, c.schedule.beta_start, c.schedule.beta_end);
}

AdamOptions adam_of(const TrainConfig& t) {
  AdamOptions o;
  o.lr = t.lr;
  return o;
}

std::vector<PairedVolume> as_pairs(const std::vector<TestCase>& cases) {
  std::vector<PairedVolume> out;
  for (const auto& c : cases) out.push_back({c.x0, c.y});
  return out;
}

}  // namespace

void cmd_gen_data(const CommandContext& ctx) {
  const RunConfig& cfg = ctx.config;
  if (fs::exists(ctx.out_dir) && !fs::is_empty(ctx.out_dir) && !ctx.force)
    throw ParameterError(ctx.out_dir.string() + " is not empty; pass --force to overwrite");
  const int counts[] = {cfg.data.pretrain_count, cfg.data.finetune_count, cfg.data.val_count, cfg.data.test_count};

  struct Job {
    int split, index;
  };
  std::vector<Job> jobs;
  for (int s = 0; s < 4; ++s) {
    if (counts[s] < 1) throw ParameterError(std::string("split ") + kSplits[s] + " must have at least one volume");
    fs::create_directories(ctx.out_dir / kSplits[s]);
    for (int i = 0; i < counts[s]; ++i) jobs.push_back({s, i});
  }
  std::vector<json> entries(jobs.size());
  parallel_for(jobs.size(), cfg.workers, [&](std::size_t k) {
    const auto [s, i] = jobs[k];
    const std::uint64_t seed = derive_seed(cfg.seed, kTagData, static_cast<std::uint64_t>(s) * 1000003u + i);
    PhantomSpec spec = random_phantom_spec(cfg.data.dims, seed, cfg.data.phantom);
    spec.spacing = cfg.data.spacing;
    const Volume clean = generate_phantom(spec, seed);
    char id[32];
    std::snprintf(id, sizeof id, "%s_%03d", kSplits[s], i);
    json e{{"id", id}, {"seed", seed}, {"spec", spec}};
    const fs::path dir = ctx.out_dir / kSplits[s];
    save_volume(normalize(clean, cfg.data.vmax), dir / (std::string(id) + "_x0.vnvol"));
    e["x0"] = std::string(kSplits[s]) + "/" + id + "_x0.vnvol";
    if (s > 0) {
      const std::uint64_t dose_seed = derive_seed(seed, 1);
      const Volume low = simulate_low_dose(clean, cfg.data.dose_fraction, cfg.data.counts_per_unit, dose_seed);
      save_volume(normalize(low, cfg.data.vmax), dir / (std::string(id) + "_y.vnvol"));
      e["y"] = std::string(kSplits[s]) + "/" + id + "_y.vnvol";
      e["dose_seed"] = dose_seed;
    }
    entries[k] = std::move(e);
  });

  json manifest{{"format", "vndiff-dataset-1"},
                {"seed", cfg.seed},
                {"dims", cfg.data.dims},
                {"dose_fraction", cfg.data.dose_fraction},
                {"counts_per_unit", cfg.data.counts_per_unit},
                {"vmax", cfg.data.vmax}};
  for (const char* s : kSplits) manifest["splits"][s] = json::array();
  for (std::size_t k = 0; k < jobs.size(); ++k) {
    json& e = entries[k];
    e["x0_digest"] = file_digest(ctx.out_dir / e["x0"].get<std::string>());
    if (e.contains("y")) e["y_digest"] = file_digest(ctx.out_dir / e["y"].get<std::string>());
    manifest["splits"][kSplits[jobs[k].split]].push_back(e);
  }
  io::write_text_atomic(ctx.out_dir / kManifestFile, manifest.dump(2) + "\n");
  write_provenance(ctx, "gen-data", {}, {ctx.out_dir / kManifestFile});
}

DatasetSplits load_dataset(const fs::path& data_dir) {
  const fs::path mpath = data_dir / kManifestFile;
  if (!fs::exists(mpath)) throw DataError("no dataset manifest at " + mpath.string());
  json manifest;
  try {
    manifest = json::parse(std::ifstream(mpath));
  } catch (const json::exception& e) {
    throw DataError("dataset manifest is not valid JSON: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != "vndiff-dataset-1") throw DataError("unrecognised dataset manifest");
  auto load = [&](const json& e, const char* key) {
    const fs::path p = data_dir / e.at(key).get<std::string>();
    if (!fs::exists(p)) throw DataError("dataset file missing: " + p.string());
    if (file_digest(p) != e.at(std::string(key) + "_digest").get<std::string>())
      throw DataError("dataset file does not match its manifest digest: " + p.string());
    Volume v = load_volume(p);
    if (v.units != Units::normalized) throw DataError("dataset volume is not normalized: " + p.string());
    return v;
  };
  DatasetSplits d;
  try {
    for (const auto& e : manifest.at("splits").at("pretrain")) {
      d.pretrain.push_back(load(e, "x0"));
      d.pretrain_ids.push_back(e.at("id").get<std::string>());
    }
    std::vector<TestCase>* paired[] = {&d.finetune, &d.val, &d.test};
    for (int s = 1; s < 4; ++s)
      for (const auto& e : manifest.at("splits").at(kSplits[s]))
        paired[s - 1]->push_back({e.at("id").get<std::string>(), load(e, "x0"), load(e, "y")});
  } catch (const json::exception& e) {
    throw DataError("dataset manifest is malformed: " + std::string(e.what()));
  }
  return d;
}

TrainLog cmd_pretrain(const CommandContext& ctx, const fs::path& data_dir, const std::optional<fs::path>& resume) {
  const RunConfig& cfg = ctx.config;
  const fs::path out = ctx.out_dir / kBaseCheckpoint;
  if (!resume || fs::weakly_canonical(*resume) != fs::weakly_canonical(out)) refuse_existing(out, ctx.force);
  const DatasetSplits data = load_dataset(data_dir);
  if (data.pretrain.empty()) throw DataError("pretrain split is empty");
  const NoiseSchedule sched = schedule_of(cfg);

  UNetConfig netcfg = cfg.network;
  netcfg.in_channels = 1;
  UNet net(netcfg, derive_seed(cfg.seed, kTagInit));
  Adam opt(adam_of(cfg.pretrain));
  int start = 0;
  if (resume) {
    TrainingState state;
    net = load_checkpoint(*resume, &state);
    if (net.config() != netcfg) throw ParameterError("resume checkpoint has a different network config");
    opt.restore(state.optimizer);
    start = static_cast<int>(state.step);
  }

  TrainLog log;
  log.checkpoint = out;
  const int edge = netcfg.patch_edge;
  for (int step = start; step < cfg.pretrain.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, kTagPretrain, static_cast<std::uint64_t>(step)));
    const auto batch = sample_crops(data.pretrain, edge, cfg.pretrain.batch_size, rng);
    const double loss = pretrain_step(net, batch, sched, opt, rng);
    check_finite(loss, step);
    log.losses.emplace_back(step, loss);
    log_progress("pretrain", step, cfg.pretrain.steps, log.losses, cfg.pretrain.log_every);
  }
  TrainingState state{std::max(start, cfg.pretrain.steps), opt.state()};
  fs::create_directories(ctx.out_dir);
  save_checkpoint(net, out, &state, json{{"role", "pretrain"}, {"seed", cfg.seed}});
  write_loss_log(ctx.out_dir / "pretrain.loss.csv", log.losses);
  std::vector<fs::path> inputs{data_dir};
  if (resume) inputs.push_back(*resume);
  write_provenance(ctx, "pretrain", inputs, {out});
  return log;
}

TrainLog cmd_finetune(const CommandContext& ctx, const fs::path& base_ckpt, const fs::path& data_dir) {
  const RunConfig& cfg = ctx.config;
  const fs::path out = ctx.out_dir / kAdapterCheckpoint;
  refuse_existing(out, ctx.force);
  const DatasetSplits data = load_dataset(data_dir);
  const auto pairs = as_pairs(data.finetune);
  const NoiseSchedule sched = schedule_of(cfg);

  UNet base = load_checkpoint(base_ckpt);
  if (base.config().in_channels != 1) throw ParameterError("finetune needs an unconditional base network");
  ControlAdapter<float> adapter(base);
  const std::string snapshot = parameter_digest(base);
  Adam opt(adam_of(cfg.finetune));

  TrainLog log;
  log.checkpoint = out;
  const int edge = base.config().patch_edge;
  for (int step = 0; step < cfg.finetune.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, kTagFinetune, static_cast<std::uint64_t>(step)));
    const auto batch = sample_paired_crops(pairs, edge, cfg.finetune.batch_size, rng);
    const double loss = finetune_step(base, adapter, batch, sched, opt, rng);
    check_finite(loss, step);
    log.losses.emplace_back(step, loss);
    log_progress("finetune", step, cfg.finetune.steps, log.losses, cfg.finetune.log_every);
  }
  const bool intact = freeze_check(base, snapshot);
  if (!intact) throw ContractViolation("freeze audit failed: base parameters changed during fine-tuning");
  TrainingState state{cfg.finetune.steps, opt.state()};
  fs::create_directories(ctx.out_dir);
  save_adapter(adapter, out, &state);
  write_loss_log(ctx.out_dir / "finetune.loss.csv", log.losses);
  write_provenance(ctx, "finetune", {base_ckpt, data_dir}, {out},
                   json{{"freeze_audit", "pass"}, {"base_digest", snapshot}});
  return log;
}

TrainLog cmd_train_baseline(const CommandContext& ctx, const std::string& kind, const fs::path& data_dir) {
  const RunConfig& cfg = ctx.config;
  if (kind != "unet" && kind != "con_ddpm") throw ParameterError("baseline kind must be unet or con_ddpm");
  const bool regression = kind == "unet";
  const fs::path out = ctx.out_dir / (regression ? kUnetCheckpoint : kConDdpmCheckpoint);
  refuse_existing(out, ctx.force);
  const DatasetSplits data = load_dataset(data_dir);
  const auto pairs = as_pairs(data.finetune);
  const NoiseSchedule sched = schedule_of(cfg);

  UNetConfig netcfg = cfg.network;
  netcfg.in_channels = regression ? 1 : 2;
  UNet net(netcfg, derive_seed(cfg.seed, kTagInit, regression ? 1 : 2));
  Adam opt(adam_of(cfg.baseline));
  TrainLog log;
  log.checkpoint = out;
  for (int step = 0; step < cfg.baseline.steps; ++step) {
    Rng rng(derive_seed(cfg.seed, kTagBaseline, static_cast<std::uint64_t>(step)));
    const auto batch = sample_paired_crops(pairs, netcfg.patch_edge, cfg.baseline.batch_size, rng);
    const double loss = regression ? regression_step(net, batch, opt) : conditional_step(net, batch, sched, opt, rng);
    check_finite(loss, step);
    log.losses.emplace_back(step, loss);
    log_progress(kind.c_str(), step, cfg.baseline.steps, log.losses, cfg.baseline.log_every);
  }
  TrainingState state{cfg.baseline.steps, opt.state()};
  fs::create_directories(ctx.out_dir);
  save_checkpoint(net, out, &state, json{{"role", kind}, {"seed", cfg.seed}});
  write_loss_log(ctx.out_dir / (kind + ".loss.csv"), log.losses);
  write_provenance(ctx, "train-baseline-" + kind, {data_dir}, {out});
  return log;
}

namespace {

// Loaded networks for one method; Denoiser closures keep them alive.
struct MethodModels {
  std::shared_ptr<UNet> net;
  std::shared_ptr<ControlAdapter<float>> adapter;
};

const fs::path& need(const std::optional<fs::path>& p, const char* flag, Method m) {
  if (!p) throw ParameterError("method " + to_string(m) + " needs " + flag);
  return *p;
}

MethodModels load_models(const ModelPaths& paths, Method m) {
  MethodModels mm;
  switch (m) {
    case Method::controlnet:
      mm.net = std::make_shared<UNet>(load_checkpoint(need(paths.base, "--base", m)));
      mm.adapter = std::make_shared<ControlAdapter<float>>(load_adapter(need(paths.adapter, "--adapter", m), *mm.net));
      mm.net->set_frozen(true);
      break;
    case Method::ddpm_dc:
      mm.net = std::make_shared<UNet>(load_checkpoint(need(paths.base, "--base", m)));
      break;
    case Method::unet:
      mm.net = std::make_shared<UNet>(load_checkpoint(need(paths.unet, "--unet", m)));
      break;
    case Method::con_ddpm:
      mm.net = std::make_shared<UNet>(load_checkpoint(need(paths.con_ddpm, "--con-ddpm", m)));
      break;
  }
  return mm;
}

std::vector<fs::path> model_inputs(const ModelPaths& p) {
  std::vector<fs::path> out;
  for (const auto* o : {&p.base, &p.adapter, &p.unet, &p.con_ddpm})
    if (*o) out.push_back(**o);
  return out;
}

}  // namespace

void cmd_denoise(const CommandContext& ctx, const ModelPaths& models, const fs::path& in_volume,
                 const fs::path& out_volume) {
  const RunConfig& cfg = ctx.config;
  refuse_existing(out_volume, ctx.force);
  InferenceConfig inf = cfg.inference;
  inf.workers = cfg.workers;
  inf.seed = cfg.seed;
  MethodModels mm = load_models(models, inf.method);
  const Volume y = load_volume(in_volume);
  const Volume out = denoise_volume(*mm.net, mm.adapter.get(), y, schedule_of(cfg), inf);
  if (out_volume.has_parent_path()) fs::create_directories(out_volume.parent_path());
  save_volume(out, out_volume);
  auto inputs = model_inputs(models);
  inputs.push_back(in_volume);
  write_provenance(ctx, "denoise", inputs, {out_volume}, json{{"method", to_string(inf.method)}});
}

MetricsReport cmd_evaluate(const CommandContext& ctx, const ModelPaths& models, const fs::path& data_dir,
                           const std::string& split) {
  const RunConfig& cfg = ctx.config;
  if (split != "test" && split != "val") throw ParameterError("evaluate split must be test or val");
  const fs::path report_dir = ctx.out_dir / "report";
  refuse_existing(report_dir / "metrics.csv", ctx.force);
  const DatasetSplits data = load_dataset(data_dir);
  const std::vector<TestCase>& cases = split == "test" ? data.test : data.val;
  const NoiseSchedule sched = schedule_of(cfg);

  InferenceConfig inf = cfg.inference;
  inf.workers = cfg.workers;
  inf.seed = cfg.seed;

  // Outputs are kept for the montages; index = method * cases + case.
  std::vector<Denoiser> methods;
  std::vector<Volume> outputs(cfg.evaluation.methods.size() * cases.size());
  for (std::size_t mi = 0; mi < cfg.evaluation.methods.size(); ++mi) {
    const Method m = parse_method(cfg.evaluation.methods[mi]);
    MethodModels mm = load_models(models, m);
    InferenceConfig mcfg = inf;
    mcfg.method = m;
    methods.push_back({to_string(m), [&, mm, mcfg, mi](const TestCase& c) {
                         Volume out = denoise_volume(*mm.net, mm.adapter.get(), c.y, sched, mcfg);
                         const auto ci = static_cast<std::size_t>(&c - cases.data());
                         outputs[mi * cases.size() + ci] = out;
                         return out;
                       }});
  }
  MetricsReport report = evaluate_suite(methods, cases, cfg.evaluation.ssim, 1);
  report.write(report_dir);

  const fs::path montage_dir = ctx.out_dir / "montages";
  fs::create_directories(montage_dir);
  std::vector<fs::path> outs{report_dir / "metrics.csv", report_dir / "summary.json"};
  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    std::vector<const Volume*> rows{&cases[ci].y};
    std::vector<std::string> labels{"low_dose"};
    for (std::size_t mi = 0; mi < methods.size(); ++mi) {
      const Volume& v = outputs[mi * cases.size() + ci];
      if (v.data.empty()) continue;  // method failed on this subject
      rows.push_back(&v);
      labels.push_back(methods[mi].method);
    }
    rows.push_back(&cases[ci].x0);
    labels.push_back("ground_truth");
    const fs::path img = montage_dir / (cases[ci].subject + ".pgm");
    write_pgm_montage(slice_montage(rows), labels, img);
    outs.push_back(img);
  }
  auto inputs = model_inputs(models);
  inputs.push_back(data_dir);
  write_provenance(ctx, "evaluate", inputs, outs, json{{"split", split}});
  return report;
}

}  // namespace vndiff::cli
