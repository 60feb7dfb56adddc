#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vndiff/inference.hpp"
#include "vndiff/metrics.hpp"
#include "vndiff/phantom.hpp"
#include "vndiff/unet.hpp"

namespace vndiff::cli {

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct TrainConfig {
  int steps = 0;
  int batch_size = 4;
  double lr = 1e-4;
  int log_every = 50;
};

struct DataConfig {
  std::array<int, 3> dims{32, 32, 32};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  double dose_fraction = 0.05;
  double counts_per_unit = 100.0;
  double vmax = 8.0;  // normalisation constant
  int pretrain_count = 60;
  int finetune_count = 10;
  int val_count = 4;
  int test_count = 10;
  PhantomRanges phantom;
};

struct EvaluationConfig {
  SsimOptions ssim;
  std::vector<std::string> methods{"controlnet", "unet"};
};

// Everything a run needs. Defaults reproduce the desk-scale acceptance run.
struct RunConfig {
  std::uint64_t seed = 0;
  int workers = 1;
  ScheduleConfig schedule;
  UNetConfig network;
  TrainConfig pretrain;
  TrainConfig finetune;
  TrainConfig baseline;
  DataConfig data;
  InferenceConfig inference;
  EvaluationConfig evaluation;

  RunConfig();

  // Throws ParameterError on any out-of-range field.
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
// Overlays `j` on the defaults; unknown keys throw ParameterError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace vndiff::cli
