#pragma once

#include <exception>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "vndiff/metrics.hpp"
#include "vndiff_cli/run_config.hpp"

namespace vndiff::cli {

namespace fs = std::filesystem;

// CLI exit codes.
enum ExitCode : int {
  kOk = 0,
  kConfigError = 2,
  kDataError = 3,
  kContractViolation = 4,
  kNumericFailure = 5,
};

int exit_code_for(const std::exception& e);

// Shared by every command: where outputs go and whether existing outputs may
// be replaced.
struct CommandContext {
  RunConfig config;
  fs::path out_dir;
  bool force = false;
  std::vector<std::string> argv;  // echoed into provenance
};

// File names inside a run directory.
inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBaseCheckpoint = "base.vnckpt";
inline constexpr const char* kAdapterCheckpoint = "adapter.vnckpt";
inline constexpr const char* kUnetCheckpoint = "unet.vnckpt";
inline constexpr const char* kConDdpmCheckpoint = "con_ddpm.vnckpt";

struct DatasetSplits {
  std::vector<Volume> pretrain;
  std::vector<std::string> pretrain_ids;
  std::vector<TestCase> finetune, val, test;  // x0 / y pairs with ids
};

// Writes pretrain, finetune, val and test splits under ctx.out_dir. Refuses a
// non-empty directory unless ctx.force.
void cmd_gen_data(const CommandContext& ctx);

// Loads a dataset written by cmd_gen_data, verifying file digests against the
// manifest.
DatasetSplits load_dataset(const fs::path& data_dir);

struct TrainLog {
  fs::path checkpoint;
  std::vector<std::pair<int, double>> losses;  // (step, loss) of this invocation
};

// Unconditional pre-training on the clean split. With `resume`, continues
// from the step and optimiser state stored in that checkpoint.
TrainLog cmd_pretrain(const CommandContext& ctx, const fs::path& data_dir,
                      const std::optional<fs::path>& resume = std::nullopt);

// Adapter fine-tuning on the paired split; fails with ContractViolation when
// the freeze audit does not pass.
TrainLog cmd_finetune(const CommandContext& ctx, const fs::path& base_ckpt, const fs::path& data_dir);

// kind is "unet" (direct regression) or "con_ddpm" (two-channel epsilon model).
TrainLog cmd_train_baseline(const CommandContext& ctx, const std::string& kind, const fs::path& data_dir);

struct ModelPaths {
  std::optional<fs::path> base, adapter, unet, con_ddpm;
};

// Denoises one normalized VNVOL1 volume with ctx.config.inference.method.
void cmd_denoise(const CommandContext& ctx, const ModelPaths& models, const fs::path& in_volume,
                 const fs::path& out_volume);

// Scores every configured method on a split ("test" or "val"), writes
// report/metrics.csv, report/summary.json and one montage per subject.
MetricsReport cmd_evaluate(const CommandContext& ctx, const ModelPaths& models, const fs::path& data_dir,
                           const std::string& split = "test");

}  // namespace vndiff::cli
