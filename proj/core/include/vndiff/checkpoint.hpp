#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vndiff/optim.hpp"
#include "vndiff/unet.hpp"

namespace vndiff {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

// VNCKPT1 container:
//   8 bytes   magic "VNCKPT1\0"
//   u64 LE    manifest length in bytes
//   manifest  JSON text; "tensors" lists {name, shape, offset} with offsets
//             in bytes from the start of the blob section
//   blobs     little-endian binary32, row-major, in manifest order
struct Container {
  nlohmann::json manifest;
  std::vector<NamedTensor> tensors;
};

inline constexpr char kCheckpointMagic[8] = {'V', 'N', 'C', 'K', 'P', 'T', '1', '\0'};

std::vector<std::byte> encode_container(nlohmann::json manifest, const std::vector<NamedTensor>& tensors);
Container decode_container(std::span<const std::byte> bytes);
void write_container(const std::filesystem::path& path, nlohmann::json manifest,
                     const std::vector<NamedTensor>& tensors);
Container read_container(const std::filesystem::path& path);

// SHA-256 over every parameter's name, shape and little-endian bytes in
// visitation order.
std::string parameter_digest(const UNet& net);

// Optimisation progress stored next to the weights so training can resume.
struct TrainingState {
  std::int64_t step = 0;
  Adam::State optimizer;
};

void save_checkpoint(const UNet& net, const std::filesystem::path& path,
                     const TrainingState* state = nullptr, const nlohmann::json& extra = {});
// Throws BadMagicError, TruncatedError or TensorNameMismatchError.
UNet load_checkpoint(const std::filesystem::path& path, TrainingState* state = nullptr,
                     nlohmann::json* extra = nullptr);

// Helpers shared with the adapter container.
std::vector<NamedTensor> optimizer_tensors(const Adam::State& s);
Adam::State optimizer_from(const Container& c);

}  // namespace vndiff
