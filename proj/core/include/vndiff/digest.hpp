#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>

namespace vndiff {

// Incremental SHA-256, hex encoded.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  Sha256& update(std::span<const std::byte> bytes);
  Sha256& update(const std::string& s);
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(std::span<const std::byte> bytes);
// Git-style content digest of a file: sha256 over "blob <size>\0" + bytes.
std::string file_digest(const std::filesystem::path& path);

}  // namespace vndiff
