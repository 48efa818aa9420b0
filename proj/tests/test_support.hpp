#pragma once

#include <atomic>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "patchlens/vit.hpp"

namespace patchlens::testing {

/// A small architecture that keeps per-test runtimes in milliseconds.
inline ViTConfig tiny_config(std::uint64_t seed = 7) {
  ViTConfig c;
  c.image_px = 16;
  c.patch_px = 4;
  c.n_layers = 3;
  c.n_heads = 2;
  c.d_model = 16;
  c.d_mlp = 32;
  c.seed = seed;
  return c;
}

/// Fresh, empty directory under the system temp dir; removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("patchlens-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace patchlens::testing
