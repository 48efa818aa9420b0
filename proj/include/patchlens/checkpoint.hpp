#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "patchlens/adam.hpp"
#include "patchlens/vit.hpp"

namespace patchlens {

// Checkpoint layout (see docs/formats.md):
//   "PATCHLENS-CKPT <version>\n"
//   "<header byte length>\n"
//   header: compact JSON {format_version, config, config_hash, tensors[{name,
//           shape, offset, count}], data_bytes, training?}
//   payload: little-endian float32 arrays at the manifest byte offsets
inline constexpr int kCheckpointFormatVersion = 1;

struct EpochStats {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;

  friend bool operator==(const EpochStats&, const EpochStats&) = default;
};

/// Optimizer position saved alongside the weights so training can resume.
struct TrainingState {
  int epoch = 0;  // completed epochs
  AdamState<float> adam;
  std::vector<EpochStats> history;
};

/// 64-bit FNV-1a over the canonical JSON of the config, as 16 hex digits.
std::string config_hash(const ViTConfig& config);

void save_checkpoint(const ViTParams<float>& params, const std::filesystem::path& path,
                     const TrainingState* training = nullptr);

struct LoadedCheckpoint {
  ViTParams<float> params;
  std::optional<TrainingState> training;
};

/// Throws LoadError on a malformed, truncated, or version-mismatched file, and
/// when `expected` is given and an architecture field differs (the message
/// names the field).
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<ViTConfig>& expected = std::nullopt);

}  // namespace patchlens
