#pragma once

#include <cstdint>
#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>

#include "patchlens/dataset.hpp"
#include "patchlens/probing.hpp"
#include "patchlens/trainer.hpp"
#include "patchlens/vit.hpp"

namespace patchlens {

/// Everything one pipeline command needs, merged from a JSON file and CLI
/// flags. The per-stage seeds default to `seed` when not set explicitly.
struct RunConfig {
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> data_seed;
  std::optional<std::uint64_t> train_seed;
  std::optional<std::uint64_t> probe_seed;

  ViTConfig model;
  TrainConfig train;
  DatasetConfig data;
  ProbeOptions probe;
  std::string suite = "std";
  bool shuffle_labels = false;

  std::filesystem::path data_dir = "runs/data";
  std::filesystem::path checkpoint = "runs/train/model.ckpt";
  std::filesystem::path patch_dir = "runs/patch";
  std::filesystem::path probe_dir = "runs/probe";
  std::filesystem::path out;  // output directory of the current command

  /// Fills the per-stage seeds, copies the train seed into the model, and
  /// validates every section. Throws ConfigError.
  void resolve();
};

nlohmann::json to_json(const RunConfig& config);
/// Unknown keys are rejected with ConfigError.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Writes <dir>/run_config.json.
void write_run_config(const RunConfig& config, const std::filesystem::path& dir);

}  // namespace patchlens
