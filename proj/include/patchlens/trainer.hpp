#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchlens/checkpoint.hpp"
#include "patchlens/dataset.hpp"
#include "patchlens/vit.hpp"

namespace patchlens {

struct TrainConfig {
  double lr = 3e-4;
  int batch_size = 128;  // clamped to the train-set size
  int max_epochs = 300;
  // Stop once test accuracy has been exactly 1.0 for this many consecutive
  // epochs; 0 disables early stopping.
  int early_stop_patience = 3;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = only at the end
  std::filesystem::path checkpoint_path;  // empty = no checkpoints

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainReport {
  std::vector<EpochStats> epochs;

  /// First epoch with test accuracy 1.0, if any.
  std::optional<int> first_perfect_epoch() const;
  /// "epoch,train_loss,train_acc,test_acc" plus one row per epoch.
  std::string to_csv() const;
};

struct TrainResult {
  ViTParams<float> params;
  TrainReport report;
  TrainingState state;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// Adam + cross-entropy over per-epoch shuffled mini-batches, starting from
/// init_params(model) or from `resume`. Throws TrainingError if the loss
/// becomes non-finite; the checkpoint on disk is then the last good one.
TrainResult train(const ViTConfig& model, const TrainConfig& config, const LabeledDataset& dataset,
                  const std::optional<LoadedCheckpoint>& resume = std::nullopt,
                  const EpochCallback& on_epoch = {});

/// Predicted counts (1-based) for each example.
std::vector<int> predict(const ViTParams<float>& params, std::span<const Example> examples);

/// Fraction of examples whose argmax prediction equals the label. Throws
/// InputError on an empty split.
double evaluate(const ViTParams<float>& params, std::span<const Example> examples);

}  // namespace patchlens
