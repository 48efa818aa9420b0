#pragma once

#include <filesystem>
#include <json.hpp>
#include <vector>

#include "patchlens/dataset.hpp"

namespace patchlens {

// On-disk layout of a dataset directory (see docs/formats.md):
//   manifest.json  format tag, version, seed, config, one record per image
//                  {index, split, label, objects[{kind,row,col}]}
//   images.bin     image_px*image_px little-endian float32 per image, in
//                  manifest order (all train images, then all test images)
//   pairs.json     clean/corrupted pair suite, written by save_pair_suite

inline constexpr int kDatasetFormatVersion = 1;

nlohmann::json to_json(const Scene& scene);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json to_json(const DatasetConfig& config);
DatasetConfig dataset_config_from_json(const nlohmann::json& j);

void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& dir);
/// Reads and re-validates a dataset: scenes, labels, and that every stored
/// image equals the render of its scene. Throws LoadError.
LabeledDataset load_dataset(const std::filesystem::path& dir);

nlohmann::json to_json(const PatchPair& pair);
PatchPair pair_from_json(const nlohmann::json& j);
void save_pair_suite(const std::vector<PatchPair>& pairs, const std::filesystem::path& path);
std::vector<PatchPair> load_pair_suite(const std::filesystem::path& path);

/// Writes `text` to `path`, throwing Error on failure.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace patchlens
