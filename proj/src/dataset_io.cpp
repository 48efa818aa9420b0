#include "patchlens/dataset_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "patchlens/error.hpp"

namespace patchlens {

static_assert(std::endian::native == std::endian::little, "blob I/O assumes a little-endian host");

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error("write to " + path.string() + " failed");
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

nlohmann::json to_json(const Scene& scene) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& obj : scene.objects) {
    objects.push_back({{"kind", to_string(obj.kind)}, {"row", obj.row}, {"col", obj.col}});
  }
  return {{"grid_side", scene.grid_side}, {"objects", std::move(objects)}};
}

Scene scene_from_json(const nlohmann::json& j) {
  Scene scene;
  scene.grid_side = j.at("grid_side").get<int>();
  for (const auto& o : j.at("objects")) {
    scene.objects.push_back({object_kind_from_string(o.at("kind").get<std::string>()),
                             o.at("row").get<int>(), o.at("col").get<int>()});
  }
  return scene;
}

nlohmann::json to_json(const DatasetConfig& c) {
  return {{"image_px", c.image_px},
          {"patch_px", c.patch_px},
          {"images_per_count", c.images_per_count},
          {"train_fraction", c.train_fraction},
          {"square_probability", c.kind_mix.square_probability},
          {"max_attempts", c.max_attempts}};
}

DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("dataset config must be an object");
  DatasetConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "image_px") c.image_px = value.get<int>();
      else if (key == "patch_px") c.patch_px = value.get<int>();
      else if (key == "images_per_count") c.images_per_count = value.get<int>();
      else if (key == "train_fraction") c.train_fraction = value.get<double>();
      else if (key == "square_probability") c.kind_mix.square_probability = value.get<double>();
      else if (key == "max_attempts") c.max_attempts = value.get<int>();
      else throw ConfigError("unknown dataset config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dataset config key '" + key + "': " + e.what());
    }
  }
  return c;
}

void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json images = nlohmann::json::array();
  std::vector<float> blob;
  std::size_t index = 0;
  for (Split split : {Split::kTrain, Split::kTest}) {
    for (const auto& ex : dataset.split(split)) {
      images.push_back({{"index", index++},
                        {"split", split == Split::kTrain ? "train" : "test"},
                        {"label", ex.label},
                        {"objects", to_json(ex.scene)["objects"]}});
      blob.insert(blob.end(), ex.image.pixels.begin(), ex.image.pixels.end());
    }
  }
  nlohmann::json manifest = {{"format", "patchlens-dataset"},
                             {"version", kDatasetFormatVersion},
                             {"seed", dataset.seed},
                             {"config", to_json(dataset.config)},
                             {"grid_side", dataset.config.grid_side()},
                             {"blob", "images.bin"},
                             {"image_count", index},
                             {"images", std::move(images)}};
  write_text_file(dir / "manifest.json", manifest.dump(1) + "\n");
  std::ofstream out(dir / "images.bin", std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + (dir / "images.bin").string() + " for writing");
  out.write(reinterpret_cast<const char*>(blob.data()),
            static_cast<std::streamsize>(blob.size() * sizeof(float)));
  if (!out) throw Error("write to images.bin failed");
}

LabeledDataset load_dataset(const std::filesystem::path& dir) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_text_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest.json: " + std::string(e.what()));
  }
  LabeledDataset ds;
  try {
    if (manifest.at("format") != "patchlens-dataset") throw LoadError("manifest.json: wrong format tag");
    if (manifest.at("version").get<int>() != kDatasetFormatVersion) {
      throw LoadError("manifest.json: unsupported version " + manifest.at("version").dump());
    }
    ds.seed = manifest.at("seed").get<std::uint64_t>();
    ds.config = dataset_config_from_json(manifest.at("config"));
    const auto px = static_cast<std::size_t>(ds.config.image_px);
    const std::string blob_bytes = read_text_file(dir / manifest.at("blob").get<std::string>());
    const std::size_t n = manifest.at("images").size();
    if (blob_bytes.size() != n * px * px * sizeof(float)) {
      throw LoadError("images.bin: expected " + std::to_string(n * px * px * sizeof(float)) +
                      " bytes, found " + std::to_string(blob_bytes.size()));
    }
    std::size_t i = 0;
    for (const auto& rec : manifest.at("images")) {
      Example ex;
      ex.label = rec.at("label").get<int>();
      ex.scene.grid_side = ds.config.grid_side();
      ex.scene = scene_from_json({{"grid_side", ds.config.grid_side()}, {"objects", rec.at("objects")}});
      ex.scene.validate();
      if (ex.label != ex.scene.count()) {
        throw LoadError("image " + std::to_string(i) + ": label " + std::to_string(ex.label) +
                        " differs from object count " + std::to_string(ex.scene.count()));
      }
      ex.image = Image::blank(px);
      std::memcpy(ex.image.pixels.data(), blob_bytes.data() + i * px * px * sizeof(float),
                  px * px * sizeof(float));
      if (ex.image != render(ex.scene, ds.config.patch_px)) {
        throw LoadError("image " + std::to_string(i) + " does not match its scene");
      }
      const auto split = rec.at("split").get<std::string>();
      if (split == "train") ds.train.push_back(std::move(ex));
      else if (split == "test") ds.test.push_back(std::move(ex));
      else throw LoadError("image " + std::to_string(i) + ": unknown split '" + split + "'");
      ++i;
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest.json: " + std::string(e.what()));
  } catch (const InputError& e) {
    throw LoadError(std::string("manifest.json: ") + e.what());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("manifest.json: ") + e.what());
  }
  return ds;
}

nlohmann::json to_json(const PatchPair& pair) {
  return {{"name", pair.name},
          {"clean", to_json(pair.clean)},
          {"removed", pair.removed},
          {"kept", pair.kept},
          {"corrupted", to_json(pair.corrupted)},
          {"object_tokens", pair.object_tokens},
          {"removed_region_tokens", pair.removed_region_tokens}};
}

PatchPair pair_from_json(const nlohmann::json& j) {
  // Token sets are recomputed from the scenes rather than trusted.
  PatchPair pair = make_pair(j.at("name").get<std::string>(), scene_from_json(j.at("clean")),
                             j.at("removed").get<std::vector<int>>());
  if (to_json(pair) != j) throw LoadError("pair '" + pair.name + "' is inconsistent with its scenes");
  return pair;
}

void save_pair_suite(const std::vector<PatchPair>& pairs, const std::filesystem::path& path) {
  nlohmann::json j = {{"format", "patchlens-pairs"}, {"version", kDatasetFormatVersion},
                      {"pairs", nlohmann::json::array()}};
  for (const auto& p : pairs) j["pairs"].push_back(to_json(p));
  write_text_file(path, j.dump(1) + "\n");
}

std::vector<PatchPair> load_pair_suite(const std::filesystem::path& path) {
  try {
    const auto j = nlohmann::json::parse(read_text_file(path));
    if (j.at("format") != "patchlens-pairs") throw LoadError(path.string() + ": wrong format tag");
    std::vector<PatchPair> pairs;
    for (const auto& p : j.at("pairs")) pairs.push_back(pair_from_json(p));
    return pairs;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": " + e.what());
  } catch (const InputError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

}  // namespace patchlens
