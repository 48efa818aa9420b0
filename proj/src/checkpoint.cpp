#include "patchlens/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <json.hpp>

#include "patchlens/dataset_io.hpp"
#include "patchlens/error.hpp"

namespace patchlens {

namespace {

constexpr const char* kMagic = "PATCHLENS-CKPT";

nlohmann::json stats_to_json(const EpochStats& s) {
  return {{"epoch", s.epoch}, {"train_loss", s.train_loss}, {"train_acc", s.train_acc},
          {"test_acc", s.test_acc}};
}

EpochStats stats_from_json(const nlohmann::json& j) {
  return {j.at("epoch").get<int>(), j.at("train_loss").get<double>(),
          j.at("train_acc").get<double>(), j.at("test_acc").get<double>()};
}

void check_field(const char* name, long long stored, long long expected) {
  if (stored != expected) {
    throw LoadError("checkpoint config mismatch: " + std::string(name) + " is " +
                    std::to_string(stored) + " in the file but " + std::to_string(expected) +
                    " was expected");
  }
}

}  // namespace

std::string config_hash(const ViTConfig& config) {
  const std::string text = to_json(config).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const ViTParams<float>& params, const std::filesystem::path& path,
                     const TrainingState* training) {
  static_assert(std::endian::native == std::endian::little);
  const auto named = params.named();
  std::vector<std::pair<std::string, std::span<const float>>> arrays;
  std::vector<Shape> shapes;
  for (const auto& [name, t] : named) {
    arrays.emplace_back(name, t.data());
    shapes.push_back(t.shape());
  }
  nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                           {"config", to_json(params.config)},
                           {"config_hash", config_hash(params.config)}};
  if (training) {
    if (training->adam.m.size() != named.size() || training->adam.v.size() != named.size()) {
      throw DimensionError("save_checkpoint: optimizer state does not match the parameter list");
    }
    nlohmann::json history = nlohmann::json::array();
    for (const auto& s : training->history) history.push_back(stats_to_json(s));
    header["training"] = {{"epoch", training->epoch}, {"adam_t", training->adam.t},
                          {"history", std::move(history)}};
    for (std::size_t i = 0; i < named.size(); ++i) {
      arrays.emplace_back("adam.m." + named[i].first, training->adam.m[i]);
      shapes.push_back(named[i].second.shape());
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      arrays.emplace_back("adam.v." + named[i].first, training->adam.v[i]);
      shapes.push_back(named[i].second.shape());
    }
  }
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < arrays.size(); ++i) {
    const std::size_t count = arrays[i].second.size();
    manifest.push_back({{"name", arrays[i].first}, {"shape", shapes[i]}, {"offset", offset}, {"count", count}});
    offset += count * sizeof(float);
  }
  header["tensors"] = std::move(manifest);
  header["data_bytes"] = offset;
  const std::string header_text = header.dump();

  // Write to a sibling temp file and rename so a crash never leaves a
  // half-written checkpoint under the final name.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open " + tmp.string() + " for writing");
    out << kMagic << ' ' << kCheckpointFormatVersion << '\n' << header_text.size() << '\n' << header_text;
    for (const auto& [name, data] : arrays) {
      out.write(reinterpret_cast<const char*>(data.data()),
                static_cast<std::streamsize>(data.size() * sizeof(float)));
    }
    if (!out) throw Error("write to " + tmp.string() + " failed");
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 const std::optional<ViTConfig>& expected) {
  const std::string bytes = read_text_file(path);
  std::size_t pos = 0;
  auto read_line = [&]() {
    const auto nl = bytes.find('\n', pos);
    if (nl == std::string::npos) throw LoadError(path.string() + ": truncated header");
    std::string line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  const std::string magic = read_line();
  const std::string prefix = std::string(kMagic) + ' ';
  if (magic.rfind(prefix, 0) != 0) throw LoadError(path.string() + ": not a patchlens checkpoint");
  if (magic.substr(prefix.size()) != std::to_string(kCheckpointFormatVersion)) {
    throw LoadError(path.string() + ": format_version " + magic.substr(prefix.size()) +
                    " is not supported (expected " + std::to_string(kCheckpointFormatVersion) + ")");
  }
  std::size_t header_len = 0;
  try {
    header_len = std::stoull(read_line());
  } catch (const std::exception&) {
    throw LoadError(path.string() + ": bad header length");
  }
  if (bytes.size() - pos < header_len) throw LoadError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(pos, header_len));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": corrupt header: " + e.what());
  }
  pos += header_len;

  LoadedCheckpoint result;
  try {
    if (header.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw LoadError(path.string() + ": format_version mismatch");
    }
    ViTConfig config;
    try {
      config = vit_config_from_json(header.at("config"));
      config.validate();
    } catch (const ConfigError& e) {
      throw LoadError(path.string() + ": " + e.what());
    }
    if (header.at("config_hash").get<std::string>() != config_hash(config)) {
      throw LoadError(path.string() + ": config_hash does not match the stored config");
    }
    if (expected) {
      check_field("image_px", config.image_px, expected->image_px);
      check_field("patch_px", config.patch_px, expected->patch_px);
      check_field("n_layers", config.n_layers, expected->n_layers);
      check_field("n_heads", config.n_heads, expected->n_heads);
      check_field("d_model", config.d_model, expected->d_model);
      check_field("d_mlp", config.d_mlp, expected->d_mlp);
      check_field("n_classes", config.n_classes, expected->n_classes);
    }
    const std::size_t data_bytes = header.at("data_bytes").get<std::size_t>();
    if (bytes.size() - pos != data_bytes) {
      throw LoadError(path.string() + ": payload is " + std::to_string(bytes.size() - pos) +
                      " bytes, header declares " + std::to_string(data_bytes) + " (truncated or padded file)");
    }
    const char* payload = bytes.data() + pos;

    auto read_array = [&](const nlohmann::json& entry, const std::string& name, const Shape& shape) {
      if (entry.at("name").get<std::string>() != name) {
        throw LoadError(path.string() + ": manifest has '" + entry.at("name").get<std::string>() +
                        "' where '" + name + "' was expected");
      }
      if (entry.at("shape").get<Shape>() != shape) {
        throw LoadError(path.string() + ": tensor '" + name + "' has shape " +
                        shape_str(entry.at("shape").get<Shape>()) + ", expected " + shape_str(shape));
      }
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto count = entry.at("count").get<std::size_t>();
      if (count != numel(shape) || offset + count * sizeof(float) > data_bytes) {
        throw LoadError(path.string() + ": tensor '" + name + "' lies outside the payload");
      }
      std::vector<float> data(count);
      std::memcpy(data.data(), payload + offset, count * sizeof(float));
      return data;
    };

    // Shapes come from a freshly initialized model of the stored config.
    ViTParams<float> params = init_params<float>(config);
    const auto& tensors = header.at("tensors");
    const auto named = params.named();
    const bool has_training = header.contains("training");
    const std::size_t expected_entries = named.size() * (has_training ? 3 : 1);
    if (tensors.size() != expected_entries) {
      throw LoadError(path.string() + ": manifest lists " + std::to_string(tensors.size()) +
                      " tensors, expected " + std::to_string(expected_entries));
    }
    for (std::size_t i = 0; i < named.size(); ++i) {
      auto data = read_array(tensors[i], named[i].first, named[i].second.shape());
      auto dst = named[i].second;  // aliases the node inside params
      std::copy(data.begin(), data.end(), dst.mutable_data().begin());
    }
    if (has_training) {
      TrainingState state;
      const auto& tr = header.at("training");
      state.epoch = tr.at("epoch").get<int>();
      state.adam.t = tr.at("adam_t").get<std::int64_t>();
      for (const auto& s : tr.at("history")) state.history.push_back(stats_from_json(s));
      for (std::size_t i = 0; i < named.size(); ++i) {
        state.adam.m.push_back(read_array(tensors[named.size() + i], "adam.m." + named[i].first,
                                          named[i].second.shape()));
      }
      for (std::size_t i = 0; i < named.size(); ++i) {
        state.adam.v.push_back(read_array(tensors[2 * named.size() + i], "adam.v." + named[i].first,
                                          named[i].second.shape()));
      }
      result.training = std::move(state);
    }
    result.params = std::move(params);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(path.string() + ": corrupt header: " + e.what());
  }
  return result;
}

}  // namespace patchlens
