#include "patchlens/run_config.hpp"

#include "patchlens/dataset_io.hpp"
#include "patchlens/error.hpp"

namespace patchlens {

namespace {

nlohmann::json probe_options_to_json(const ProbeOptions& o) {
  return {{"lr", o.lr}, {"epochs", o.epochs}, {"standardize", o.standardize}};
}

ProbeOptions probe_options_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("probe config must be an object");
  ProbeOptions o;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "lr") o.lr = value.get<double>();
      else if (key == "epochs") o.epochs = value.get<int>();
      else if (key == "standardize") o.standardize = value.get<bool>();
      else throw ConfigError("unknown probe config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("probe config key '" + key + "': " + e.what());
    }
  }
  return o;
}

nlohmann::json optional_seed(const std::optional<std::uint64_t>& s) {
  return s ? nlohmann::json(*s) : nlohmann::json(nullptr);
}

}  // namespace

void RunConfig::resolve() {
  if (!data_seed) data_seed = seed;
  if (!train_seed) train_seed = seed;
  if (!probe_seed) probe_seed = seed;
  train.seed = *train_seed;
  model.seed = *train_seed;
  model.validate();
  train.validate();
  data.validate();
  if (data.image_px != model.image_px || data.patch_px != model.patch_px) {
    throw ConfigError("data and model disagree on geometry: data " + std::to_string(data.image_px) + "/" +
                      std::to_string(data.patch_px) + " px, model " + std::to_string(model.image_px) + "/" +
                      std::to_string(model.patch_px) + " px");
  }
  if (probe.epochs <= 0) throw ConfigError("probe.epochs must be positive");
  if (!(probe.lr > 0.0)) throw ConfigError("probe.lr must be positive");
  if (suite.empty()) throw ConfigError("suite selector is empty");
}

nlohmann::json to_json(const RunConfig& c) {
  auto model = to_json(c.model);
  model.erase("seed");
  auto train = to_json(c.train);
  train.erase("seed");
  return {{"seed", c.seed},
          {"data_seed", optional_seed(c.data_seed)},
          {"train_seed", optional_seed(c.train_seed)},
          {"probe_seed", optional_seed(c.probe_seed)},
          {"model", model},
          {"train", train},
          {"data", to_json(c.data)},
          {"probe", probe_options_to_json(c.probe)},
          {"suite", c.suite},
          {"shuffle_labels", c.shuffle_labels},
          {"paths",
           {{"data", c.data_dir.generic_string()},
            {"checkpoint", c.checkpoint.generic_string()},
            {"patch", c.patch_dir.generic_string()},
            {"probe", c.probe_dir.generic_string()},
            {"out", c.out.generic_string()}}}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  auto seed_field = [](const nlohmann::json& v) -> std::optional<std::uint64_t> {
    if (v.is_null()) return std::nullopt;
    return v.get<std::uint64_t>();
  };
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "data_seed") c.data_seed = seed_field(value);
      else if (key == "train_seed") c.train_seed = seed_field(value);
      else if (key == "probe_seed") c.probe_seed = seed_field(value);
      else if (key == "model") {
        if (value.contains("seed")) throw ConfigError("model.seed is set through train_seed");
        c.model = vit_config_from_json(value);
      } else if (key == "train") {
        if (value.contains("seed")) throw ConfigError("train.seed is set through train_seed");
        c.train = train_config_from_json(value);
      } else if (key == "data") c.data = dataset_config_from_json(value);
      else if (key == "probe") c.probe = probe_options_from_json(value);
      else if (key == "suite") c.suite = value.get<std::string>();
      else if (key == "shuffle_labels") c.shuffle_labels = value.get<bool>();
      else if (key == "paths") {
        for (const auto& [pk, pv] : value.items()) {
          const auto p = std::filesystem::path(pv.get<std::string>());
          if (pk == "data") c.data_dir = p;
          else if (pk == "checkpoint") c.checkpoint = p;
          else if (pk == "patch") c.patch_dir = p;
          else if (pk == "probe") c.probe_dir = p;
          else if (pk == "out") c.out = p;
          else throw ConfigError("unknown paths key '" + pk + "'");
        }
      } else {
        throw ConfigError("unknown run config key '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("run config key '" + key + "': " + e.what());
    }
  }
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const Error& e) {
    throw ConfigError(std::string("cannot read config: ") + e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void write_run_config(const RunConfig& config, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_text_file(dir / "run_config.json", to_json(config).dump(2) + "\n");
}

}  // namespace patchlens
