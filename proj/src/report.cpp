#include "patchlens/report.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>

#include "patchlens/dataset_io.hpp"
#include "patchlens/error.hpp"

namespace patchlens {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), pattern, v);
  return buf;
}

struct ExperimentInfo {
  std::string name;
  int source_count = 0;
  int target_count = 0;
  std::vector<int> tokens;
  std::optional<std::vector<int>> flips;
};

std::vector<ExperimentInfo> parse_summary(const nlohmann::json& summary) {
  if (!summary.is_array()) throw InputError("patch summary must be a JSON array");
  std::vector<ExperimentInfo> out;
  try {
    for (const auto& e : summary) {
      ExperimentInfo info;
      info.name = e.at("experiment").get<std::string>();
      info.source_count = e.at("source_count").get<int>();
      info.target_count = e.at("target_count").get<int>();
      info.tokens = e.at("tokens").get<std::vector<int>>();
      if (e.at("flip_layers").is_array()) info.flips = e.at("flip_layers").get<std::vector<int>>();
      out.push_back(std::move(info));
    }
  } catch (const nlohmann::json::exception& ex) {
    throw InputError(std::string("patch summary: ") + ex.what());
  }
  return out;
}

}  // namespace

std::vector<PatchRow> patch_rows_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "experiment,layer,logit_src,logit_tgt,logit_diff,predicted_count") {
    throw InputError("patch results CSV: unexpected header");
  }
  std::vector<PatchRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 6) throw InputError("patch results CSV: malformed row '" + line + "'");
    try {
      rows.push_back({f[0], std::stoi(f[1]), std::stod(f[2]), std::stod(f[3]), std::stod(f[4]), std::stoi(f[5])});
    } catch (const std::logic_error&) {
      throw InputError("patch results CSV: malformed row '" + line + "'");
    }
  }
  return rows;
}

std::string format_layer_ranges(const std::vector<int>& layers) {
  if (layers.empty()) return "none";
  std::string out;
  std::size_t i = 0;
  while (i < layers.size()) {
    std::size_t j = i;
    while (j + 1 < layers.size() && layers[j + 1] == layers[j] + 1) ++j;
    if (!out.empty()) out += ", ";
    out += std::to_string(layers[i]);
    if (j > i) out += "-" + std::to_string(layers[j]);
    i = j + 1;
  }
  return out;
}

std::optional<TokenCategory> experiment_category(const std::vector<int>& tokens) {
  const bool has_cls = std::find(tokens.begin(), tokens.end(), 0) != tokens.end();
  if (has_cls && tokens.size() == 1) return TokenCategory::kCls;
  if (!has_cls && !tokens.empty()) return TokenCategory::kObjectPatch;
  return std::nullopt;
}

ReportFiles build_report(const std::string& patch_csv, const nlohmann::json& patch_summary,
                         const std::string& probe_csv) {
  const auto rows = patch_rows_from_csv(patch_csv);
  const auto experiments = parse_summary(patch_summary);
  const auto probes = probe_report_from_csv(probe_csv);
  if (experiments.empty()) throw InputError("report: no patching experiments");
  if (probes.cells.empty()) throw InputError("report: no probe cells");

  std::set<int> layer_set;
  std::map<std::string, std::map<int, double>> diffs;
  for (const auto& r : rows) {
    layer_set.insert(r.layer);
    diffs[r.experiment][r.layer] = r.logit_diff;
  }
  for (const auto& c : probes.cells) layer_set.insert(c.layer);
  for (const auto& e : experiments) {
    if (!diffs.count(e.name)) throw InputError("report: experiment '" + e.name + "' has no result rows");
  }

  ReportFiles files;
  {
    std::ostringstream os;
    os << "layer";
    for (const auto& e : experiments) os << ',' << e.name;
    os << '\n';
    for (int layer : layer_set) {
      os << layer;
      for (const auto& e : experiments) {
        os << ',';
        const auto& m = diffs[e.name];
        if (auto it = m.find(layer); it != m.end()) os << fmt("%.9g", it->second);
      }
      os << '\n';
    }
    files.patch_curves_csv = os.str();
  }

  std::map<std::pair<int, TokenCategory>, double> acc;
  for (const auto& c : probes.cells) acc[{c.layer, c.category}] = c.test_accuracy;
  {
    std::ostringstream os;
    os << "layer";
    for (auto cat : kAllCategories) os << ',' << to_string(cat);
    os << '\n';
    for (int layer : layer_set) {
      os << layer;
      for (auto cat : kAllCategories) {
        os << ',';
        if (auto it = acc.find({layer, cat}); it != acc.end()) os << fmt("%.6f", it->second);
      }
      os << '\n';
    }
    files.probe_curves_csv = os.str();
  }

  std::ostringstream summary;
  summary << "Flip layers per experiment (patched prediction equals the source count)\n";
  for (const auto& e : experiments) {
    summary << "  " << e.name << " (" << e.source_count << " -> " << e.target_count << "): ";
    if (e.flips) summary << format_layer_ranges(*e.flips) << '\n';
    else summary << "n/a, source and target counts coincide\n";
  }
  summary << "\nFirst layer with probe accuracy above " << fmt("%.2f", kProbeThreshold) << '\n';
  for (auto cat : kAllCategories) {
    const int layer = probes.first_layer_above(cat, kProbeThreshold);
    summary << "  " << to_string(cat) << ": " << (layer < 0 ? std::string("never") : std::to_string(layer))
            << '\n';
  }

  std::ostringstream mismatch;
  mismatch << "experiment,category,layer,probe_accuracy,flip,kind\n";
  summary << "\nMismatches between causal effect and decodability\n";
  std::size_t mismatch_count = 0;
  for (const auto& e : experiments) {
    const auto cat = experiment_category(e.tokens);
    if (!cat || !e.flips) continue;
    for (int layer : layer_set) {
      auto it = acc.find({layer, *cat});
      if (it == acc.end() || !diffs[e.name].count(layer)) continue;
      const bool flip = std::find(e.flips->begin(), e.flips->end(), layer) != e.flips->end();
      const bool decodable = it->second >= kProbeThreshold;
      if (flip == decodable) continue;
      const char* kind = flip ? "causal-not-decodable" : "decodable-not-causal";
      mismatch << e.name << ',' << to_string(*cat) << ',' << layer << ',' << fmt("%.6f", it->second) << ','
               << (flip ? 1 : 0) << ',' << kind << '\n';
      summary << "  " << e.name << " layer " << layer << ": " << kind << " (" << to_string(*cat)
              << " probe " << fmt("%.3f", it->second) << ")\n";
      ++mismatch_count;
    }
  }
  if (mismatch_count == 0) summary << "  none\n";
  files.mismatch_csv = mismatch.str();
  files.summary_txt = summary.str();
  return files;
}

ReportFiles write_report(const std::filesystem::path& patch_dir, const std::filesystem::path& probe_dir,
                         const std::filesystem::path& out) {
  nlohmann::json summary;
  try {
    summary = nlohmann::json::parse(read_text_file(patch_dir / "patch_summary.json"));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("patch_summary.json: ") + e.what());
  }
  auto files = build_report(read_text_file(patch_dir / "patch_results.csv"), summary,
                            read_text_file(probe_dir / "probe_report.csv"));
  std::filesystem::create_directories(out);
  write_text_file(out / "patch_curves.csv", files.patch_curves_csv);
  write_text_file(out / "probe_curves.csv", files.probe_curves_csv);
  write_text_file(out / "mismatch.csv", files.mismatch_csv);
  write_text_file(out / "summary.txt", files.summary_txt);
  return files;
}

}  // namespace patchlens
