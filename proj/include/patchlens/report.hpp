#pragma once

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "patchlens/probing.hpp"

namespace patchlens {

inline constexpr double kProbeThreshold = 0.9;

/// One row of patch_results.csv.
struct PatchRow {
  std::string experiment;
  int layer = 0;
  double logit_src = 0.0;
  double logit_tgt = 0.0;
  double logit_diff = 0.0;
  int predicted_count = 0;
};

std::vector<PatchRow> patch_rows_from_csv(const std::string& csv);

/// "0-3, 7" style rendering of a sorted layer list; "none" when empty.
std::string format_layer_ranges(const std::vector<int>& layers);

/// Probe category an experiment's token set maps onto: Cls for {0}, ObjectPatch
/// when CLS is absent, nullopt for mixed sets.
std::optional<TokenCategory> experiment_category(const std::vector<int>& tokens);

struct ReportFiles {
  std::string patch_curves_csv;  // layer + one logit-difference column per experiment
  std::string probe_curves_csv;  // layer,object,cls,background
  std::string mismatch_csv;      // experiment,category,layer,probe_accuracy,flip,kind
  std::string summary_txt;
};

/// Builds the report from patch_results.csv, patch_summary.json and
/// probe_report.csv contents. Throws InputError on inconsistent inputs.
ReportFiles build_report(const std::string& patch_csv, const nlohmann::json& patch_summary,
                         const std::string& probe_csv);

/// Reads the sweep outputs and writes patch_curves.csv, probe_curves.csv,
/// mismatch.csv and summary.txt into `out`.
ReportFiles write_report(const std::filesystem::path& patch_dir, const std::filesystem::path& probe_dir,
                         const std::filesystem::path& out);

}  // namespace patchlens
