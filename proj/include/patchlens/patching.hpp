#pragma once

#include <filesystem>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "patchlens/dataset.hpp"
#include "patchlens/vit.hpp"

namespace patchlens {

enum class Direction { kCleanToCorrupt, kCorruptToClean };

std::string to_string(Direction direction);

/// Patches of one clean-scene object.
struct ObjectTokens {
  int object_id = 0;
};
/// Patches of every removed object, located via the clean scene.
struct RemovedRegionTokens {};
struct ClsToken {};
struct ExplicitIndices {
  std::vector<int> tokens;
};

using SelectorTerm = std::variant<ObjectTokens, RemovedRegionTokens, ClsToken, ExplicitIndices>;

/// Union of selector terms.
struct TokenSelector {
  std::vector<SelectorTerm> terms;

  static TokenSelector object(int id) { return {{ObjectTokens{id}}}; }
  static TokenSelector removed_region() { return {{RemovedRegionTokens{}}}; }
  static TokenSelector cls() { return {{ClsToken{}}}; }
  static TokenSelector indices(std::vector<int> tokens) { return {{ExplicitIndices{std::move(tokens)}}}; }

  TokenSelector operator|(const TokenSelector& other) const;
  std::string describe() const;
};

/// Sorted, deduplicated token indices (patch index + 1; CLS is 0). Throws
/// SpecError on an unknown object id or an empty result.
std::vector<int> resolve_tokens(const TokenSelector& selector, const Scene& clean,
                                std::span<const int> removed);
std::vector<int> resolve_tokens(const TokenSelector& selector, const PatchPair& pair);

/// Inclusive layer range; last < 0 means "through n_layers".
struct LayerRange {
  int first = 0;
  int last = -1;
};

struct ExperimentSpec {
  std::string name;
  PatchPair pair;
  Direction direction = Direction::kCleanToCorrupt;
  TokenSelector selector;
  LayerRange layers;

  const Scene& source() const {
    return direction == Direction::kCleanToCorrupt ? pair.clean : pair.corrupted;
  }
  const Scene& target() const {
    return direction == Direction::kCleanToCorrupt ? pair.corrupted : pair.clean;
  }
};

struct CurveEntry {
  int layer = 0;
  double logit_diff = 0.0;  // logit(source count) - logit(target count)
  int predicted_count = 0;
  std::vector<float> logits;
};

struct LogitDiffCurve {
  std::string experiment;
  int source_count = 0;
  int target_count = 0;
  std::vector<int> tokens;
  std::vector<float> source_baseline;  // unpatched logits
  std::vector<float> target_baseline;
  std::vector<CurveEntry> entries;

  /// Layers whose patched prediction equals the source count; nullopt when
  /// source and target counts coincide and a flip is undefined.
  std::optional<std::vector<int>> flip_layers() const;
};

/// Patched logits for a single (experiment, layer) cell.
std::vector<float> run_cell(const ViTParams<float>& params, const ExperimentSpec& spec, int layer);

/// Independent single-layer patches over the experiment's layer range.
LogitDiffCurve run_experiment(const ViTParams<float>& params, const ExperimentSpec& spec);

/// The six canonical experiments on a pair, A = first kept object and B = the
/// removed objects: (1) B clean->corrupt, (2) removed region corrupt->clean,
/// (3) A clean->corrupt, (4) A corrupt->clean, (5) CLS clean->corrupt,
/// (6) CLS corrupt->clean. Names are "<prefix>-1".."<prefix>-6".
std::vector<ExperimentSpec> build_standard_suite(const PatchPair& pair, const std::string& prefix = "std");

/// Multi-object plans on the "appA-3obj-c1", "appA-3obj-c2" and "appA-4obj"
/// pairs, followed by the standard six on every "rand-NN" pair.
std::vector<ExperimentSpec> build_appendix_suite(const std::vector<PatchPair>& pairs);

/// Source == target on the canonical clean scene, all tokens patched.
ExperimentSpec build_identity_check(const std::vector<PatchPair>& pairs, int n_tokens);

/// Resolves a CLI selector: "std", "appA", "rand", "identity-check", "all",
/// an exact experiment name, or a prefix ending in '*'. Throws ConfigError if
/// nothing matches.
std::vector<ExperimentSpec> select_experiments(const std::string& selector,
                                               const std::vector<PatchPair>& pairs, int n_tokens);

/// CSV: experiment,layer,logit_src,logit_tgt,logit_diff,predicted_count
std::string curves_to_csv(std::span<const LogitDiffCurve> curves);
nlohmann::json flip_summary(std::span<const LogitDiffCurve> curves);

/// Writes <dir>/patch_results.csv and <dir>/patch_summary.json.
void sweep_report(std::span<const LogitDiffCurve> curves, const std::filesystem::path& dir);

}  // namespace patchlens
