#include "patchlens/patching.hpp"

#include <algorithm>
#include <cstdio>
#include <memory>
#include <sstream>

#include "patchlens/dataset_io.hpp"
#include "patchlens/error.hpp"

namespace patchlens {

std::string to_string(Direction direction) {
  return direction == Direction::kCleanToCorrupt ? "clean->corrupt" : "corrupt->clean";
}

TokenSelector TokenSelector::operator|(const TokenSelector& other) const {
  TokenSelector out = *this;
  out.terms.insert(out.terms.end(), other.terms.begin(), other.terms.end());
  return out;
}

std::string TokenSelector::describe() const {
  std::string out;
  for (const auto& term : terms) {
    if (!out.empty()) out += '|';
    std::visit(
        [&](const auto& t) {
          using Term = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<Term, ObjectTokens>) {
            out += "object(" + std::to_string(t.object_id) + ")";
          } else if constexpr (std::is_same_v<Term, RemovedRegionTokens>) {
            out += "removed-region";
          } else if constexpr (std::is_same_v<Term, ClsToken>) {
            out += "cls";
          } else {
            out += "tokens(" + std::to_string(t.tokens.size()) + ")";
          }
        },
        term);
  }
  return out;
}

std::vector<int> resolve_tokens(const TokenSelector& selector, const Scene& clean,
                                std::span<const int> removed) {
  std::vector<int> out;
  auto add_object = [&](int id) {
    if (id < 0 || id >= clean.count()) {
      throw SpecError("selector names object " + std::to_string(id) + " but the clean scene has " +
                      std::to_string(clean.count()) + " objects");
    }
    for (int p : clean.objects[static_cast<std::size_t>(id)].patches(clean.grid_side)) out.push_back(p + 1);
  };
  for (const auto& term : selector.terms) {
    std::visit(
        [&](const auto& t) {
          using Term = std::decay_t<decltype(t)>;
          if constexpr (std::is_same_v<Term, ObjectTokens>) {
            add_object(t.object_id);
          } else if constexpr (std::is_same_v<Term, RemovedRegionTokens>) {
            for (int id : removed) add_object(id);
          } else if constexpr (std::is_same_v<Term, ClsToken>) {
            out.push_back(0);
          } else {
            out.insert(out.end(), t.tokens.begin(), t.tokens.end());
          }
        },
        term);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  if (out.empty()) throw SpecError("selector " + selector.describe() + " resolves to no tokens");
  return out;
}

std::vector<int> resolve_tokens(const TokenSelector& selector, const PatchPair& pair) {
  return resolve_tokens(selector, pair.clean, pair.removed);
}

std::optional<std::vector<int>> LogitDiffCurve::flip_layers() const {
  if (source_count == target_count) return std::nullopt;
  std::vector<int> layers;
  for (const auto& e : entries) {
    if (e.predicted_count == source_count) layers.push_back(e.layer);
  }
  return layers;
}

namespace {

struct PreparedExperiment {
  Image source;
  Image target;
  std::vector<int> tokens;
  int first = 0;
  int last = 0;
};

PreparedExperiment prepare(const ViTConfig& config, const ExperimentSpec& spec) {
  if (spec.pair.clean.grid_side != config.grid_side()) {
    throw SpecError("experiment " + spec.name + ": scene grid " + std::to_string(spec.pair.clean.grid_side) +
                    " does not match model grid " + std::to_string(config.grid_side()));
  }
  PreparedExperiment p;
  p.source = render(spec.source(), config.patch_px);
  p.target = render(spec.target(), config.patch_px);
  p.tokens = resolve_tokens(spec.selector, spec.pair);
  if (p.tokens.back() >= config.n_tokens()) {
    throw SpecError("experiment " + spec.name + ": token " + std::to_string(p.tokens.back()) +
                    " outside the model's " + std::to_string(config.n_tokens()) + " tokens");
  }
  p.first = spec.layers.first;
  p.last = spec.layers.last < 0 ? config.n_layers : spec.layers.last;
  if (p.first < 0 || p.first > p.last || p.last > config.n_layers) {
    throw SpecError("experiment " + spec.name + ": layer range [" + std::to_string(p.first) + ", " +
                    std::to_string(p.last) + "] outside [0, " + std::to_string(config.n_layers) + "]");
  }
  return p;
}

std::vector<float> to_vector(const Tensor<float>& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

std::vector<float> run_cell(const ViTParams<float>& params, const ExperimentSpec& spec, int layer) {
  NoGradGuard no_grad;
  const auto prep = prepare(params.config, spec);
  auto source = std::make_shared<const ActivationCache<float>>(
      *forward<float>(params, prep.source, true).cache);
  const auto plan = PatchPlan<float>::single_layer(layer, prep.tokens, source);
  return to_vector(forward_patched<float>(params, prep.target, plan, false).logits);
}

LogitDiffCurve run_experiment(const ViTParams<float>& params, const ExperimentSpec& spec) {
  NoGradGuard no_grad;
  const auto prep = prepare(params.config, spec);
  auto source_run = forward<float>(params, prep.source, true);
  auto source = std::make_shared<const ActivationCache<float>>(std::move(*source_run.cache));

  LogitDiffCurve curve;
  curve.experiment = spec.name;
  curve.source_count = spec.source().count();
  curve.target_count = spec.target().count();
  curve.tokens = prep.tokens;
  curve.source_baseline = to_vector(source_run.logits);
  curve.target_baseline = to_vector(forward<float>(params, prep.target, false).logits);
  for (int layer = prep.first; layer <= prep.last; ++layer) {
    const auto plan = PatchPlan<float>::single_layer(layer, prep.tokens, source);
    CurveEntry entry;
    entry.layer = layer;
    entry.logits = to_vector(forward_patched<float>(params, prep.target, plan, false).logits);
    entry.logit_diff = logit_diff<float>(entry.logits, curve.source_count, curve.target_count);
    entry.predicted_count = predicted_count<float>(entry.logits);
    curve.entries.push_back(std::move(entry));
  }
  return curve;
}

std::vector<ExperimentSpec> build_standard_suite(const PatchPair& pair, const std::string& prefix) {
  if (pair.kept.empty() || pair.removed.empty()) {
    throw SpecError("pair '" + pair.name + "' needs a kept object A and a removed object B");
  }
  const auto a = TokenSelector::object(pair.kept.front());
  TokenSelector b;
  for (int id : pair.removed) b = b | TokenSelector::object(id);
  using D = Direction;
  const std::vector<std::pair<D, TokenSelector>> rows{
      {D::kCleanToCorrupt, b},
      {D::kCorruptToClean, TokenSelector::removed_region()},
      {D::kCleanToCorrupt, a},
      {D::kCorruptToClean, a},
      {D::kCleanToCorrupt, TokenSelector::cls()},
      {D::kCorruptToClean, TokenSelector::cls()},
  };
  std::vector<ExperimentSpec> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.push_back({prefix + "-" + std::to_string(i + 1), pair, rows[i].first, rows[i].second, {}});
  }
  return out;
}

namespace {

const PatchPair& find_pair(const std::vector<PatchPair>& pairs, const std::string& name) {
  for (const auto& p : pairs) {
    if (p.name == name) return p;
  }
  throw SpecError("pair suite has no pair named '" + name + "'");
}

}  // namespace

std::vector<ExperimentSpec> build_appendix_suite(const std::vector<PatchPair>& pairs) {
  using S = TokenSelector;
  constexpr auto kFwd = Direction::kCleanToCorrupt;
  std::vector<ExperimentSpec> out;
  // 3-object scene: object 0 is the rectangle, 1 and 2 the squares.
  const auto& c1 = find_pair(pairs, "appA-3obj-c1");
  const auto& c2 = find_pair(pairs, "appA-3obj-c2");
  out.push_back({"appA-3obj-c1-rect", c1, kFwd, S::object(0), {}});
  out.push_back({"appA-3obj-c1-rect+sq", c1, kFwd, S::object(0) | S::object(1), {}});
  out.push_back({"appA-3obj-c2-squares", c2, kFwd, S::object(1) | S::object(2), {}});
  // 4-object scene: rectangle 0 and squares 1..3; corruption keeps the rectangle.
  const auto& four = find_pair(pairs, "appA-4obj");
  out.push_back({"appA-4obj-rect", four, kFwd, S::object(0), {}});
  out.push_back({"appA-4obj-rect+1sq", four, kFwd, S::object(0) | S::object(1), {}});
  out.push_back({"appA-4obj-rect+2sq", four, kFwd, S::object(0) | S::object(1) | S::object(2), {}});
  for (const auto& p : pairs) {
    if (p.name.rfind("rand-", 0) != 0) continue;
    auto specs = build_standard_suite(p, p.name + "-std");
    out.insert(out.end(), specs.begin(), specs.end());
  }
  return out;
}

ExperimentSpec build_identity_check(const std::vector<PatchPair>& pairs, int n_tokens) {
  const auto& canonical = find_pair(pairs, "canonical");
  std::vector<int> all(static_cast<std::size_t>(n_tokens));
  for (int i = 0; i < n_tokens; ++i) all[static_cast<std::size_t>(i)] = i;
  return {"identity-check", make_pair("canonical-identity", canonical.clean, {}),
          Direction::kCleanToCorrupt, TokenSelector::indices(std::move(all)), {}};
}

std::vector<ExperimentSpec> select_experiments(const std::string& selector,
                                               const std::vector<PatchPair>& pairs, int n_tokens) {
  std::vector<ExperimentSpec> everything = build_standard_suite(find_pair(pairs, "canonical"), "std");
  const auto appendix = build_appendix_suite(pairs);
  everything.insert(everything.end(), appendix.begin(), appendix.end());
  everything.push_back(build_identity_check(pairs, n_tokens));

  auto starts_with = [](const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; };
  std::vector<ExperimentSpec> out;
  for (auto& spec : everything) {
    bool match = false;
    if (selector == "all") match = true;
    else if (selector == "std") match = starts_with(spec.name, "std-");
    else if (selector == "appA") match = starts_with(spec.name, "appA-");
    else if (selector == "rand") match = starts_with(spec.name, "rand-");
    else if (!selector.empty() && selector.back() == '*') match = starts_with(spec.name, selector.substr(0, selector.size() - 1));
    else match = spec.name == selector;
    if (match) out.push_back(std::move(spec));
  }
  if (out.empty()) throw ConfigError("suite selector '" + selector + "' matches no experiment");
  return out;
}

std::string curves_to_csv(std::span<const LogitDiffCurve> curves) {
  std::ostringstream os;
  os << "experiment,layer,logit_src,logit_tgt,logit_diff,predicted_count\n";
  char buf[256];
  for (const auto& c : curves) {
    for (const auto& e : c.entries) {
      const float src = e.logits[static_cast<std::size_t>(c.source_count - 1)];
      const float tgt = e.logits[static_cast<std::size_t>(c.target_count - 1)];
      std::snprintf(buf, sizeof(buf), "%s,%d,%.9g,%.9g,%.9g,%d\n", c.experiment.c_str(), e.layer,
                    static_cast<double>(src), static_cast<double>(tgt), e.logit_diff, e.predicted_count);
      os << buf;
    }
  }
  return os.str();
}

nlohmann::json flip_summary(std::span<const LogitDiffCurve> curves) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& c : curves) {
    const auto flips = c.flip_layers();
    out.push_back({{"experiment", c.experiment},
                   {"source_count", c.source_count},
                   {"target_count", c.target_count},
                   {"tokens", c.tokens},
                   {"baseline_source_prediction", predicted_count<float>(c.source_baseline)},
                   {"baseline_target_prediction", predicted_count<float>(c.target_baseline)},
                   {"flip_layers", flips ? nlohmann::json(*flips) : nlohmann::json("n/a")}});
  }
  return out;
}

void sweep_report(std::span<const LogitDiffCurve> curves, const std::filesystem::path& dir) {
  if (curves.empty()) throw InputError("sweep_report: no curves");
  std::filesystem::create_directories(dir);
  write_text_file(dir / "patch_results.csv", curves_to_csv(curves));
  write_text_file(dir / "patch_summary.json", flip_summary(curves).dump(1) + "\n");
}

}  // namespace patchlens
