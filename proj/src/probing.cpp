#include "patchlens/probing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "patchlens/adam.hpp"
#include "patchlens/error.hpp"
#include "patchlens/ops.hpp"
#include "patchlens/rng.hpp"

namespace patchlens {

std::string to_string(TokenCategory category) {
  switch (category) {
    case TokenCategory::kObjectPatch: return "object";
    case TokenCategory::kCls: return "cls";
    case TokenCategory::kBackgroundPatch: return "background";
  }
  return "?";
}

TokenCategory token_category_from_string(const std::string& name) {
  for (auto c : kAllCategories) {
    if (to_string(c) == name) return c;
  }
  throw InputError("unknown token category '" + name + "'");
}

std::vector<int> candidate_tokens(const Scene& scene, TokenCategory category) {
  if (category == TokenCategory::kCls) return {0};
  const auto occupied = scene.occupied_patches();
  std::vector<int> out;
  if (category == TokenCategory::kObjectPatch) {
    for (int p : occupied) out.push_back(p + 1);
  } else {
    for (int p = 0; p < scene.grid_side * scene.grid_side; ++p) {
      if (!std::binary_search(occupied.begin(), occupied.end(), p)) out.push_back(p + 1);
    }
  }
  return out;
}

int sample_token(const Scene& scene, TokenCategory category, std::uint64_t seed, Split split,
                 std::size_t image_index) {
  const auto candidates = candidate_tokens(scene, category);
  if (candidates.empty()) {
    throw InputError("scene has no " + to_string(category) + " tokens to sample");
  }
  const std::uint64_t stream = (split == Split::kTrain ? 0ULL : 1ULL << 40) + image_index;
  Rng rng(derive_seed(seed, stream, static_cast<std::uint64_t>(category) + 1));
  return candidates[uniform_index(rng, candidates.size())];
}

std::vector<std::array<ProbeDataset, 3>> collect_all_features(const ViTParams<float>& params,
                                                              const LabeledDataset& dataset,
                                                              std::uint64_t seed, Split split) {
  const auto& cfg = params.config;
  const auto& examples = dataset.split(split);
  const auto layers = static_cast<std::size_t>(cfg.n_layers) + 1;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto tokens = static_cast<std::size_t>(cfg.n_tokens());

  std::vector<std::array<ProbeDataset, 3>> out(layers);
  std::vector<std::array<int, 3>> sampled(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      sampled[i][c] = sample_token(examples[i].scene, kAllCategories[c], seed, split, i);
    }
  }
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t c = 0; c < 3; ++c) {
      auto& pd = out[l][c];
      pd.layer = static_cast<int>(l);
      pd.category = kAllCategories[c];
      pd.split = split;
      pd.d_model = d;
      pd.features.resize(examples.size() * d);
      for (std::size_t i = 0; i < examples.size(); ++i) {
        pd.labels.push_back(examples[i].label);
        pd.tokens.push_back(sampled[i][c]);
      }
    }
  }

  NoGradGuard no_grad;
  constexpr std::size_t kBatch = 64;
  std::vector<const Image*> images;
  for (std::size_t start = 0; start < examples.size(); start += kBatch) {
    const std::size_t n = std::min(kBatch, examples.size() - start);
    images.clear();
    for (std::size_t i = 0; i < n; ++i) images.push_back(&examples[start + i].image);
    BoundaryHook<float> hook = [&](std::size_t layer, Tensor<float>& residual) {
      const float* h = residual.data().data();
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
          const auto tok = static_cast<std::size_t>(sampled[start + i][c]);
          std::copy_n(h + (i * tokens + tok) * d, d, out[layer][c].features.data() + (start + i) * d);
        }
      }
    };
    forward_batch(params, stack_patches<float>(images, cfg), n, hook);
  }
  return out;
}

ProbeDataset collect_features(const ViTParams<float>& params, const LabeledDataset& dataset, int layer,
                              TokenCategory category, std::uint64_t seed, Split split) {
  if (layer < 0 || layer > params.config.n_layers) {
    throw InputError("collect_features: layer " + std::to_string(layer) + " outside [0, " +
                     std::to_string(params.config.n_layers) + "]");
  }
  auto all = collect_all_features(params, dataset, seed, split);
  for (auto& pd : all[static_cast<std::size_t>(layer)]) {
    if (pd.category == category) return std::move(pd);
  }
  throw InputError("collect_features: unknown category");
}

Probe Probe::zeros(std::size_t d_model) {
  Probe p;
  p.d_model = d_model;
  p.weight.assign(d_model * kNumClasses, 0.0f);
  p.bias.assign(kNumClasses, 0.0f);
  p.feature_mean.assign(d_model, 0.0f);
  p.feature_scale.assign(d_model, 1.0f);
  return p;
}

std::vector<int> Probe::predict(std::span<const float> features) const {
  if (d_model == 0 || features.size() % d_model != 0) {
    throw InputError("probe: feature buffer of " + std::to_string(features.size()) +
                     " values is not a multiple of d_model " + std::to_string(d_model));
  }
  const std::size_t n = features.size() / d_model;
  std::vector<int> out(n);
  std::array<float, kNumClasses> logits{};
  std::vector<float> x(d_model);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d_model; ++k) {
      x[k] = (features[i * d_model + k] - feature_mean[k]) * feature_scale[k];
    }
    for (std::size_t c = 0; c < kNumClasses; ++c) {
      float acc = bias[c];
      for (std::size_t k = 0; k < d_model; ++k) acc += x[k] * weight[k * kNumClasses + c];
      logits[c] = acc;
    }
    out[i] = predicted_count<float>(logits);
  }
  return out;
}

Probe train_probe(std::span<const float> features, std::span<const int> labels, std::size_t d_model,
                  const ProbeOptions& options) {
  if (d_model == 0 || features.size() != labels.size() * d_model) {
    throw InputError("train_probe: " + std::to_string(features.size()) + " feature values for " +
                     std::to_string(labels.size()) + " labels of dimension " + std::to_string(d_model));
  }
  if (labels.empty()) throw InputError("train_probe: no training examples");
  if (options.epochs <= 0 || !(options.lr > 0.0)) throw InputError("train_probe: bad options");
  const std::size_t n = labels.size();

  Probe probe = Probe::zeros(d_model);
  if (options.standardize) {
    for (std::size_t k = 0; k < d_model; ++k) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += features[i * d_model + k];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double dv = features[i * d_model + k] - mean;
        var += dv * dv;
      }
      const double sd = std::sqrt(var / static_cast<double>(n));
      probe.feature_mean[k] = static_cast<float>(mean);
      // Constant features carry no signal; leave them centred at zero.
      probe.feature_scale[k] = sd > 1e-12 ? static_cast<float>(1.0 / sd) : 1.0f;
    }
  }

  std::vector<float> x(features.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d_model; ++k) {
      x[i * d_model + k] = (features[i * d_model + k] - probe.feature_mean[k]) * probe.feature_scale[k];
    }
  }
  std::vector<int> targets(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < kMinCount || labels[i] > kMaxCount) {
      throw InputError("train_probe: label " + std::to_string(labels[i]) + " outside [1, 10]");
    }
    targets[i] = labels[i] - 1;
  }

  const Tensor<float> inputs({n, d_model}, std::move(x));
  Tensor<float> w = Tensor<float>::zeros({d_model, static_cast<std::size_t>(kNumClasses)}, true);
  Tensor<float> b = Tensor<float>::zeros({static_cast<std::size_t>(kNumClasses)}, true);
  Adam<float> opt({w, b}, AdamOptions{options.lr});
  double last_loss = 0.0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    opt.zero_grad();
    const auto loss = cross_entropy(add_bias(matmul(inputs, w), b), targets);
    last_loss = loss.item();
    if (!std::isfinite(last_loss)) {
      throw ProbeError("probe training produced a non-finite loss at epoch " + std::to_string(epoch + 1));
    }
    backward(loss);
    opt.step();
  }
  {
    NoGradGuard no_grad;
    last_loss = cross_entropy(add_bias(matmul(inputs, w), b), targets).item();
  }
  probe.weight.assign(w.data().begin(), w.data().end());
  probe.bias.assign(b.data().begin(), b.data().end());
  probe.final_loss = last_loss;
  probe.epochs = options.epochs;
  return probe;
}

double evaluate_probe(const Probe& probe, std::span<const float> features, std::span<const int> labels) {
  if (labels.empty()) throw InputError("evaluate_probe: empty set");
  if (features.size() != labels.size() * probe.d_model) {
    throw InputError("evaluate_probe: feature/label size mismatch");
  }
  const auto pred = probe.predict(features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

double ProbeReport::accuracy(int layer, TokenCategory category) const {
  for (const auto& c : cells) {
    if (c.layer == layer && c.category == category) return c.test_accuracy;
  }
  throw InputError("probe report has no cell for layer " + std::to_string(layer) + ", " + to_string(category));
}

int ProbeReport::first_layer_above(TokenCategory category, double threshold) const {
  int best = -1;
  for (const auto& c : cells) {
    if (c.category == category && c.test_accuracy > threshold && (best < 0 || c.layer < best)) best = c.layer;
  }
  return best;
}

std::string ProbeReport::to_csv() const {
  std::ostringstream os;
  os << "layer,category,test_accuracy,final_train_loss,seed\n";
  char buf[160];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof(buf), "%d,%s,%.6f,%.9g,%llu\n", c.layer, to_string(c.category).c_str(),
                  c.test_accuracy, c.final_train_loss, static_cast<unsigned long long>(c.seed));
    os << buf;
  }
  return os.str();
}

ProbeReport probe_report_from_csv(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  if (!std::getline(in, line) || line != "layer,category,test_accuracy,final_train_loss,seed") {
    throw InputError("probe report CSV: unexpected header");
  }
  ProbeReport report;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string layer, cat, acc, loss, seed;
    if (!std::getline(row, layer, ',') || !std::getline(row, cat, ',') || !std::getline(row, acc, ',') ||
        !std::getline(row, loss, ',') || !std::getline(row, seed)) {
      throw InputError("probe report CSV: malformed row '" + line + "'");
    }
    ProbeCell cell;
    try {
      cell.layer = std::stoi(layer);
      cell.category = token_category_from_string(cat);
      cell.test_accuracy = std::stod(acc);
      cell.final_train_loss = std::stod(loss);
      cell.seed = std::stoull(seed);
    } catch (const std::logic_error&) {
      throw InputError("probe report CSV: malformed row '" + line + "'");
    }
    report.cells.push_back(cell);
  }
  return report;
}

ProbeReport probe_sweep(const ViTParams<float>& params, const LabeledDataset& dataset, std::uint64_t seed,
                        const ProbeOptions& options, bool shuffle_labels) {
  const auto train = collect_all_features(params, dataset, seed, Split::kTrain);
  const auto test = collect_all_features(params, dataset, seed, Split::kTest);
  ProbeReport report;
  for (std::size_t l = 0; l < train.size(); ++l) {
    for (std::size_t c = 0; c < 3; ++c) {
      const auto& tr = train[l][c];
      const auto& te = test[l][c];
      std::vector<int> labels = tr.labels;
      if (shuffle_labels) {
        Rng rng(derive_seed(seed, 0x5B0FF1E, l * 3 + c));
        shuffle(std::span<int>(labels), rng);
      }
      const Probe probe = train_probe(tr.features, labels, tr.d_model, options);
      report.cells.push_back({static_cast<int>(l), kAllCategories[c],
                              evaluate_probe(probe, te.features, te.labels), probe.final_loss, seed,
                              probe.epochs});
    }
  }
  return report;
}

}  // namespace patchlens
