#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "patchlens/dataset.hpp"
#include "patchlens/vit.hpp"

namespace patchlens {

enum class TokenCategory { kObjectPatch, kCls, kBackgroundPatch };

inline constexpr std::array<TokenCategory, 3> kAllCategories{
    TokenCategory::kObjectPatch, TokenCategory::kCls, TokenCategory::kBackgroundPatch};

std::string to_string(TokenCategory category);
TokenCategory token_category_from_string(const std::string& name);

/// Candidate token indices of a category for one scene (CLS offset applied).
std::vector<int> candidate_tokens(const Scene& scene, TokenCategory category);

/// One token drawn uniformly from the candidates, from the stream
/// (seed, split, image index, category). The draw does not depend on layer.
int sample_token(const Scene& scene, TokenCategory category, std::uint64_t seed, Split split,
                 std::size_t image_index);

/// Residual-stream features of one sampled token per image.
struct ProbeDataset {
  int layer = 0;
  TokenCategory category = TokenCategory::kCls;
  Split split = Split::kTrain;
  std::size_t d_model = 0;
  std::vector<float> features;  // [size() x d_model]
  std::vector<int> labels;      // counts 1..10
  std::vector<int> tokens;      // sampled token per image

  std::size_t size() const { return labels.size(); }
};

/// Features for one (layer, category) over a split.
ProbeDataset collect_features(const ViTParams<float>& params, const LabeledDataset& dataset, int layer,
                              TokenCategory category, std::uint64_t seed, Split split);

/// Features for every layer 0..n_layers and category from one captured pass
/// per image; indexed [layer][category].
std::vector<std::array<ProbeDataset, 3>> collect_all_features(const ViTParams<float>& params,
                                                              const LabeledDataset& dataset,
                                                              std::uint64_t seed, Split split);

struct ProbeOptions {
  double lr = 1e-2;
  int epochs = 500;
  // Per-feature z-scoring with train statistics. An affine map of the inputs,
  // so the set of representable probes is unchanged.
  bool standardize = true;
};

/// Multinomial logistic regression over 10 count classes.
struct Probe {
  std::size_t d_model = 0;
  std::vector<float> weight;  // [d_model x 10]
  std::vector<float> bias;    // [10]
  std::vector<float> feature_mean;
  std::vector<float> feature_scale;
  double final_loss = 0.0;
  int epochs = 0;

  /// Zero weights, zero bias, identity standardization.
  static Probe zeros(std::size_t d_model);
  /// 1-based predicted counts; ties go to the lowest class.
  std::vector<int> predict(std::span<const float> features) const;
};

/// Full-batch Adam on the mean cross-entropy from a zero initialization.
/// Throws ProbeError on a non-finite loss and InputError on malformed input.
Probe train_probe(std::span<const float> features, std::span<const int> labels, std::size_t d_model,
                  const ProbeOptions& options = {});

/// Fraction of correct argmax predictions. Throws InputError when empty.
double evaluate_probe(const Probe& probe, std::span<const float> features, std::span<const int> labels);

struct ProbeCell {
  int layer = 0;
  TokenCategory category = TokenCategory::kCls;
  double test_accuracy = 0.0;
  double final_train_loss = 0.0;
  std::uint64_t seed = 0;
  int epochs = 0;
};

struct ProbeReport {
  std::vector<ProbeCell> cells;  // layer-major, categories in kAllCategories order

  double accuracy(int layer, TokenCategory category) const;
  /// First layer whose accuracy for `category` exceeds `threshold`, or -1.
  int first_layer_above(TokenCategory category, double threshold) const;
  /// layer,category,test_accuracy,final_train_loss,seed
  std::string to_csv() const;
};

/// Probe grid over layers 0..n_layers x all categories. With
/// `shuffle_labels`, train labels are permuted (seeded) before fitting and
/// test accuracy is measured against the true labels.
ProbeReport probe_sweep(const ViTParams<float>& params, const LabeledDataset& dataset, std::uint64_t seed,
                        const ProbeOptions& options = {}, bool shuffle_labels = false);

ProbeReport probe_report_from_csv(const std::string& csv);

}  // namespace patchlens
