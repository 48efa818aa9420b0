#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "patchlens/image.hpp"
#include "patchlens/rng.hpp"

namespace patchlens {

inline constexpr int kMinCount = 1;
inline constexpr int kMaxCount = 10;

enum class ObjectKind { kSquare1x1, kRect1x3 };

std::string to_string(ObjectKind kind);
ObjectKind object_kind_from_string(const std::string& name);

/// An object anchored at its leftmost patch. Rectangles are horizontal.
struct ObjectSpec {
  ObjectKind kind = ObjectKind::kSquare1x1;
  int row = 0;
  int col = 0;

  int width() const { return kind == ObjectKind::kRect1x3 ? 3 : 1; }
  /// Row-major patch indices covered on a grid of the given side.
  std::vector<int> patches(int grid_side) const;

  friend bool operator==(const ObjectSpec&, const ObjectSpec&) = default;
};

/// Symbolic layout of objects on the patch grid. Valid scenes have 1..10
/// objects, in bounds, pairwise disjoint, and with no 4-adjacent patches
/// between distinct objects.
struct Scene {
  int grid_side = 8;
  std::vector<ObjectSpec> objects;

  int count() const { return static_cast<int>(objects.size()); }
  /// Sorted patch indices covered by any object.
  std::vector<int> occupied_patches() const;
  /// Throws InputError describing the first violated invariant.
  void validate() const;

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Per-object kind distribution.
struct KindMix {
  double square_probability = 0.7;
};

/// Random valid scene with `count` objects, kinds drawn independently per
/// object. Rejection-samples whole layouts; throws PlacementError after
/// `max_attempts` failures.
Scene place_objects(int count, KindMix mix, int grid_side, Rng& rng, int max_attempts = 1000);

/// Random valid scene with the given object kinds, in order.
Scene place_kinds(std::span<const ObjectKind> kinds, int grid_side, Rng& rng, int max_attempts = 1000);

/// Occupied patches become patch_px x patch_px blocks of 1.0.
Image render(const Scene& scene, int patch_px);

/// Scene without the objects at `remove` (indices into scene.objects). Order
/// and anchors of the remaining objects are preserved.
Scene corrupt(const Scene& scene, std::span<const int> remove);

/// Number of 4-connected components of occupied patches. Throws InputError
/// if a grid-aligned block is not uniformly 0.0 or 1.0.
int count_oracle(const Image& image, int patch_px);

/// True if every grid-aligned block is constant and holds 0.0 or 1.0.
bool is_patch_aligned(const Image& image, int patch_px);

struct DatasetConfig {
  int image_px = 32;
  int patch_px = 4;
  int images_per_count = 100;
  double train_fraction = 0.75;
  KindMix kind_mix{};
  int max_attempts = 1000;

  int grid_side() const { return image_px / patch_px; }
  int train_per_count() const;
  void validate() const;

  friend bool operator==(const DatasetConfig& a, const DatasetConfig& b) {
    return a.image_px == b.image_px && a.patch_px == b.patch_px &&
           a.images_per_count == b.images_per_count && a.train_fraction == b.train_fraction &&
           a.kind_mix.square_probability == b.kind_mix.square_probability &&
           a.max_attempts == b.max_attempts;
  }
};

struct Example {
  Image image;
  Scene scene;
  int label = 0;  // object count, 1..10
};

enum class Split { kTrain, kTest };

struct LabeledDataset {
  DatasetConfig config;
  std::uint64_t seed = 0;
  std::vector<Example> train;
  std::vector<Example> test;

  const std::vector<Example>& split(Split s) const { return s == Split::kTrain ? train : test; }
};

/// images_per_count scenes for every count 1..10, each from its own RNG
/// stream (seed, count, index); the first train_per_count of every count go
/// to the train split.
LabeledDataset generate_dataset(const DatasetConfig& config, std::uint64_t seed);

/// Clean/corrupted scene pair. Object ids index clean.objects; the corrupted
/// scene keeps the objects in `kept`, in order, at unchanged anchors.
struct PatchPair {
  std::string name;
  Scene clean;
  Scene corrupted;
  std::vector<int> kept;
  std::vector<int> removed;
  // Token indices (patch index + 1, CLS is token 0).
  std::vector<std::vector<int>> object_tokens;  // per clean object
  std::vector<int> removed_region_tokens;

  friend bool operator==(const PatchPair&, const PatchPair&) = default;
};

/// Builds a pair, filling the token sets.
PatchPair make_pair(std::string name, const Scene& clean, std::vector<int> removed);

/// The canonical square+rectangle pair ("canonical"), the 3-object pair with
/// both corruptions ("appA-3obj-c1", "appA-3obj-c2"), the 4-object pair
/// ("appA-4obj"), and 20 random pairs ("rand-01".."rand-20").
std::vector<PatchPair> make_pair_suite(std::uint64_t seed, int grid_side = 8);

}  // namespace patchlens
