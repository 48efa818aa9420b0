#include "patchlens/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <set>

#include "patchlens/error.hpp"

namespace patchlens {

std::string to_string(ObjectKind kind) {
  return kind == ObjectKind::kRect1x3 ? "rect1x3" : "square1x1";
}

ObjectKind object_kind_from_string(const std::string& name) {
  if (name == "square1x1") return ObjectKind::kSquare1x1;
  if (name == "rect1x3") return ObjectKind::kRect1x3;
  throw InputError("unknown object kind '" + name + "'");
}

std::vector<int> ObjectSpec::patches(int grid_side) const {
  std::vector<int> out;
  for (int i = 0; i < width(); ++i) out.push_back(row * grid_side + col + i);
  return out;
}

std::vector<int> Scene::occupied_patches() const {
  std::vector<int> out;
  for (const auto& obj : objects) {
    for (int p : obj.patches(grid_side)) out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void Scene::validate() const {
  if (grid_side <= 0) throw InputError("scene: grid_side must be positive");
  if (count() < kMinCount || count() > kMaxCount) {
    throw InputError("scene: object count " + std::to_string(count()) + " outside [1, 10]");
  }
  // owner[p] = object index occupying patch p, or -1.
  std::vector<int> owner(static_cast<std::size_t>(grid_side * grid_side), -1);
  for (int i = 0; i < count(); ++i) {
    const auto& obj = objects[static_cast<std::size_t>(i)];
    if (obj.row < 0 || obj.row >= grid_side || obj.col < 0 || obj.col + obj.width() > grid_side) {
      throw InputError("scene: object " + std::to_string(i) + " at (" + std::to_string(obj.row) +
                       "," + std::to_string(obj.col) + ") is out of bounds");
    }
    for (int p : obj.patches(grid_side)) {
      if (owner[static_cast<std::size_t>(p)] != -1) {
        throw InputError("scene: objects " + std::to_string(owner[static_cast<std::size_t>(p)]) +
                         " and " + std::to_string(i) + " overlap");
      }
      owner[static_cast<std::size_t>(p)] = i;
    }
  }
  for (int r = 0; r < grid_side; ++r) {
    for (int c = 0; c < grid_side; ++c) {
      const int a = owner[static_cast<std::size_t>(r * grid_side + c)];
      if (a < 0) continue;
      const int right = c + 1 < grid_side ? owner[static_cast<std::size_t>(r * grid_side + c + 1)] : -1;
      const int down = r + 1 < grid_side ? owner[static_cast<std::size_t>((r + 1) * grid_side + c)] : -1;
      for (int b : {right, down}) {
        if (b >= 0 && b != a) {
          throw InputError("scene: objects " + std::to_string(a) + " and " + std::to_string(b) +
                           " touch");
        }
      }
    }
  }
}

namespace {

std::optional<Scene> try_place(std::span<const ObjectKind> kinds, int grid_side, Rng& rng) {
  const auto cells = static_cast<std::size_t>(grid_side * grid_side);
  std::vector<char> occupied(cells, 0);
  auto blocked = [&](int r, int c) {
    static constexpr int kDr[] = {0, 1, -1, 0, 0};
    static constexpr int kDc[] = {0, 0, 0, 1, -1};
    for (int k = 0; k < 5; ++k) {
      const int rr = r + kDr[k];
      const int cc = c + kDc[k];
      if (rr >= 0 && rr < grid_side && cc >= 0 && cc < grid_side &&
          occupied[static_cast<std::size_t>(rr * grid_side + cc)]) {
        return true;
      }
    }
    return false;
  };
  Scene scene;
  scene.grid_side = grid_side;
  std::vector<std::pair<int, int>> candidates;
  for (ObjectKind kind : kinds) {
    const int width = kind == ObjectKind::kRect1x3 ? 3 : 1;
    candidates.clear();
    for (int r = 0; r < grid_side; ++r) {
      for (int c = 0; c + width <= grid_side; ++c) {
        bool ok = true;
        for (int i = 0; i < width && ok; ++i) ok = !blocked(r, c + i);
        if (ok) candidates.emplace_back(r, c);
      }
    }
    if (candidates.empty()) return std::nullopt;
    const auto [r, c] = candidates[uniform_index(rng, candidates.size())];
    for (int i = 0; i < width; ++i) occupied[static_cast<std::size_t>(r * grid_side + c + i)] = 1;
    scene.objects.push_back({kind, r, c});
  }
  return scene;
}

}  // namespace

Scene place_kinds(std::span<const ObjectKind> kinds, int grid_side, Rng& rng, int max_attempts) {
  const int count = static_cast<int>(kinds.size());
  if (count < kMinCount || count > kMaxCount) {
    throw InputError("place_objects: count " + std::to_string(count) + " outside [1, 10]");
  }
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    if (auto scene = try_place(kinds, grid_side, rng)) return *scene;
  }
  throw PlacementError("could not place " + std::to_string(count) + " objects on a " +
                       std::to_string(grid_side) + "x" + std::to_string(grid_side) + " grid after " +
                       std::to_string(max_attempts) + " attempts");
}

Scene place_objects(int count, KindMix mix, int grid_side, Rng& rng, int max_attempts) {
  if (count < kMinCount || count > kMaxCount) {
    throw InputError("place_objects: count " + std::to_string(count) + " outside [1, 10]");
  }
  std::vector<ObjectKind> kinds(static_cast<std::size_t>(count));
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    for (auto& k : kinds) {
      k = uniform01(rng) < mix.square_probability ? ObjectKind::kSquare1x1 : ObjectKind::kRect1x3;
    }
    if (auto scene = try_place(kinds, grid_side, rng)) return *scene;
  }
  throw PlacementError("could not place " + std::to_string(count) + " objects on a " +
                       std::to_string(grid_side) + "x" + std::to_string(grid_side) + " grid after " +
                       std::to_string(max_attempts) + " attempts");
}

Image render(const Scene& scene, int patch_px) {
  const auto pp = static_cast<std::size_t>(patch_px);
  const auto grid = static_cast<std::size_t>(scene.grid_side);
  Image img = Image::blank(grid * pp);
  for (int p : scene.occupied_patches()) {
    const std::size_t r0 = static_cast<std::size_t>(p) / grid * pp;
    const std::size_t c0 = static_cast<std::size_t>(p) % grid * pp;
    for (std::size_t dr = 0; dr < pp; ++dr) {
      for (std::size_t dc = 0; dc < pp; ++dc) img.at(r0 + dr, c0 + dc) = 1.0f;
    }
  }
  return img;
}

Scene corrupt(const Scene& scene, std::span<const int> remove) {
  std::set<int> drop;
  for (int idx : remove) {
    if (idx < 0 || idx >= scene.count()) {
      throw InputError("corrupt: object index " + std::to_string(idx) + " outside [0, " +
                       std::to_string(scene.count()) + ")");
    }
    drop.insert(idx);
  }
  if (static_cast<int>(drop.size()) == scene.count()) {
    throw InputError("corrupt: removing every object leaves count 0, which is unsupported");
  }
  Scene out;
  out.grid_side = scene.grid_side;
  for (int i = 0; i < scene.count(); ++i) {
    if (!drop.contains(i)) out.objects.push_back(scene.objects[static_cast<std::size_t>(i)]);
  }
  return out;
}

namespace {

// Block value of a patch-aligned image, or nullopt if the block is mixed.
std::optional<float> block_value(const Image& image, std::size_t r0, std::size_t c0, std::size_t pp) {
  const float v = image.at(r0, c0);
  if (v != 0.0f && v != 1.0f) return std::nullopt;
  for (std::size_t dr = 0; dr < pp; ++dr) {
    for (std::size_t dc = 0; dc < pp; ++dc) {
      if (image.at(r0 + dr, c0 + dc) != v) return std::nullopt;
    }
  }
  return v;
}

}  // namespace

bool is_patch_aligned(const Image& image, int patch_px) {
  if (patch_px <= 0 || image.size % static_cast<std::size_t>(patch_px) != 0 ||
      image.pixels.size() != image.size * image.size) {
    return false;
  }
  const auto pp = static_cast<std::size_t>(patch_px);
  for (std::size_t r = 0; r < image.size; r += pp) {
    for (std::size_t c = 0; c < image.size; c += pp) {
      if (!block_value(image, r, c, pp)) return false;
    }
  }
  return true;
}

int count_oracle(const Image& image, int patch_px) {
  if (!is_patch_aligned(image, patch_px)) {
    throw InputError("count_oracle: image is not a binary patch-aligned image for patch size " +
                     std::to_string(patch_px));
  }
  const auto pp = static_cast<std::size_t>(patch_px);
  const std::size_t grid = image.size / pp;
  std::vector<char> occ(grid * grid);
  for (std::size_t p = 0; p < grid * grid; ++p) occ[p] = image.at(p / grid * pp, p % grid * pp) == 1.0f;
  std::vector<char> seen(grid * grid, 0);
  int components = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < grid * grid; ++start) {
    if (!occ[start] || seen[start]) continue;
    ++components;
    seen[start] = 1;
    stack.assign(1, start);
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      const std::size_t r = p / grid;
      const std::size_t c = p % grid;
      auto visit = [&](std::size_t q) {
        if (occ[q] && !seen[q]) {
          seen[q] = 1;
          stack.push_back(q);
        }
      };
      if (r > 0) visit(p - grid);
      if (r + 1 < grid) visit(p + grid);
      if (c > 0) visit(p - 1);
      if (c + 1 < grid) visit(p + 1);
    }
  }
  return components;
}

int DatasetConfig::train_per_count() const {
  return static_cast<int>(std::lround(images_per_count * train_fraction));
}

void DatasetConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid dataset config: " + what); };
  if (image_px <= 0 || patch_px <= 0) fail("image_px and patch_px must be positive");
  if (image_px % patch_px != 0) {
    fail("patch_px " + std::to_string(patch_px) + " does not divide image_px " + std::to_string(image_px));
  }
  if (images_per_count <= 0) fail("images_per_count must be positive");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) fail("train_fraction must be in (0, 1)");
  const int n_train = train_per_count();
  if (n_train <= 0 || n_train >= images_per_count) fail("split leaves an empty train or test set");
  if (!(kind_mix.square_probability >= 0.0 && kind_mix.square_probability <= 1.0)) {
    fail("square_probability must be in [0, 1]");
  }
  if (max_attempts <= 0) fail("max_attempts must be positive");
}

LabeledDataset generate_dataset(const DatasetConfig& config, std::uint64_t seed) {
  config.validate();
  LabeledDataset ds;
  ds.config = config;
  ds.seed = seed;
  const int n_train = config.train_per_count();
  for (int count = kMinCount; count <= kMaxCount; ++count) {
    for (int i = 0; i < config.images_per_count; ++i) {
      Rng rng(derive_seed(seed, static_cast<std::uint64_t>(count), static_cast<std::uint64_t>(i)));
      Example ex;
      ex.scene = place_objects(count, config.kind_mix, config.grid_side(), rng, config.max_attempts);
      ex.image = render(ex.scene, config.patch_px);
      ex.label = count;
      (i < n_train ? ds.train : ds.test).push_back(std::move(ex));
    }
  }
  return ds;
}

PatchPair make_pair(std::string name, const Scene& clean, std::vector<int> removed) {
  PatchPair pair;
  pair.name = std::move(name);
  pair.clean = clean;
  pair.corrupted = corrupt(clean, removed);
  std::sort(removed.begin(), removed.end());
  removed.erase(std::unique(removed.begin(), removed.end()), removed.end());
  pair.removed = removed;
  for (int i = 0; i < clean.count(); ++i) {
    if (!std::binary_search(removed.begin(), removed.end(), i)) pair.kept.push_back(i);
  }
  for (const auto& obj : clean.objects) {
    std::vector<int> tokens;
    for (int p : obj.patches(clean.grid_side)) tokens.push_back(p + 1);
    pair.object_tokens.push_back(std::move(tokens));
  }
  for (int idx : removed) {
    const auto& toks = pair.object_tokens[static_cast<std::size_t>(idx)];
    pair.removed_region_tokens.insert(pair.removed_region_tokens.end(), toks.begin(), toks.end());
  }
  std::sort(pair.removed_region_tokens.begin(), pair.removed_region_tokens.end());
  return pair;
}

std::vector<PatchPair> make_pair_suite(std::uint64_t seed, int grid_side) {
  using K = ObjectKind;
  std::vector<PatchPair> suite;

  Rng canonical_rng(derive_seed(seed, 0xCA40));
  const std::vector<K> canonical_kinds{K::kSquare1x1, K::kRect1x3};
  const Scene canonical = place_kinds(canonical_kinds, grid_side, canonical_rng);
  suite.push_back(make_pair("canonical", canonical, {1}));

  Rng three_rng(derive_seed(seed, 0xA3));
  const std::vector<K> three_kinds{K::kRect1x3, K::kSquare1x1, K::kSquare1x1};
  const Scene three = place_kinds(three_kinds, grid_side, three_rng);
  suite.push_back(make_pair("appA-3obj-c1", three, {1, 2}));
  suite.push_back(make_pair("appA-3obj-c2", three, {0}));

  Rng four_rng(derive_seed(seed, 0xA4));
  const std::vector<K> four_kinds{K::kRect1x3, K::kSquare1x1, K::kSquare1x1, K::kSquare1x1};
  const Scene four = place_kinds(four_kinds, grid_side, four_rng);
  suite.push_back(make_pair("appA-4obj", four, {1, 2, 3}));

  for (int k = 1; k <= 20; ++k) {
    Rng rng(derive_seed(seed, 0x5A1D, static_cast<std::uint64_t>(k)));
    const int count = 2 + static_cast<int>(uniform_index(rng, kMaxCount - 1));  // 2..10
    const Scene clean = place_objects(count, KindMix{}, grid_side, rng);
    const int n_remove = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(count - 1)));
    std::vector<int> ids(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) ids[static_cast<std::size_t>(i)] = i;
    shuffle(std::span<int>(ids), rng);
    ids.resize(static_cast<std::size_t>(n_remove));
    char name[16];
    std::snprintf(name, sizeof(name), "rand-%02d", k);
    suite.push_back(make_pair(name, clean, ids));
  }
  return suite;
}

}  // namespace patchlens
