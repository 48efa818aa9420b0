#include <gtest/gtest.h>

#include <fstream>
#include <iterator>
#include <set>

#include "patchlens/dataset.hpp"
#include "patchlens/dataset_io.hpp"
#include "patchlens/error.hpp"
#include "test_support.hpp"

namespace patchlens {
namespace {

using K = ObjectKind;
using testing::TempDir;

Scene scene_of(std::vector<ObjectSpec> objects, int grid = 8) { return Scene{grid, std::move(objects)}; }

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

TEST(Scene, ObjectPatches) {
  EXPECT_EQ((ObjectSpec{K::kRect1x3, 2, 1}.patches(8)), (std::vector<int>{17, 18, 19}));
  EXPECT_EQ((ObjectSpec{K::kSquare1x1, 7, 7}.patches(8)), (std::vector<int>{63}));
}

TEST(Scene, ValidationCatchesEveryInvariant) {
  EXPECT_NO_THROW(scene_of({{K::kSquare1x1, 0, 0}, {K::kSquare1x1, 0, 2}}).validate());
  EXPECT_NO_THROW(scene_of({{K::kSquare1x1, 0, 0}, {K::kSquare1x1, 1, 1}}).validate());  // diagonal is fine
  EXPECT_THROW(scene_of({}).validate(), InputError);
  EXPECT_THROW(scene_of({{K::kRect1x3, 0, 6}}).validate(), InputError);
  EXPECT_THROW(scene_of({{K::kSquare1x1, 8, 0}}).validate(), InputError);
  EXPECT_THROW(scene_of({{K::kSquare1x1, 0, 0}, {K::kSquare1x1, 0, 1}}).validate(), InputError);
  EXPECT_THROW(scene_of({{K::kSquare1x1, 3, 3}, {K::kSquare1x1, 4, 3}}).validate(), InputError);
  EXPECT_THROW(scene_of({{K::kRect1x3, 3, 0}, {K::kSquare1x1, 3, 1}}).validate(), InputError);
  std::vector<ObjectSpec> eleven;
  for (int i = 0; i < 11; ++i) eleven.push_back({K::kSquare1x1, (i / 4) * 2, (i % 4) * 2});
  EXPECT_THROW(scene_of(eleven).validate(), InputError);
}

TEST(Render, BlocksAndOracle) {
  const Scene s = scene_of({{K::kSquare1x1, 0, 0}, {K::kRect1x3, 2, 1}});
  const Image img = render(s, 4);
  ASSERT_EQ(img.size, 32u);
  EXPECT_EQ(img.at(0, 0), 1.0f);
  EXPECT_EQ(img.at(3, 3), 1.0f);
  EXPECT_EQ(img.at(0, 4), 0.0f);
  EXPECT_EQ(img.at(8, 4), 1.0f);
  EXPECT_EQ(img.at(11, 15), 1.0f);
  EXPECT_EQ(img.at(11, 16), 0.0f);
  EXPECT_TRUE(is_patch_aligned(img, 4));
  EXPECT_EQ(count_oracle(img, 4), 2);
}

TEST(Render, OracleCountsConnectedComponents) {
  // The oracle works on raw blocks, so it must merge touching patches even
  // though no valid scene contains them.
  Image img = Image::blank(16);
  auto fill = [&](int pr, int pc) {
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) img.at(pr * 4 + r, pc * 4 + c) = 1.0f;
  };
  fill(0, 0);
  fill(0, 1);
  fill(1, 1);
  fill(3, 3);
  fill(2, 0);
  EXPECT_EQ(count_oracle(img, 4), 3);  // (2,0) only touches (1,1) diagonally
}

TEST(Render, OracleRejectsMisalignedBlocks) {
  Image img = Image::blank(32);
  img.at(5, 5) = 1.0f;
  EXPECT_FALSE(is_patch_aligned(img, 4));
  EXPECT_THROW(count_oracle(img, 4), InputError);
  Image grey = Image::blank(32);
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) grey.at(r, c) = 0.5f;
  EXPECT_FALSE(is_patch_aligned(grey, 4));
}

TEST(Placement, TenObjectsAlwaysFit) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const Scene s = place_objects(10, KindMix{}, 8, rng);
    EXPECT_EQ(s.count(), 10);
    EXPECT_NO_THROW(s.validate());
    EXPECT_EQ(count_oracle(render(s, 4), 4), 10);
  }
}

TEST(Placement, InfeasibleLayoutThrows) {
  // At most two separated rectangles fit per row and only four rows can hold
  // them, so ten rectangles never fit on an 8x8 grid.
  const std::vector<K> kinds(10, K::kRect1x3);
  Rng rng(1);
  EXPECT_THROW(place_kinds(kinds, 8, rng, 50), PlacementError);
  EXPECT_THROW(place_objects(0, KindMix{}, 8, rng), InputError);
  EXPECT_THROW(place_objects(11, KindMix{}, 8, rng), InputError);
}

TEST(Placement, KindsFollowRequestAndMix) {
  Rng rng(3);
  const std::vector<K> kinds{K::kRect1x3, K::kSquare1x1, K::kRect1x3};
  const Scene s = place_kinds(kinds, 8, rng);
  for (std::size_t i = 0; i < kinds.size(); ++i) EXPECT_EQ(s.objects[i].kind, kinds[i]);
  Rng r2(4);
  int squares = 0, total = 0;
  for (int i = 0; i < 300; ++i) {
    for (const auto& o : place_objects(5, KindMix{0.7}, 8, r2).objects) {
      squares += o.kind == K::kSquare1x1;
      ++total;
    }
  }
  EXPECT_NEAR(double(squares) / total, 0.7, 0.05);
  Rng r3(5);
  for (const auto& o : place_objects(4, KindMix{1.0}, 8, r3).objects) EXPECT_EQ(o.kind, K::kSquare1x1);
}

TEST(Corrupt, KeepsAnchorsAndOrder) {
  const Scene s = scene_of({{K::kSquare1x1, 0, 0}, {K::kRect1x3, 2, 1}, {K::kSquare1x1, 5, 5}});
  const std::vector<int> remove{1};
  const Scene c = corrupt(s, remove);
  EXPECT_EQ(c.objects, (std::vector<ObjectSpec>{{K::kSquare1x1, 0, 0}, {K::kSquare1x1, 5, 5}}));
}

TEST(Dataset, SplitSizesLabelsAndOracle) {
  const auto ds = generate_dataset(DatasetConfig{}, 11);
  ASSERT_EQ(ds.train.size(), 750u);
  ASSERT_EQ(ds.test.size(), 250u);
  std::vector<int> per_count(11, 0);
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& ex : *split) {
      EXPECT_NO_THROW(ex.scene.validate());
      EXPECT_TRUE(is_patch_aligned(ex.image, 4));
      EXPECT_EQ(count_oracle(ex.image, 4), ex.label);
      EXPECT_EQ(ex.scene.count(), ex.label);
      ++per_count[ex.label];
    }
  }
  for (int c = 1; c <= 10; ++c) EXPECT_EQ(per_count[c], 100);
}

TEST(Dataset, SeededAndStreamsIndependentOfSize) {
  DatasetConfig small;
  small.images_per_count = 8;
  const auto a = generate_dataset(small, 5);
  const auto b = generate_dataset(small, 5);
  const auto c = generate_dataset(small, 6);
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].image, b.train[i].image);
  bool differs = false;
  for (std::size_t i = 0; i < a.train.size(); ++i) differs = differs || !(a.train[i].scene == c.train[i].scene);
  EXPECT_TRUE(differs);
  // Each image has its own stream, so a larger run starts with the same scenes.
  DatasetConfig large = small;
  large.images_per_count = 16;
  const auto d = generate_dataset(large, 5);
  EXPECT_EQ(a.train[0].scene, d.train[0].scene);
}

TEST(Dataset, ConfigValidation) {
  DatasetConfig c;
  c.patch_px = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.train_fraction = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.images_per_count = 1;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(DatasetIo, RoundTripAndByteIdenticalRewrite) {
  TempDir dir("ds");
  DatasetConfig cfg;
  cfg.images_per_count = 8;
  const auto ds = generate_dataset(cfg, 21);
  save_dataset(ds, dir / "a");
  save_dataset(generate_dataset(cfg, 21), dir / "b");
  for (const char* f : {"manifest.json", "images.bin"})
    EXPECT_EQ(file_bytes(dir / "a" / f), file_bytes(dir / "b" / f)) << f;
  const auto back = load_dataset(dir / "a");
  EXPECT_EQ(back.seed, 21u);
  EXPECT_EQ(back.config, cfg);
  ASSERT_EQ(back.train.size(), ds.train.size());
  ASSERT_EQ(back.test.size(), ds.test.size());
  for (std::size_t i = 0; i < ds.test.size(); ++i) {
    EXPECT_EQ(back.test[i].image, ds.test[i].image);
    EXPECT_EQ(back.test[i].scene, ds.test[i].scene);
    EXPECT_EQ(back.test[i].label, ds.test[i].label);
  }
}

TEST(DatasetIo, DetectsCorruption) {
  TempDir dir("dsbad");
  DatasetConfig cfg;
  cfg.images_per_count = 4;
  save_dataset(generate_dataset(cfg, 2), dir.path());
  {
    std::fstream f(dir / "images.bin", std::ios::in | std::ios::out | std::ios::binary);
    const float v = 0.5f;
    f.write(reinterpret_cast<const char*>(&v), sizeof v);
  }
  EXPECT_THROW(load_dataset(dir.path()), LoadError);
  std::filesystem::resize_file(dir / "images.bin", 12);
  EXPECT_THROW(load_dataset(dir.path()), LoadError);
  EXPECT_THROW(load_dataset(dir / "missing"), LoadError);
}

TEST(Pairs, TokenSetsOfRectangleAtRow2Col1) {
  const Scene clean = scene_of({{K::kSquare1x1, 5, 5}, {K::kRect1x3, 2, 1}});
  const auto p = make_pair("t", clean, {1});
  EXPECT_EQ(p.object_tokens[1], (std::vector<int>{18, 19, 20}));
  EXPECT_EQ(p.object_tokens[0], (std::vector<int>{46}));
  EXPECT_EQ(p.removed_region_tokens, (std::vector<int>{18, 19, 20}));
  EXPECT_EQ(p.kept, (std::vector<int>{0}));
  EXPECT_EQ(p.corrupted.count(), 1);
}

TEST(Pairs, SuiteShape) {
  const auto suite = make_pair_suite(0);
  ASSERT_EQ(suite.size(), 24u);
  EXPECT_EQ(suite[0].name, "canonical");
  EXPECT_EQ(suite[0].clean.count(), 2);
  EXPECT_EQ(suite[0].corrupted.count(), 1);
  EXPECT_EQ(suite[0].clean.objects[1].kind, K::kRect1x3);
  EXPECT_EQ(suite[1].name, "appA-3obj-c1");
  EXPECT_EQ(suite[1].corrupted.count(), 1);
  EXPECT_EQ(suite[2].name, "appA-3obj-c2");
  EXPECT_EQ(suite[2].corrupted.count(), 2);
  EXPECT_EQ(suite[1].clean, suite[2].clean);
  EXPECT_EQ(suite[3].name, "appA-4obj");
  EXPECT_EQ(suite[3].clean.count(), 4);
  EXPECT_EQ(suite[3].corrupted.count(), 1);
  std::set<std::string> names;
  for (std::size_t i = 4; i < suite.size(); ++i) {
    const auto& p = suite[i];
    names.insert(p.name);
    EXPECT_GE(p.clean.count(), 2);
    EXPECT_GE(p.corrupted.count(), 1);
    EXPECT_LT(p.corrupted.count(), p.clean.count());
    EXPECT_NO_THROW(p.corrupted.validate());
  }
  EXPECT_EQ(names.size(), 20u);
  EXPECT_TRUE(names.count("rand-01") && names.count("rand-20"));
  EXPECT_EQ(make_pair_suite(0), suite);
}

TEST(Pairs, JsonRoundTrip) {
  TempDir dir("pairs");
  const auto suite = make_pair_suite(9);
  save_pair_suite(suite, dir / "pairs.json");
  EXPECT_EQ(load_pair_suite(dir / "pairs.json"), suite);
}

}  // namespace
}  // namespace patchlens
