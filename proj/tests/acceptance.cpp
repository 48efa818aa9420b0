// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and exits
// nonzero if any selected criterion fails. Trained models are cached under
// --work so a rerun only repeats the cheap checks.

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "patchlens/checkpoint.hpp"
#include "patchlens/dataset.hpp"
#include "patchlens/dataset_io.hpp"
#include "patchlens/ops.hpp"
#include "patchlens/patching.hpp"
#include "patchlens/probing.hpp"
#include "patchlens/report.hpp"
#include "patchlens/runtime.hpp"
#include "patchlens/trainer.hpp"
#include "patchlens/vit.hpp"

namespace fs = std::filesystem;
using namespace patchlens;

namespace {

struct Outcome {
  bool pass = false;
  std::string details;
};

std::string fmt(const char* format, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, a);
  return buf;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_bits(std::span<const float> a, std::span<const float> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

// Boundaries 0..n_layers split into thirds: 0 = early, 1 = middle, 2 = final.
int third(int layer, int n_layers) { return std::min(2, 3 * layer / n_layers); }

// ---------------------------------------------------------------------------
// 1. Gradients of the full model against central differences in double.

Outcome check_gradients() {
  const ViTConfig config;
  auto params = init_params<float>(config).cast<double>();
  auto tensors = params.list();
  // Spread the weights beyond the 0.02 init so attention is far from uniform
  // and every coordinate carries a gradient well above rounding noise.
  Rng rng(11);
  for (auto& t : tensors)
    for (auto& v : t.mutable_data()) v += 0.05 * standard_normal(rng);

  const auto data = generate_dataset([] {
    DatasetConfig d;
    d.images_per_count = 4;
    return d;
  }(), 1);
  const Image* imgs[] = {&data.train[2].image, &data.train[20].image};
  const std::vector<int> targets{data.train[2].label - 1, data.train[20].label - 1};
  const auto patches = stack_patches<double>(imgs, config);
  auto loss = [&] { return cross_entropy(forward_batch(params, patches, 2), targets).item(); };

  for (auto& t : tensors) t.zero_grad();
  backward(cross_entropy(forward_batch(params, patches, 2), targets));

  // One coordinate in every parameter tensor, then random extras.
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < tensors.size(); ++i) coords.emplace_back(i, uniform_index(rng, tensors[i].numel()));
  while (coords.size() < tensors.size() + 56) {
    const auto i = static_cast<std::size_t>(uniform_index(rng, tensors.size()));
    coords.emplace_back(i, uniform_index(rng, tensors[i].numel()));
  }

  const double h = 1e-5;
  // Derivatives below this are compared on an absolute scale; the central
  // difference of an O(1) loss carries about 1e-11 of rounding error.
  const double floor = 1e-7;
  double worst = 0.0;
  std::string worst_name;
  const auto named = params.named();
  for (const auto& [ti, j] : coords) {
    auto values = tensors[ti].mutable_data();
    const double saved = values[j];
    values[j] = saved + h;
    const double up = loss();
    values[j] = saved - h;
    const double down = loss();
    values[j] = saved;
    const double numeric = (up - down) / (2 * h);
    const double analytic = tensors[ti].grad()[j];
    const double err = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), floor});
    if (err > worst) {
      worst = err;
      worst_name = named[ti].first + "[" + std::to_string(j) + "]";
    }
  }
  return {worst < 1e-3, std::to_string(coords.size()) + " coordinates, max rel err " + fmt("%.2e", worst) +
                            " at " + worst_name};
}

// ---------------------------------------------------------------------------
// 2. Self-sourced patches leave the logits bit-identical.

Outcome check_identity_patches() {
  const ViTConfig config;
  const auto params = init_params<float>(config);
  const auto data = generate_dataset(DatasetConfig{}, 2);
  Rng rng(21);
  const int plans = 1000;
  const std::size_t images = 50;
  int mismatches = 0;
  for (std::size_t k = 0; k < images; ++k) {
    const auto& img = data.test[uniform_index(rng, data.test.size())].image;
    auto run = forward(params, img, true);
    const auto cache = std::make_shared<const ActivationCache<float>>(std::move(*run.cache));
    for (int p = 0; p < plans / int(images); ++p) {
      const int layer = int(uniform_index(rng, config.n_layers + 1));
      std::vector<int> tokens;
      for (int t = 0; t < config.n_tokens(); ++t)
        if (uniform01(rng) < 0.3) tokens.push_back(t);
      if (tokens.empty()) tokens.push_back(int(uniform_index(rng, config.n_tokens())));
      const auto plan = PatchPlan<float>::single_layer(layer, tokens, cache);
      const auto patched = forward_patched(params, img, plan, false);
      if (!same_bits(patched.logits.data(), run.logits.data())) ++mismatches;
    }
  }
  return {mismatches == 0, std::to_string(plans) + " plans, " + std::to_string(mismatches) + " not bit-identical"};
}

// ---------------------------------------------------------------------------
// 3. Transplanting every token reproduces the source logits.

Outcome check_full_transplant() {
  const ViTConfig config;
  const auto params = init_params<float>(config);
  const auto data = generate_dataset(DatasetConfig{}, 3);
  Rng rng(31);
  std::vector<int> all(config.n_tokens());
  std::iota(all.begin(), all.end(), 0);
  double worst = 0.0;
  int cells = 0;
  for (int pair = 0; pair < 50; ++pair) {
    const auto& src = data.test[uniform_index(rng, data.test.size())].image;
    const auto& tgt = data.test[uniform_index(rng, data.test.size())].image;
    auto run = forward(params, src, true);
    const auto cache = std::make_shared<const ActivationCache<float>>(std::move(*run.cache));
    const auto want = run.logits.data();
    for (int layer = 0; layer <= config.n_layers; ++layer) {
      const auto got = forward_patched(params, tgt, PatchPlan<float>::single_layer(layer, all, cache), false);
      const auto g = got.logits.data();
      for (std::size_t k = 0; k < g.size(); ++k) worst = std::max(worst, double(std::abs(g[k] - want[k])));
      ++cells;
    }
  }
  return {worst <= 1e-5, std::to_string(cells) + " (pair, layer) cells, max abs diff " + fmt("%.2e", worst)};
}

// ---------------------------------------------------------------------------
// 4. Generated images are valid and regeneration is byte-identical.

Outcome check_dataset(const fs::path& work) {
  const auto start = std::chrono::steady_clock::now();
  const DatasetConfig config;
  const auto data = generate_dataset(config, 4);
  int bad = 0, total = 0;
  for (const auto* split : {&data.train, &data.test}) {
    for (const auto& ex : *split) {
      ++total;
      bool ok = is_patch_aligned(ex.image, config.patch_px) && ex.image == render(ex.scene, config.patch_px);
      try {
        ex.scene.validate();
        ok = ok && count_oracle(ex.image, config.patch_px) == ex.label && ex.scene.count() == ex.label;
      } catch (const std::exception&) {
        ok = false;
      }
      bad += !ok;
    }
  }
  const fs::path a = work / "dataset-a", b = work / "dataset-b";
  fs::remove_all(a);
  fs::remove_all(b);
  save_dataset(data, a);
  save_dataset(generate_dataset(config, 4), b);
  bool identical = true;
  for (const char* f : {"manifest.json", "images.bin"}) identical = identical && file_bytes(a / f) == file_bytes(b / f);
  fs::remove_all(a);
  fs::remove_all(b);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return {total == 1000 && bad == 0 && identical && secs < 60,
          std::to_string(total - bad) + "/" + std::to_string(total) + " images valid, regeneration " +
              (identical ? "byte-identical" : "DIFFERS") + ", " + fmt("%.1f s", secs)};
}

// ---------------------------------------------------------------------------
// 5-7. Trained models, cached by architecture, optimizer settings and seed.

struct TrainedModel {
  ViTParams<float> params;
  TrainReport report;
  double test_accuracy = 0.0;
};

const LabeledDataset& standard_dataset() {
  static const LabeledDataset data = generate_dataset(DatasetConfig{}, 0);
  return data;
}

TrainedModel trained_model(const fs::path& work, std::uint64_t seed) {
  ViTConfig model;
  model.seed = seed;
  TrainConfig train_config;
  train_config.seed = seed;
  train_config.checkpoint_every = 1;
  const fs::path dir = work / ("train-" + config_hash(model) + "-lr" + fmt("%g", train_config.lr) + "-bs" +
                               std::to_string(train_config.batch_size) + "-e" +
                               std::to_string(train_config.max_epochs) + "-s" + std::to_string(seed));
  fs::create_directories(dir);
  train_config.checkpoint_path = dir / "model.ckpt";

  std::optional<LoadedCheckpoint> resume;
  if (fs::exists(train_config.checkpoint_path)) {
    resume = load_checkpoint(train_config.checkpoint_path, model);
    std::cerr << "  seed " << seed << ": resuming after epoch " << (resume->training ? resume->training->epoch : 0)
              << "\n";
  }
  const auto start = std::chrono::steady_clock::now();
  auto result = train(model, train_config, standard_dataset(), resume, [&](const EpochStats& s) {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::cerr << "  seed " << seed << " epoch " << s.epoch << " loss " << fmt("%.4f", s.train_loss) << " train "
              << fmt("%.3f", s.train_acc) << " test " << fmt("%.3f", s.test_acc) << " (" << fmt("%.0f s", secs)
              << ")\n";
  });
  write_text_file(dir / "train_report.csv", result.report.to_csv());
  TrainedModel out{std::move(result.params), std::move(result.report), 0.0};
  out.test_accuracy = evaluate(out.params, standard_dataset().test);
  return out;
}

Outcome check_training(const TrainedModel& m) {
  const auto& last = m.report.epochs.back();
  std::string details = "test accuracy " + fmt("%.3f", m.test_accuracy) + " after " + std::to_string(last.epoch) +
                        " epochs (train accuracy " + fmt("%.3f", last.train_acc) + ", loss " +
                        fmt("%.4f", last.train_loss) + ")";
  return {m.test_accuracy >= 0.99, details};
}

std::pair<double, double> range_of(const ProbeReport& r) {
  double lo = 1.0, hi = 0.0;
  for (const auto& c : r.cells) {
    lo = std::min(lo, c.test_accuracy);
    hi = std::max(hi, c.test_accuracy);
  }
  return {lo, hi};
}

Outcome check_probes(const fs::path& work, const TrainedModel& m) {
  const auto start = std::chrono::steady_clock::now();
  const auto& data = standard_dataset();
  const auto trained = probe_sweep(m.params, data, 0);
  const auto untrained = probe_sweep(init_params<float>(m.params.config), data, 0);
  const auto shuffled = probe_sweep(m.params, data, 0, {}, true);
  write_text_file(work / "probe_trained.csv", trained.to_csv());
  write_text_file(work / "probe_untrained.csv", untrained.to_csv());
  write_text_file(work / "probe_shuffled.csv", shuffled.to_csv());
  const double cls = trained.accuracy(m.params.config.n_layers, TokenCategory::kCls);
  const auto [u_lo, u_hi] = range_of(untrained);
  const auto [s_lo, s_hi] = range_of(shuffled);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool pass = cls >= 0.99 && u_lo >= 0.03 && u_hi <= 0.25 && s_lo >= 0.02 && s_hi <= 0.22;
  return {pass, "final CLS probe " + fmt("%.3f", cls) + ", untrained [" + fmt("%.3f", u_lo) + ", " +
                    fmt("%.3f", u_hi) + "], shuffled [" + fmt("%.3f", s_lo) + ", " + fmt("%.3f", s_hi) + "], " +
                    fmt("%.0f s", secs) + " for three grids"};
}

// The four dissociation conditions for one trained model.
Outcome dissociation(const fs::path& dir, const TrainedModel& m, std::uint64_t seed) {
  const int n = m.params.config.n_layers;
  const auto pairs = make_pair_suite(0);
  std::vector<LogitDiffCurve> curves;
  for (const auto& spec : select_experiments("std", pairs, m.params.config.n_tokens()))
    curves.push_back(run_experiment(m.params, spec));
  const auto probes = probe_sweep(m.params, standard_dataset(), seed);
  fs::create_directories(dir / "patch");
  fs::create_directories(dir / "probe");
  sweep_report(curves, dir / "patch");
  write_text_file(dir / "probe" / "probe_report.csv", probes.to_csv());
  write_report(dir / "patch", dir / "probe", dir / "report");

  auto flips = [&](int exp) { return curves[exp - 1].flip_layers().value_or(std::vector<int>{}); };
  auto in_third = [&](const std::vector<int>& layers, int t) {
    return std::any_of(layers.begin(), layers.end(), [&](int l) { return third(l, n) == t; });
  };
  auto only_third = [&](const std::vector<int>& layers, int t) {
    return !layers.empty() && std::all_of(layers.begin(), layers.end(), [&](int l) { return third(l, n) == t; });
  };

  const auto f1 = flips(1);
  const bool a = in_third(f1, 0) && !in_third(f1, 2);

  const auto f5 = flips(5), f6 = flips(6);
  const bool b = only_third(f5, 2) && only_third(f6, 2);

  std::vector<int> cls_flips = f5;
  cls_flips.insert(cls_flips.end(), f6.begin(), f6.end());
  const int cls_probe = probes.first_layer_above(TokenCategory::kCls, kProbeThreshold);
  const bool c = !cls_flips.empty() && cls_probe >= 0 &&
                 cls_probe < *std::min_element(cls_flips.begin(), cls_flips.end());

  std::vector<int> obj_above;
  for (int l = 0; l <= n; ++l)
    if (probes.accuracy(l, TokenCategory::kObjectPatch) > kProbeThreshold) obj_above.push_back(l);
  auto f34 = flips(3);
  const auto f4 = flips(4);
  f34.insert(f34.end(), f4.begin(), f4.end());
  const bool d = only_third(obj_above, 2) && in_third(f34, 1);

  auto layers = [](std::vector<int> v) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return format_layer_ranges(v);
  };
  std::ostringstream s;
  s << "seed " << seed << ": a=" << a << " b=" << b << " c=" << c << " d=" << d << " | exp1 flips " << layers(f1)
    << "; exp5 " << layers(f5) << "; exp6 " << layers(f6) << "; exp3/4 " << layers(f34) << "; CLS probe >0.9 from "
    << cls_probe << "; object probe >0.9 at " << layers(obj_above);
  return {a && b && c && d, s.str()};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"patchlens acceptance run"};
  fs::path work = "acceptance_work";
  std::vector<int> only;
  int seeds = 3;
  app.add_option("--work", work, "Directory for cached models and outputs");
  app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 8));
  app.add_option("--seeds", seeds, "Training seeds for the dissociation criterion")->check(CLI::Range(1, 10));
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8}
                                              : std::set<int>(only.begin(), only.end());
  const std::map<int, std::string> names{{1, "gradient correctness"},   {2, "identity-patch invariance"},
                                         {3, "full-transplant equivalence"}, {4, "dataset validity"},
                                         {5, "training accuracy"},      {6, "probe sanity"},
                                         {7, "dissociation over seeds"}, {8, "checkpoint round trip"}};

  std::vector<std::string> lines;
  bool all_pass = true;
  auto record = [&](int id, const std::function<Outcome()>& run) {
    if (!selected.count(id)) return;
    std::cerr << "criterion " << id << ": " << names.at(id) << "\n";
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const std::string line = std::string(o.pass ? "[PASS] " : "[FAIL] ") + std::to_string(id) + " " +
                             names.at(id) + ": " + o.details + " (" + fmt("%.1f s", secs) + ")";
    std::cout << line << std::endl;
    lines.push_back(line);
    all_pass = all_pass && o.pass;
  };

  record(1, check_gradients);
  record(2, check_identity_patches);
  record(3, check_full_transplant);
  record(4, [&] { return check_dataset(work); });

  std::map<std::uint64_t, TrainedModel> models;
  auto model = [&](std::uint64_t seed) -> const TrainedModel& {
    auto it = models.find(seed);
    if (it == models.end()) it = models.emplace(seed, trained_model(work, seed)).first;
    return it->second;
  };
  record(5, [&] { return check_training(model(0)); });
  record(6, [&] { return check_probes(work, model(0)); });
  record(7, [&] {
    int passing = 0;
    std::string details;
    for (int s = 0; s < seeds; ++s) {
      const auto o = dissociation(work / ("seed-" + std::to_string(s)), model(std::uint64_t(s)), std::uint64_t(s));
      std::cerr << "  " << o.details << "\n";
      passing += o.pass;
      details += (details.empty() ? "" : " || ") + o.details;
    }
    return Outcome{seeds >= 3 && passing >= 2,
                   std::to_string(passing) + "/" + std::to_string(seeds) + " seeds show all four; " + details};
  });
  record(8, [&] {
    Rng rng(81);
    int bad = 0;
    const fs::path dir = work / "ckpt-roundtrip";
    fs::create_directories(dir);
    for (int i = 0; i < 10; ++i) {
      ViTConfig c;
      c.patch_px = std::array{2, 4, 8}[uniform_index(rng, 3)];
      c.image_px = c.patch_px * int(2 + uniform_index(rng, 7));
      c.n_layers = int(1 + uniform_index(rng, 12));
      c.n_heads = int(1 + uniform_index(rng, 4));
      c.d_model = c.n_heads * 8 * int(1 + uniform_index(rng, 4));
      c.d_mlp = c.d_model * int(1 + uniform_index(rng, 4));
      c.seed = rng();
      auto params = init_params<float>(c);
      for (auto& t : params.list())
        for (auto& v : t.mutable_data()) v += float(0.1 * standard_normal(rng));
      TrainingState st;
      st.epoch = i;
      st.adam = AdamState<float>::for_params(params.list());
      st.adam.t = i * 7;
      const fs::path path = dir / ("m" + std::to_string(i) + ".ckpt");
      save_checkpoint(params, path, i % 2 ? &st : nullptr);
      const auto loaded = load_checkpoint(path, c);

      bool ok = loaded.params.config == c && bool(loaded.training) == bool(i % 2);
      const auto a = params.named(), b = loaded.params.named();
      ok = ok && a.size() == b.size();
      for (std::size_t k = 0; ok && k < a.size(); ++k)
        ok = a[k].first == b[k].first && a[k].second.shape() == b[k].second.shape() &&
             same_bits(a[k].second.data(), b[k].second.data());
      auto img = Image::blank(std::size_t(c.image_px));
      for (auto& v : img.pixels) v = float(uniform01(rng) < 0.2);
      const auto la = forward(params, img, false).logits, lb = forward(loaded.params, img, false).logits;
      ok = ok && same_bits(la.data(), lb.data());
      save_checkpoint(loaded.params, dir / "again.ckpt", loaded.training ? &*loaded.training : nullptr);
      ok = ok && file_bytes(path) == file_bytes(dir / "again.ckpt");
      bad += !ok;
    }
    fs::remove_all(dir);
    return Outcome{bad == 0, "10 random checkpoints, " + std::to_string(bad) + " mismatched"};
  });

  std::cout << "\nsummary:\n";
  for (const auto& l : lines) std::cout << "  " << l.substr(0, l.find(':')) << "\n";
  return all_pass ? 0 : 1;
}
