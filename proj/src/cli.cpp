#include "patchlens/cli.hpp"

#include <CLI11.hpp>
#include <chrono>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>

#include "patchlens/checkpoint.hpp"
#include "patchlens/dataset_io.hpp"
#include "patchlens/error.hpp"
#include "patchlens/patching.hpp"
#include "patchlens/probing.hpp"
#include "patchlens/report.hpp"
#include "patchlens/run_config.hpp"
#include "patchlens/trainer.hpp"

namespace patchlens {

namespace {

namespace fs = std::filesystem;

// Flag values captured by CLI11; unset flags leave the config file alone.
struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> data;
  std::optional<std::string> checkpoint;
  std::optional<std::string> resume;
  std::optional<std::string> suite;
  std::optional<int> images_per_count;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
  std::optional<int> probe_epochs;
  std::optional<std::string> patch_dir;
  std::optional<std::string> probe_dir;
  bool shuffle_labels = false;
};

// Timestamped lines go only to <dir>/patchlens.log so every other output stays
// reproducible.
class RunLog {
 public:
  RunLog(const fs::path& dir, std::ostream& echo) : echo_(echo) {
    fs::create_directories(dir);
    file_.open(dir / "patchlens.log", std::ios::app);
  }
  void line(const std::string& text) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    if (file_) file_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << text << '\n' << std::flush;
    echo_ << text << '\n';
  }

 private:
  std::ofstream file_;
  std::ostream& echo_;
};

using DefaultOut = fs::path (*)(const RunConfig&);

RunConfig resolve_config(const Overrides& o, DefaultOut default_out) {
  RunConfig c = o.config_path.empty() ? RunConfig{} : load_run_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.data) c.data_dir = *o.data;
  if (o.checkpoint) c.checkpoint = *o.checkpoint;
  if (o.suite) c.suite = *o.suite;
  if (o.images_per_count) c.data.images_per_count = *o.images_per_count;
  if (o.epochs) c.train.max_epochs = *o.epochs;
  if (o.batch_size) c.train.batch_size = *o.batch_size;
  if (o.lr) c.train.lr = *o.lr;
  if (o.probe_epochs) c.probe.epochs = *o.probe_epochs;
  if (o.patch_dir) c.patch_dir = *o.patch_dir;
  if (o.probe_dir) c.probe_dir = *o.probe_dir;
  if (o.shuffle_labels) c.shuffle_labels = true;
  if (o.out) c.out = *o.out;
  else if (c.out.empty()) c.out = default_out(c);
  c.resolve();
  return c;
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

void cmd_gen_data(const RunConfig& c, std::ostream& out) {
  const auto ds = generate_dataset(c.data, *c.data_seed);
  const auto pairs = make_pair_suite(*c.data_seed, c.data.grid_side());
  RunLog log(c.out, out);
  save_dataset(ds, c.out);
  save_pair_suite(pairs, c.out / "pairs.json");
  write_run_config(c, c.out);
  log.line("gen-data: " + std::to_string(ds.train.size()) + " train and " + std::to_string(ds.test.size()) +
           " test images, " + std::to_string(pairs.size()) + " pairs -> " + c.out.string());
}

void cmd_train(const RunConfig& c, const std::optional<std::string>& resume_path, std::ostream& out) {
  const auto ds = load_dataset(c.data_dir);
  if (!(ds.config == c.data)) {
    throw ConfigError("dataset at " + c.data_dir.string() + " was generated with a different data config");
  }
  std::optional<LoadedCheckpoint> resume;
  if (resume_path) resume = load_checkpoint(*resume_path, c.model);
  TrainConfig tc = c.train;
  tc.checkpoint_path = c.out / "model.ckpt";
  RunLog log(c.out, out);
  write_run_config(c, c.out);
  const auto result = train(c.model, tc, ds, resume, [&](const EpochStats& s) {
    log.line("epoch " + std::to_string(s.epoch) + " loss " + fixed(s.train_loss, 4) + " train_acc " +
             fixed(s.train_acc, 4) + " test_acc " + fixed(s.test_acc, 4));
  });
  write_text_file(c.out / "train_report.csv", result.report.to_csv());
  const double acc = result.report.epochs.empty() ? evaluate(result.params, ds.test)
                                                  : result.report.epochs.back().test_acc;
  log.line("final test accuracy " + fixed(acc, 4) + " after " + std::to_string(result.state.epoch) +
           " epochs -> " + tc.checkpoint_path.string());
}

void cmd_patch(const RunConfig& c, std::ostream& out) {
  const auto ckpt = load_checkpoint(c.checkpoint, c.model);
  const auto pairs = load_pair_suite(c.data_dir / "pairs.json");
  const auto specs = select_experiments(c.suite, pairs, c.model.n_tokens());
  RunLog log(c.out, out);
  std::vector<LogitDiffCurve> curves;
  for (const auto& spec : specs) curves.push_back(run_experiment(ckpt.params, spec));
  sweep_report(curves, c.out);
  write_run_config(c, c.out);
  log.line("patch: " + std::to_string(curves.size()) + " experiments (suite '" + c.suite + "') -> " +
           c.out.string());
}

void cmd_probe(const RunConfig& c, std::ostream& out) {
  const auto ckpt = load_checkpoint(c.checkpoint, c.model);
  const auto ds = load_dataset(c.data_dir);
  RunLog log(c.out, out);
  const auto report = probe_sweep(ckpt.params, ds, *c.probe_seed, c.probe, c.shuffle_labels);
  write_text_file(c.out / "probe_report.csv", report.to_csv());
  write_run_config(c, c.out);
  std::string crossings;
  for (auto cat : kAllCategories) {
    crossings += " " + to_string(cat) + "=" + std::to_string(report.first_layer_above(cat, kProbeThreshold));
  }
  log.line("probe: " + std::to_string(report.cells.size()) + " cells, first layer above 0.9:" + crossings);
}

void cmd_report(const RunConfig& c, std::ostream& out) {
  const auto files = write_report(c.patch_dir, c.probe_dir, c.out);
  write_run_config(c, c.out);
  out << files.summary_txt;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"patchlens: activation patching and probing for a counting ViT", "patchlens"};
  app.require_subcommand(1);
  Overrides o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "JSON run config")->check(CLI::ExistingFile);
    sub->add_option("--seed", o.seed, "Base seed for every stage");
    sub->add_option("--out", o.out, "Output directory");
  };
  auto* gen = app.add_subcommand("gen-data", "Generate the counting dataset and patching pairs");
  common(gen);
  gen->add_option("--images-per-count", o.images_per_count, "Images per count class");

  auto* tr = app.add_subcommand("train", "Train the ViT");
  common(tr);
  tr->add_option("--data", o.data, "Dataset directory");
  tr->add_option("--resume", o.resume, "Checkpoint to continue from")->check(CLI::ExistingFile);
  tr->add_option("--epochs", o.epochs, "Maximum epoch number");
  tr->add_option("--batch-size", o.batch_size, "Mini-batch size");
  tr->add_option("--lr", o.lr, "Adam learning rate");

  auto* pa = app.add_subcommand("patch", "Run an activation patching sweep");
  common(pa);
  pa->add_option("--data", o.data, "Dataset directory holding pairs.json");
  pa->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  pa->add_option("--suite", o.suite, "std, appA, rand, identity-check, all, a name, or prefix*");

  auto* pr = app.add_subcommand("probe", "Run the linear probe grid");
  common(pr);
  pr->add_option("--data", o.data, "Dataset directory");
  pr->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
  pr->add_option("--probe-epochs", o.probe_epochs, "Full-batch Adam steps per probe");
  pr->add_flag("--shuffle-labels", o.shuffle_labels, "Fit on permuted train labels (control)");

  auto* re = app.add_subcommand("report", "Summarize patching and probing results");
  common(re);
  re->add_option("--patch", o.patch_dir, "Directory with patch_results.csv");
  re->add_option("--probe", o.probe_dir, "Directory with probe_report.csv");

  // CLI11 consumes a reversed argument vector without the program name.
  std::vector<std::string> rest(args.rbegin(), args.rend());
  if (!rest.empty()) rest.pop_back();
  try {
    app.parse(rest);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "patchlens: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (gen->parsed()) {
      cmd_gen_data(resolve_config(o, [](const RunConfig& c) { return c.data_dir; }), out);
    } else if (tr->parsed()) {
      cmd_train(resolve_config(o, [](const RunConfig& c) { return c.checkpoint.parent_path(); }), o.resume, out);
    } else if (pa->parsed()) {
      cmd_patch(resolve_config(o, [](const RunConfig& c) { return c.patch_dir; }), out);
    } else if (pr->parsed()) {
      cmd_probe(resolve_config(o, [](const RunConfig& c) { return c.probe_dir; }), out);
    } else if (re->parsed()) {
      cmd_report(resolve_config(o, [](const RunConfig&) { return fs::path("runs/report"); }), out);
    }
  } catch (const ConfigError& e) {
    err << "patchlens: config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "patchlens: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace patchlens
