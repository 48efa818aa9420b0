#include "patchlens/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "patchlens/adam.hpp"
#include "patchlens/error.hpp"
#include "patchlens/ops.hpp"
#include "patchlens/rng.hpp"

namespace patchlens {

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid train config: " + what); };
  if (!(lr > 0.0)) fail("lr must be positive");
  if (batch_size <= 0) fail("batch_size must be positive");
  if (max_epochs <= 0) fail("max_epochs must be positive");
  if (early_stop_patience < 0) fail("early_stop_patience must be >= 0");
  if (checkpoint_every < 0) fail("checkpoint_every must be >= 0");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"early_stop_patience", c.early_stop_patience},
          {"seed", c.seed},
          {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("train config must be an object");
  TrainConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "lr") c.lr = value.get<double>();
      else if (key == "batch_size") c.batch_size = value.get<int>();
      else if (key == "max_epochs") c.max_epochs = value.get<int>();
      else if (key == "early_stop_patience") c.early_stop_patience = value.get<int>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "checkpoint_every") c.checkpoint_every = value.get<int>();
      else throw ConfigError("unknown train config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train config key '" + key + "': " + e.what());
    }
  }
  return c;
}

std::optional<int> TrainReport::first_perfect_epoch() const {
  for (const auto& e : epochs) {
    if (e.test_acc == 1.0) return e.epoch;
  }
  return std::nullopt;
}

std::string TrainReport::to_csv() const {
  std::ostringstream os;
  os << "epoch,train_loss,train_acc,test_acc\n";
  char buf[128];
  for (const auto& e : epochs) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", e.epoch, e.train_loss, e.train_acc, e.test_acc);
    os << buf;
  }
  return os.str();
}

namespace {

constexpr std::size_t kEvalBatch = 128;

std::vector<int> argmax_counts(const Tensor<float>& logits) {
  const std::size_t rows = logits.dim(0);
  const std::size_t classes = logits.dim(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    out[r] = predicted_count<float>(logits.data().subspan(r * classes, classes));
  }
  return out;
}

}  // namespace

std::vector<int> predict(const ViTParams<float>& params, std::span<const Example> examples) {
  NoGradGuard no_grad;
  std::vector<int> out;
  out.reserve(examples.size());
  std::vector<const Image*> images;
  for (std::size_t start = 0; start < examples.size(); start += kEvalBatch) {
    const std::size_t n = std::min(kEvalBatch, examples.size() - start);
    images.clear();
    for (std::size_t i = 0; i < n; ++i) images.push_back(&examples[start + i].image);
    const auto logits = forward_batch(params, stack_patches<float>(images, params.config), n);
    const auto counts = argmax_counts(logits);
    out.insert(out.end(), counts.begin(), counts.end());
  }
  return out;
}

double evaluate(const ViTParams<float>& params, std::span<const Example> examples) {
  if (examples.empty()) throw InputError("evaluate: empty split");
  const auto counts = predict(params, examples);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) correct += counts[i] == examples[i].label;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

TrainResult train(const ViTConfig& model, const TrainConfig& config, const LabeledDataset& dataset,
                  const std::optional<LoadedCheckpoint>& resume, const EpochCallback& on_epoch) {
  model.validate();
  config.validate();
  if (dataset.train.empty()) throw InputError("train: empty train split");
  for (const auto* split : {&dataset.train, &dataset.test}) {
    for (const auto& ex : *split) {
      if (ex.label < kMinCount || ex.label > kMaxCount) {
        throw InputError("train: label " + std::to_string(ex.label) + " outside [1, 10]");
      }
    }
  }

  TrainResult result;
  if (resume) {
    if (!resume->params.config.same_architecture(model)) {
      throw ConfigError("train: resume checkpoint was trained with a different model config");
    }
    result.params = resume->params.clone();
    if (resume->training) {
      result.state = *resume->training;
    } else {
      result.state.adam = AdamState<float>::for_params(result.params.list());
    }
  } else {
    result.params = init_params<float>(model);
    result.state.adam = AdamState<float>::for_params(result.params.list());
  }
  result.report.epochs = result.state.history;

  auto params_list = result.params.list();
  const AdamOptions adam{config.lr};
  const std::size_t n_train = dataset.train.size();
  const std::size_t batch = std::min<std::size_t>(static_cast<std::size_t>(config.batch_size), n_train);

  auto save = [&]() {
    if (config.checkpoint_path.empty()) return;
    result.state.history = result.report.epochs;
    save_checkpoint(result.params, config.checkpoint_path, &result.state);
  };

  int perfect_streak = 0;
  for (const auto& e : result.report.epochs) perfect_streak = e.test_acc == 1.0 ? perfect_streak + 1 : 0;

  std::vector<std::size_t> order(n_train);
  std::vector<const Image*> images;
  std::vector<int> labels;
  for (int epoch = result.state.epoch + 1; epoch <= config.max_epochs; ++epoch) {
    if (config.early_stop_patience > 0 && perfect_streak >= config.early_stop_patience) break;
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, 0x5F1E, static_cast<std::uint64_t>(epoch)));
    shuffle(std::span<std::size_t>(order), rng);

    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < n_train; start += batch) {
      const std::size_t n = std::min(batch, n_train - start);
      images.clear();
      labels.clear();
      for (std::size_t i = 0; i < n; ++i) {
        const auto& ex = dataset.train[order[start + i]];
        images.push_back(&ex.image);
        labels.push_back(ex.label - 1);
      }
      for (auto& p : params_list) p.zero_grad();
      const auto logits = forward_batch(result.params, stack_patches<float>(images, model), n);
      const auto loss = cross_entropy(logits, labels);
      const double loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch) +
                            " (non-finite loss)" +
                            (config.checkpoint_path.empty()
                                 ? std::string()
                                 : "; last good checkpoint kept at " + config.checkpoint_path.string()));
      }
      backward(loss);
      adam_step<float>(params_list, result.state.adam, adam);
      loss_sum += loss_value * static_cast<double>(n);
      const auto counts = argmax_counts(logits);
      for (std::size_t i = 0; i < n; ++i) correct += counts[i] == labels[i] + 1;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = loss_sum / static_cast<double>(n_train);
    stats.train_acc = static_cast<double>(correct) / static_cast<double>(n_train);
    stats.test_acc = dataset.test.empty() ? 0.0 : evaluate(result.params, dataset.test);
    result.report.epochs.push_back(stats);
    result.state.epoch = epoch;
    perfect_streak = stats.test_acc == 1.0 ? perfect_streak + 1 : 0;
    if (on_epoch) on_epoch(stats);
    if (config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) save();
  }
  for (auto& p : params_list) p.zero_grad();
  result.state.history = result.report.epochs;
  save();
  return result;
}

}  // namespace patchlens
