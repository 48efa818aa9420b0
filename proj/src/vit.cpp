#include "patchlens/vit.hpp"

#include <algorithm>
#include <set>

#include "patchlens/error.hpp"
#include "patchlens/ops.hpp"
#include "patchlens/rng.hpp"

namespace patchlens {

void ViTConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (image_px <= 0) fail("image_px must be positive");
  if (patch_px <= 0) fail("patch_px must be positive");
  if (image_px % patch_px != 0) {
    fail("patch_px " + std::to_string(patch_px) + " does not divide image_px " +
         std::to_string(image_px));
  }
  if (n_layers <= 0) fail("n_layers must be positive");
  if (n_heads <= 0) fail("n_heads must be positive");
  if (d_model <= 0) fail("d_model must be positive");
  if (d_model % n_heads != 0) {
    fail("d_model " + std::to_string(d_model) + " is not divisible by n_heads " +
         std::to_string(n_heads));
  }
  if (d_mlp <= 0) fail("d_mlp must be positive");
  if (n_classes != kNumClasses) fail("n_classes must be " + std::to_string(kNumClasses));
}

bool ViTConfig::same_architecture(const ViTConfig& other) const {
  return image_px == other.image_px && patch_px == other.patch_px && n_layers == other.n_layers &&
         n_heads == other.n_heads && d_model == other.d_model && d_mlp == other.d_mlp &&
         n_classes == other.n_classes;
}

nlohmann::json to_json(const ViTConfig& c) {
  return {{"image_px", c.image_px}, {"patch_px", c.patch_px}, {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},   {"d_model", c.d_model},   {"d_mlp", c.d_mlp},
          {"n_classes", c.n_classes}, {"seed", c.seed}};
}

ViTConfig vit_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ViTConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "image_px") c.image_px = value.get<int>();
      else if (key == "patch_px") c.patch_px = value.get<int>();
      else if (key == "n_layers") c.n_layers = value.get<int>();
      else if (key == "n_heads") c.n_heads = value.get<int>();
      else if (key == "d_model") c.d_model = value.get<int>();
      else if (key == "d_mlp") c.d_mlp = value.get<int>();
      else if (key == "n_classes") c.n_classes = value.get<int>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw ConfigError("unknown model config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("model config key '" + key + "': " + e.what());
    }
  }
  return c;
}

namespace {

// Visits every parameter in canonical order.
template <typename P, typename F>
void for_each_param(P& params, F&& f) {
  f("patch.w", params.patch_w);
  f("patch.b", params.patch_b);
  f("cls", params.cls);
  f("pos", params.pos);
  for (std::size_t i = 0; i < params.blocks.size(); ++i) {
    auto& b = params.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    f(p + "ln1.gamma", b.ln1_gamma);
    f(p + "ln1.beta", b.ln1_beta);
    f(p + "attn.wq", b.wq);
    f(p + "attn.bq", b.bq);
    f(p + "attn.wk", b.wk);
    f(p + "attn.bk", b.bk);
    f(p + "attn.wv", b.wv);
    f(p + "attn.bv", b.bv);
    f(p + "attn.wo", b.wo);
    f(p + "attn.bo", b.bo);
    f(p + "ln2.gamma", b.ln2_gamma);
    f(p + "ln2.beta", b.ln2_beta);
    f(p + "mlp.w1", b.w1);
    f(p + "mlp.b1", b.b1);
    f(p + "mlp.w2", b.w2);
    f(p + "mlp.b2", b.b2);
  }
  f("lnf.gamma", params.lnf_gamma);
  f("lnf.beta", params.lnf_beta);
  f("head.w", params.head_w);
  f("head.b", params.head_b);
}

enum class InitKind { kNormal, kZeros, kOnes };

template <typename T>
Tensor<T> make_param(Shape shape, InitKind kind, Rng& rng) {
  Buffer<T> data(numel(shape));
  for (auto& x : data) {
    switch (kind) {
      case InitKind::kNormal: x = static_cast<T>(truncated_normal(rng, 0.02)); break;
      case InitKind::kZeros: x = T{0}; break;
      case InitKind::kOnes: x = T{1}; break;
    }
  }
  return Tensor<T>(std::move(shape), std::move(data), true);
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ViTParams<T>::named() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for_each_param(*this, [&](const std::string& name, const Tensor<T>& t) { out.emplace_back(name, t); });
  return out;
}

template <typename T>
std::vector<Tensor<T>> ViTParams<T>::list() const {
  std::vector<Tensor<T>> out;
  for_each_param(*this, [&](const std::string&, const Tensor<T>& t) { out.push_back(t); });
  return out;
}

template <typename T>
std::size_t ViTParams<T>::parameter_count() const {
  std::size_t n = 0;
  for_each_param(*this, [&](const std::string&, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
ViTParams<T> ViTParams<T>::clone() const {
  ViTParams<T> out = *this;
  for_each_param(out, [](const std::string&, Tensor<T>& t) {
    t = Tensor<T>(t.shape(), t.data(), true);
  });
  return out;
}

template <typename T>
template <typename U>
ViTParams<U> ViTParams<T>::cast() const {
  ViTParams<U> out;
  out.config = config;
  out.blocks.resize(blocks.size());
  const auto src = named();
  std::size_t i = 0;
  for_each_param(out, [&](const std::string&, Tensor<U>& t) {
    const auto& s = src[i++].second;
    std::vector<U> data(s.data().begin(), s.data().end());
    t = Tensor<U>(s.shape(), std::move(data), true);
  });
  return out;
}

template <typename T>
ViTParams<T> init_params(const ViTConfig& config) {
  config.validate();
  Rng rng(derive_seed(config.seed, 0x1417));
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto m = static_cast<std::size_t>(config.d_mlp);
  const auto c = static_cast<std::size_t>(config.n_classes);
  ViTParams<T> p;
  p.config = config;
  p.patch_w = make_param<T>({static_cast<std::size_t>(config.patch_dim()), d}, InitKind::kNormal, rng);
  p.patch_b = make_param<T>({d}, InitKind::kZeros, rng);
  p.cls = make_param<T>({d}, InitKind::kNormal, rng);
  p.pos = make_param<T>({static_cast<std::size_t>(config.n_tokens()), d}, InitKind::kNormal, rng);
  for (int l = 0; l < config.n_layers; ++l) {
    BlockParams<T> b;
    b.ln1_gamma = make_param<T>({d}, InitKind::kOnes, rng);
    b.ln1_beta = make_param<T>({d}, InitKind::kZeros, rng);
    b.wq = make_param<T>({d, d}, InitKind::kNormal, rng);
    b.bq = make_param<T>({d}, InitKind::kZeros, rng);
    b.wk = make_param<T>({d, d}, InitKind::kNormal, rng);
    b.bk = make_param<T>({d}, InitKind::kZeros, rng);
    b.wv = make_param<T>({d, d}, InitKind::kNormal, rng);
    b.bv = make_param<T>({d}, InitKind::kZeros, rng);
    b.wo = make_param<T>({d, d}, InitKind::kNormal, rng);
    b.bo = make_param<T>({d}, InitKind::kZeros, rng);
    b.ln2_gamma = make_param<T>({d}, InitKind::kOnes, rng);
    b.ln2_beta = make_param<T>({d}, InitKind::kZeros, rng);
    b.w1 = make_param<T>({d, m}, InitKind::kNormal, rng);
    b.b1 = make_param<T>({m}, InitKind::kZeros, rng);
    b.w2 = make_param<T>({m, d}, InitKind::kNormal, rng);
    b.b2 = make_param<T>({d}, InitKind::kZeros, rng);
    p.blocks.push_back(std::move(b));
  }
  p.lnf_gamma = make_param<T>({d}, InitKind::kOnes, rng);
  p.lnf_beta = make_param<T>({d}, InitKind::kZeros, rng);
  p.head_w = make_param<T>({d, c}, InitKind::kNormal, rng);
  p.head_b = make_param<T>({c}, InitKind::kZeros, rng);
  return p;
}

// ActivationCache

template <typename T>
ActivationCache<T>::ActivationCache(const ViTConfig& config)
    : config_(config),
      states_(static_cast<std::size_t>(config.n_layers) + 1),
      present_(static_cast<std::size_t>(config.n_layers) + 1, false) {}

template <typename T>
bool ActivationCache<T>::complete() const {
  return !present_.empty() && std::all_of(present_.begin(), present_.end(), [](bool b) { return b; });
}

template <typename T>
std::span<const T> ActivationCache<T>::layer(std::size_t layer) const {
  if (!has_layer(layer)) {
    throw PlanError("activation cache has no state for layer " + std::to_string(layer));
  }
  return states_[layer];
}

template <typename T>
std::span<const T> ActivationCache<T>::state(std::size_t layer, std::size_t token) const {
  if (token >= n_tokens()) {
    throw PlanError("token " + std::to_string(token) + " outside [0, " + std::to_string(n_tokens()) + ")");
  }
  return this->layer(layer).subspan(token * d_model(), d_model());
}

template <typename T>
void ActivationCache<T>::store_layer(std::size_t layer, std::span<const T> values) {
  if (layer >= states_.size() || values.size() != n_tokens() * d_model()) {
    throw DimensionError("activation cache: bad store at layer " + std::to_string(layer));
  }
  states_[layer].assign(values.begin(), values.end());
  present_[layer] = true;
}

// PatchPlan

template <typename T>
PatchPlan<T> PatchPlan<T>::single_layer(int layer, std::vector<int> tokens,
                                        std::shared_ptr<const ActivationCache<T>> source) {
  PatchPlan plan;
  plan.edits.push_back({layer, std::move(tokens), std::move(source)});
  return plan;
}

template <typename T>
void PatchPlan<T>::validate(const ViTConfig& config) const {
  for (std::size_t e = 0; e < edits.size(); ++e) {
    const auto& edit = edits[e];
    const std::string where = "patch edit " + std::to_string(e) + ": ";
    if (edit.layer < 0 || edit.layer > config.n_layers) {
      throw PlanError(where + "layer " + std::to_string(edit.layer) + " outside [0, " +
                      std::to_string(config.n_layers) + "]");
    }
    for (int tok : edit.tokens) {
      if (tok < 0 || tok >= config.n_tokens()) {
        throw PlanError(where + "token " + std::to_string(tok) + " outside [0, " +
                        std::to_string(config.n_tokens()) + ")");
      }
    }
    if (!edit.source) throw PlanError(where + "missing source cache");
    if (!edit.source->config().same_architecture(config)) {
      throw PlanError(where + "source cache was produced by a different model configuration");
    }
    if (!edit.source->has_layer(static_cast<std::size_t>(edit.layer))) {
      throw PlanError(where + "source cache has no state for layer " + std::to_string(edit.layer));
    }
  }
}

// Forward

template <typename T>
Tensor<T> patchify(const Image& image, const ViTConfig& config) {
  const auto size = static_cast<std::size_t>(config.image_px);
  if (image.size != size || image.pixels.size() != size * size) {
    throw InputError("patchify: image is " + std::to_string(image.size) + " px, model expects " +
                     std::to_string(size));
  }
  const auto pp = static_cast<std::size_t>(config.patch_px);
  const auto grid = static_cast<std::size_t>(config.grid_side());
  Buffer<T> out(grid * grid * pp * pp);
  for (std::size_t p = 0; p < grid * grid; ++p) {
    const std::size_t r0 = (p / grid) * pp;
    const std::size_t c0 = (p % grid) * pp;
    T* row = out.data() + p * pp * pp;
    for (std::size_t dr = 0; dr < pp; ++dr) {
      for (std::size_t dc = 0; dc < pp; ++dc) row[dr * pp + dc] = static_cast<T>(image.at(r0 + dr, c0 + dc));
    }
  }
  return Tensor<T>({grid * grid, pp * pp}, std::move(out));
}

template <typename T>
Tensor<T> stack_patches(std::span<const Image* const> images, const ViTConfig& config) {
  const auto n = static_cast<std::size_t>(config.n_patches());
  const auto pd = static_cast<std::size_t>(config.patch_dim());
  Buffer<T> out;
  out.reserve(images.size() * n * pd);
  for (const Image* img : images) {
    const auto p = patchify<T>(*img, config);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor<T>({images.size() * n, pd}, std::move(out));
}

template <typename T>
Tensor<T> forward_batch(const ViTParams<T>& params, const Tensor<T>& patches, std::size_t batch,
                        const BoundaryHook<T>& hook) {
  const auto& cfg = params.config;
  const auto n_patches = static_cast<std::size_t>(cfg.n_patches());
  const auto tokens = static_cast<std::size_t>(cfg.n_tokens());
  if (patches.rank() != 2 || patches.dim(0) != batch * n_patches ||
      patches.dim(1) != static_cast<std::size_t>(cfg.patch_dim())) {
    throw DimensionError("forward: patch matrix " + shape_str(patches.shape()) + " does not hold " +
                         std::to_string(batch) + " images of " + std::to_string(n_patches) +
                         " patches");
  }
  const T eps = static_cast<T>(kLayerNormEps);
  const auto heads = static_cast<std::size_t>(cfg.n_heads);

  Tensor<T> h = embed_tokens(linear(patches, params.patch_w, params.patch_b), params.cls,
                             params.pos, batch);
  for (std::size_t l = 0; l < params.blocks.size(); ++l) {
    if (hook) hook(l, h);
    const auto& b = params.blocks[l];
    const Tensor<T> a = layer_norm(h, b.ln1_gamma, b.ln1_beta, eps);
    const Tensor<T> att = attention(linear(a, b.wq, b.bq), linear(a, b.wk, b.bk),
                                    linear(a, b.wv, b.bv), batch, tokens, heads);
    h = add(h, linear(att, b.wo, b.bo));
    const Tensor<T> m = layer_norm(h, b.ln2_gamma, b.ln2_beta, eps);
    h = add(h, linear(gelu(linear(m, b.w1, b.b1)), b.w2, b.b2));
  }
  if (hook) hook(params.blocks.size(), h);

  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t i = 0; i < batch; ++i) cls_rows[i] = i * tokens;
  const Tensor<T> cls = layer_norm(gather_rows(h, cls_rows), params.lnf_gamma, params.lnf_beta, eps);
  return linear(cls, params.head_w, params.head_b);
}

namespace {

template <typename T>
ForwardResult<T> run_single(const ViTParams<T>& params, const Image& image, bool capture,
                            const PatchPlan<T>* plan) {
  const auto& cfg = params.config;
  const auto d = static_cast<std::size_t>(cfg.d_model);
  std::optional<ActivationCache<T>> cache;
  if (capture) cache.emplace(cfg);

  BoundaryHook<T> hook;
  if (capture || (plan && !plan->edits.empty())) {
    hook = [&](std::size_t layer, Tensor<T>& residual) {
      if (plan) {
        Buffer<T> patched;
        for (const auto& edit : plan->edits) {
          if (static_cast<std::size_t>(edit.layer) != layer) continue;
          if (patched.empty()) patched.assign(residual.data().begin(), residual.data().end());
          const auto src = edit.source->layer(layer);
          for (int tok : edit.tokens) {
            const auto t = static_cast<std::size_t>(tok);
            std::copy_n(src.data() + t * d, d, patched.data() + t * d);
          }
        }
        if (!patched.empty()) residual = Tensor<T>(residual.shape(), std::move(patched));
      }
      if (cache) cache->store_layer(layer, residual.data());
    };
  }
  const Tensor<T> patches = patchify<T>(image, cfg);
  const Tensor<T> logits = forward_batch(params, patches, 1, hook);
  Tensor<T> flat = reshape(logits, {static_cast<std::size_t>(cfg.n_classes)});
  return ForwardResult<T>{std::move(flat), std::move(cache)};
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const ViTParams<T>& params, const Image& image, bool capture) {
  return run_single<T>(params, image, capture, nullptr);
}

template <typename T>
ForwardResult<T> forward_patched(const ViTParams<T>& params, const Image& target,
                                 const PatchPlan<T>& plan, bool capture) {
  plan.validate(params.config);
  NoGradGuard no_grad;
  return run_single<T>(params, target, capture, &plan);
}

template <typename T>
T logit_diff(std::span<const T> logits, int class_a, int class_b) {
  const int n = static_cast<int>(logits.size());
  for (int c : {class_a, class_b}) {
    if (c < 1 || c > n) {
      throw InputError("logit_diff: class " + std::to_string(c) + " outside [1, " + std::to_string(n) + "]");
    }
  }
  return logits[static_cast<std::size_t>(class_a - 1)] - logits[static_cast<std::size_t>(class_b - 1)];
}

template <typename T>
int predicted_count(std::span<const T> logits) {
  if (logits.empty()) throw InputError("predicted_count: empty logits");
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin()) + 1;
}

#define PATCHLENS_INSTANTIATE_VIT(T)                                                               \
  template struct ViTParams<T>;                                                                    \
  template class ActivationCache<T>;                                                               \
  template struct PatchPlan<T>;                                                                    \
  template ViTParams<T> init_params<T>(const ViTConfig&);                                          \
  template Tensor<T> patchify<T>(const Image&, const ViTConfig&);                                  \
  template Tensor<T> stack_patches<T>(std::span<const Image* const>, const ViTConfig&);            \
  template Tensor<T> forward_batch<T>(const ViTParams<T>&, const Tensor<T>&, std::size_t,          \
                                      const BoundaryHook<T>&);                                     \
  template ForwardResult<T> forward<T>(const ViTParams<T>&, const Image&, bool);                   \
  template ForwardResult<T> forward_patched<T>(const ViTParams<T>&, const Image&,                  \
                                               const PatchPlan<T>&, bool);                         \
  template T logit_diff<T>(std::span<const T>, int, int);                                          \
  template int predicted_count<T>(std::span<const T>);

PATCHLENS_INSTANTIATE_VIT(float)
PATCHLENS_INSTANTIATE_VIT(double)

template ViTParams<double> ViTParams<float>::cast<double>() const;
template ViTParams<float> ViTParams<double>::cast<float>() const;
template ViTParams<float> ViTParams<float>::cast<float>() const;
template ViTParams<double> ViTParams<double>::cast<double>() const;

}  // namespace patchlens
