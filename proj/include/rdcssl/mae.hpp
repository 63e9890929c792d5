#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "rdcssl/ops.hpp"
#include "rdcssl/rng.hpp"
#include "rdcssl/serialize.hpp"

namespace rdcssl {

// H x W x C image, channel-last, values normally in [0, 1].
struct Image {
  std::size_t height = 0, width = 0, channels = 1;
  std::vector<float> pixels;

  std::size_t size() const { return height * width * channels; }
  float at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
};

// n patches of V*V*C values each; patch k sits at grid cell (k / grid_w, k % grid_w).
struct PatchGrid {
  std::size_t grid_h = 0, grid_w = 0, patch = 0, channels = 1;
  std::vector<float> patches;

  std::size_t count() const { return grid_h * grid_w; }
  std::size_t patch_dim() const { return patch * patch * channels; }
};

inline std::string divisor_hint(std::size_t h, std::size_t w) {
  std::string s;
  for (std::size_t v = 1; v <= std::min(h, w); ++v) {
    if (h % v == 0 && w % v == 0) s += (s.empty() ? "" : ", ") + std::to_string(v);
  }
  return s;
}

inline PatchGrid patchify(const Image& img, std::size_t patch) {
  if (patch == 0 || img.height % patch != 0 || img.width % patch != 0) {
    throw DimensionError("patchify: " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " image is not divisible by patch side " + std::to_string(patch) +
                         "; valid patch sides: " + divisor_hint(img.height, img.width));
  }
  if (img.pixels.size() != img.size()) throw DimensionError("patchify: pixel buffer does not match image dims");
  PatchGrid g{img.height / patch, img.width / patch, patch, img.channels, {}};
  g.patches.reserve(img.size());
  for (std::size_t gy = 0; gy < g.grid_h; ++gy)
    for (std::size_t gx = 0; gx < g.grid_w; ++gx)
      for (std::size_t dy = 0; dy < patch; ++dy)
        for (std::size_t dx = 0; dx < patch; ++dx)
          for (std::size_t c = 0; c < img.channels; ++c) g.patches.push_back(img.at(gy * patch + dy, gx * patch + dx, c));
  return g;
}

inline Image unpatchify(const PatchGrid& g) {
  Image img{g.grid_h * g.patch, g.grid_w * g.patch, g.channels, {}};
  img.pixels.resize(img.size());
  std::size_t k = 0;
  for (std::size_t gy = 0; gy < g.grid_h; ++gy)
    for (std::size_t gx = 0; gx < g.grid_w; ++gx)
      for (std::size_t dy = 0; dy < g.patch; ++dy)
        for (std::size_t dx = 0; dx < g.patch; ++dx)
          for (std::size_t c = 0; c < g.channels; ++c)
            img.pixels[((gy * g.patch + dy) * img.width + gx * g.patch + dx) * g.channels + c] = g.patches[k++];
  return img;
}

struct MaskSpec {
  std::vector<std::size_t> masked;   // sorted
  std::vector<std::size_t> visible;  // sorted complement
  double rate = 0.0;
};

inline std::size_t masked_count(std::size_t n, double rate) {
  return static_cast<std::size_t>(std::floor(static_cast<double>(n) * rate + 1e-9));
}

// Uniform subset of floor(n * rate) patches, without replacement.
inline MaskSpec sample_mask(std::size_t n, double rate, Rng& rng) {
  if (n == 0) throw ContractError("sample_mask: n must be >= 1");
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("sample_mask: mask rate must lie in [0, 1]");
  const std::size_t m = masked_count(n, rate);
  if (m >= n) throw ContractError("sample_mask: mask rate leaves no visible token for the encoder");
  auto perm = rng.permutation(n);
  MaskSpec spec;
  spec.rate = rate;
  spec.masked.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(m));
  spec.visible.assign(perm.begin() + static_cast<std::ptrdiff_t>(m), perm.end());
  std::sort(spec.masked.begin(), spec.masked.end());
  std::sort(spec.visible.begin(), spec.visible.end());
  return spec;
}

inline MaskSpec no_mask(std::size_t n) {
  MaskSpec spec;
  spec.visible.resize(n);
  std::iota(spec.visible.begin(), spec.visible.end(), std::size_t{0});
  return spec;
}

struct MaeConfig {
  std::size_t height = 32, width = 32, channels = 1;
  std::size_t patch = 4;
  std::size_t embed = 64;
  std::size_t depth = 2;
  std::size_t decoder_depth = 1;
  std::size_t mlp_ratio = 2;

  std::size_t grid_h() const { return height / patch; }
  std::size_t grid_w() const { return width / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }
  std::size_t patch_dim() const { return patch * patch * channels; }

  void validate() const {
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
      throw ConfigError("model: image " + std::to_string(height) + "x" + std::to_string(width) +
                            " not divisible by patch " + std::to_string(patch) + "; valid: " + divisor_hint(height, width),
                        "/model/patch");
    }
    if (embed == 0 || embed % 4 != 0) throw ConfigError("model: embed must be a positive multiple of 4", "/model/embed");
    if (depth == 0) throw ConfigError("model: encoder depth must be >= 1", "/model/depth");
    if (decoder_depth == 0) throw ConfigError("model: decoder depth must be >= 1", "/model/decoder_depth");
    if (channels == 0) throw ConfigError("model: channels must be >= 1", "/model/channels");
    if (mlp_ratio == 0) throw ConfigError("model: mlp_ratio must be >= 1", "/model/mlp_ratio");
  }

  friend bool operator==(const MaeConfig&, const MaeConfig&) = default;
};

inline void to_json(nlohmann::json& j, const MaeConfig& c) {
  j = {{"height", c.height}, {"width", c.width}, {"channels", c.channels}, {"patch", c.patch},
       {"embed", c.embed},   {"depth", c.depth}, {"decoder_depth", c.decoder_depth}, {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, MaeConfig& c) {
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.channels = j.value("channels", c.channels);
  c.patch = j.value("patch", c.patch);
  c.embed = j.value("embed", c.embed);
  c.depth = j.value("depth", c.depth);
  c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

// Fixed 2-D sine/cosine table (tokens x embed): first half encodes the grid
// row, second half the column.
template <std::floating_point S>
Tensor<S> sincos_positions(std::size_t grid_h, std::size_t grid_w, std::size_t embed) {
  const std::size_t half = embed / 2, quarter = embed / 4;
  std::vector<S> table(grid_h * grid_w * embed);
  auto encode = [&](std::size_t pos, std::size_t offset, std::size_t k) {
    for (std::size_t i = 0; i < quarter; ++i) {
      const double omega = 1.0 / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(quarter));
      table[k * embed + offset + i] = static_cast<S>(std::sin(static_cast<double>(pos) * omega));
      table[k * embed + offset + quarter + i] = static_cast<S>(std::cos(static_cast<double>(pos) * omega));
    }
  };
  for (std::size_t y = 0; y < grid_h; ++y)
    for (std::size_t x = 0; x < grid_w; ++x) {
      encode(y, 0, y * grid_w + x);
      encode(x, half, y * grid_w + x);
    }
  return Tensor<S>::from({grid_h * grid_w, embed}, std::move(table));
}

template <std::floating_point S>
struct Linear {
  Tensor<S> weight;  // (in, out)
  Tensor<S> bias;    // (out)

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
    std::vector<S> w(in * out);
    for (auto& v : w) v = static_cast<S>(rng.uniform(-limit, limit));
    return {Tensor<S>::from({in, out}, std::move(w), true), Tensor<S>::zeros({out}, true)};
  }

  // x (..., in) -> (..., out)
  Tensor<S> operator()(const Tensor<S>& x) const { return add(matmul(x, weight), bias); }
};

// Residual single-head self-attention followed by a residual GELU MLP; no
// normalization layers.
template <std::floating_point S>
struct Block {
  Linear<S> query, key, value, proj, fc1, fc2;

  static Block init(std::size_t embed, std::size_t hidden, Rng& rng) {
    Block b;
    b.query = Linear<S>::init(embed, embed, rng);
    b.key = Linear<S>::init(embed, embed, rng);
    b.value = Linear<S>::init(embed, embed, rng);
    b.proj = Linear<S>::init(embed, embed, rng);
    b.fc1 = Linear<S>::init(embed, hidden, rng);
    b.fc2 = Linear<S>::init(hidden, embed, rng);
    return b;
  }

  Tensor<S> operator()(const Tensor<S>& x) const {
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(x.shape().back())));
    auto scores = scale(matmul(query(x), transpose(key(x))), inv_sqrt);
    auto h = add(x, proj(matmul(softmax(scores), value(x))));
    return add(h, fc2(gelu(fc1(h))));
  }

  void collect(const std::string& prefix, std::vector<std::pair<std::string, Tensor<S>>>& out) const {
    const std::pair<const char*, const Linear<S>*> parts[] = {{"query", &query}, {"key", &key}, {"value", &value},
                                                              {"proj", &proj},   {"fc1", &fc1}, {"fc2", &fc2}};
    for (const auto& [name, lin] : parts) {
      out.emplace_back(prefix + name + ".weight", lin->weight);
      out.emplace_back(prefix + name + ".bias", lin->bias);
    }
  }
};

template <std::floating_point S>
struct MaeOutput {
  Tensor<S> reconstruction;  // (B, m, V*V*C); undefined when m == 0
  Tensor<S> features;        // (B, n - m, E) encoder outputs over visible tokens
};

// Tokenizer (patch embedding + fixed positions), encoder and decoder of the
// masked autoencoder. Parameters are shared handles, so copies alias; use
// clone() for an independent model.
template <std::floating_point S>
class MaeModel {
 public:
  MaeModel(MaeConfig config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const std::size_t e = config_.embed, hidden = config_.embed * config_.mlp_ratio;
    patch_embed_ = Linear<S>::init(config_.patch_dim(), e, rng);
    for (std::size_t i = 0; i < config_.depth; ++i) encoder_.push_back(Block<S>::init(e, hidden, rng));
    decoder_embed_ = Linear<S>::init(e, e, rng);
    std::vector<S> mt(e);
    for (auto& v : mt) v = static_cast<S>(rng.normal(0.0, 0.02));
    mask_token_ = Tensor<S>::from({1, 1, e}, std::move(mt), true);
    for (std::size_t i = 0; i < config_.decoder_depth; ++i) decoder_.push_back(Block<S>::init(e, hidden, rng));
    decoder_pred_ = Linear<S>::init(e, config_.patch_dim(), rng);
    positions_ = sincos_positions<S>(config_.grid_h(), config_.grid_w(), e);
  }

  MaeModel(const MaeModel&) = delete;
  MaeModel& operator=(const MaeModel&) = delete;
  MaeModel(MaeModel&&) noexcept = default;
  MaeModel& operator=(MaeModel&&) noexcept = default;

  const MaeConfig& config() const { return config_; }

  std::vector<std::pair<std::string, Tensor<S>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    out.emplace_back("tokenizer.weight", patch_embed_.weight);
    out.emplace_back("tokenizer.bias", patch_embed_.bias);
    for (std::size_t i = 0; i < encoder_.size(); ++i) encoder_[i].collect("encoder." + std::to_string(i) + ".", out);
    out.emplace_back("decoder.embed.weight", decoder_embed_.weight);
    out.emplace_back("decoder.embed.bias", decoder_embed_.bias);
    out.emplace_back("decoder.mask_token", mask_token_);
    for (std::size_t i = 0; i < decoder_.size(); ++i) decoder_[i].collect("decoder." + std::to_string(i) + ".", out);
    out.emplace_back("decoder.pred.weight", decoder_pred_.weight);
    out.emplace_back("decoder.pred.bias", decoder_pred_.bias);
    return out;
  }

  // Tokenizer and encoder only: the parameters a downstream classifier keeps.
  std::vector<std::pair<std::string, Tensor<S>>> encoder_parameters() const {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (auto& [name, t] : named_parameters()) {
      if (name.rfind("decoder.", 0) != 0) out.emplace_back(name, t);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : named_parameters()) n += t.numel();
    return n;
  }

  MaeModel clone() const {
    MaeModel copy(config_, 0);
    copy.copy_from(*this);
    return copy;
  }

  void copy_from(const MaeModel& other) {
    if (!(other.config_ == config_)) throw ConfigError("model: architecture mismatch while copying weights");
    auto dst = named_parameters();
    auto src = other.named_parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      std::copy(src[i].second.data().begin(), src[i].second.data().end(), dst[i].second.mutable_data().begin());
    }
  }

  // patches (B, n, V*V*C) -> token embeddings with positions (B, n, E)
  Tensor<S> tokenize(const Tensor<S>& patches) const {
    check_patches(patches);
    return add(patch_embed_(patches), positions_);
  }

  // Encoder over the full, unmasked token sequence: (B, n, E).
  Tensor<S> encode(const Tensor<S>& patches) const { return run_blocks(encoder_, tokenize(patches)); }

  // Masked forward pass; masks holds one spec per batch element, all with the
  // same masked count.
  MaeOutput<S> forward(const Tensor<S>& patches, std::span<const MaskSpec> masks) const {
    check_patches(patches);
    const std::size_t batch = patches.dim(0), n = config_.tokens(), e = config_.embed;
    if (masks.size() != batch) {
      throw DimensionError("mae_forward: " + std::to_string(masks.size()) + " masks for batch of " + std::to_string(batch));
    }
    const std::size_t m = masks[0].masked.size();
    std::vector<std::size_t> vis_idx, mask_idx, restore(batch * n);
    vis_idx.reserve(batch * (n - m));
    mask_idx.reserve(batch * m);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto& spec = masks[b];
      if (spec.masked.size() != m || spec.visible.size() + m != n) {
        throw DimensionError("mae_forward: mask " + std::to_string(b) + " does not partition " + std::to_string(n) +
                             " tokens with " + std::to_string(m) + " masked");
      }
      for (std::size_t i = 0; i < spec.visible.size(); ++i) {
        vis_idx.push_back(spec.visible[i]);
        restore[b * n + spec.visible[i]] = i;
      }
      for (std::size_t i = 0; i < m; ++i) {
        mask_idx.push_back(spec.masked[i]);
        restore[b * n + spec.masked[i]] = (n - m) + i;
      }
    }
    auto tokens = tokenize(patches);
    auto visible = m == 0 ? tokens : gather_tokens<S>(tokens, vis_idx, n - m);
    MaeOutput<S> out;
    out.features = run_blocks(encoder_, visible);
    if (m == 0) return out;

    auto dec = decoder_embed_(out.features);
    auto fill = add(Tensor<S>::zeros({batch, m, e}), mask_token_);
    auto full = gather_tokens<S>(concat<S>({dec, fill}, 1), restore, n);
    auto decoded = run_blocks(decoder_, add(full, positions_));
    out.reconstruction = gather_tokens<S>(decoder_pred_(decoded), mask_idx, m);
    return out;
  }

 private:
  void check_patches(const Tensor<S>& patches) const {
    if (patches.rank() != 3 || patches.dim(1) != config_.tokens() || patches.dim(2) != config_.patch_dim()) {
      throw DimensionError("mae: expected patches (B," + std::to_string(config_.tokens()) + "," +
                           std::to_string(config_.patch_dim()) + "), got " + to_string(patches.shape()));
    }
  }

  static Tensor<S> run_blocks(const std::vector<Block<S>>& blocks, Tensor<S> x) {
    for (const auto& b : blocks) x = b(x);
    return x;
  }

  MaeConfig config_;
  Linear<S> patch_embed_;
  std::vector<Block<S>> encoder_;
  Linear<S> decoder_embed_;
  Tensor<S> mask_token_;
  std::vector<Block<S>> decoder_;
  Linear<S> decoder_pred_;
  Tensor<S> positions_;
};

// Stacks patch grids into a (B, n, V*V*C) tensor.
template <std::floating_point S>
Tensor<S> stack_patches(std::span<const PatchGrid> grids) {
  if (grids.empty()) throw ContractError("stack_patches: empty batch");
  const std::size_t n = grids[0].count(), p = grids[0].patch_dim();
  std::vector<S> data;
  data.reserve(grids.size() * n * p);
  for (const auto& g : grids) {
    if (g.count() != n || g.patch_dim() != p) throw DimensionError("stack_patches: inconsistent patch grids");
    data.insert(data.end(), g.patches.begin(), g.patches.end());
  }
  return Tensor<S>::from({grids.size(), n, p}, std::move(data));
}

// Targets X_m gathered from the patch tensor, aligned with forward().
template <std::floating_point S>
Tensor<S> masked_targets(const Tensor<S>& patches, std::span<const MaskSpec> masks) {
  const std::size_t m = masks.empty() ? 0 : masks[0].masked.size();
  if (m == 0) return {};
  std::vector<std::size_t> idx;
  for (const auto& spec : masks) idx.insert(idx.end(), spec.masked.begin(), spec.masked.end());
  return gather_tokens<S>(patches.detach(), idx, m);
}

// Reconstruction loss ||Y_m - X_m||^2 / (m * V^2 * C), averaged over the batch
// when given (B, m, V^2 C) tensors.
template <std::floating_point S>
Tensor<S> loss_ssl(const Tensor<S>& reconstruction, const Tensor<S>& target, std::size_t patch, std::size_t channels) {
  if (!reconstruction.defined() || !target.defined()) {
    throw ContractError("loss_ssl: no masked patches (m = 0), reconstruction loss is undefined");
  }
  if (reconstruction.shape() != target.shape()) {
    throw DimensionError("loss_ssl: reconstruction " + to_string(reconstruction.shape()) + " vs target " +
                         to_string(target.shape()));
  }
  if (reconstruction.shape().back() != patch * patch * channels) {
    throw DimensionError("loss_ssl: patch width " + std::to_string(reconstruction.shape().back()) + " != V^2*C = " +
                         std::to_string(patch * patch * channels));
  }
  return mean(square(sub(reconstruction, target)));
}

inline constexpr const char* kModelSidecar = "model.json";

template <std::floating_point S>
void save_checkpoint(const std::filesystem::path& dir, const MaeModel<S>& model, const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  nlohmann::json meta;
  meta["architecture"] = model.config();
  meta["parameters"] = nlohmann::json::array();
  for (const auto& [name, t] : model.named_parameters()) {
    save_tensor(dir / (name + ".rdtn"), t.template cast<float>());
    meta["parameters"].push_back(name);
  }
  if (!extra.is_null()) meta["extra"] = extra;
  std::ofstream(dir / kModelSidecar) << meta.dump(2) << '\n';
}

inline MaeConfig load_checkpoint_config(const std::filesystem::path& dir) {
  std::ifstream in(dir / kModelSidecar);
  if (!in) throw FormatError("checkpoint: missing " + (dir / kModelSidecar).string());
  auto meta = nlohmann::json::parse(in);
  return meta.at("architecture").get<MaeConfig>();
}

template <std::floating_point S>
MaeModel<S> load_checkpoint(const std::filesystem::path& dir) {
  MaeModel<S> model(load_checkpoint_config(dir), 0);
  for (auto& [name, t] : model.named_parameters()) {
    auto stored = load_tensor(dir / (name + ".rdtn"));
    if (stored.shape() != t.shape()) {
      throw DimensionError("checkpoint: parameter " + name + " has shape " + to_string(stored.shape()) + ", expected " +
                           to_string(t.shape()));
    }
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<S>(stored.data()[i]);
  }
  return model;
}

}  // namespace rdcssl
