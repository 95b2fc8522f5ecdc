#pragma once

// Transformer noise estimator: 3D patch partition, sinusoidal time
// featurization with a two-layer MLP, adaLN-modulated transformer blocks with
// global space-time attention, and a linear head back to noise maps.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "nightrain/clip.hpp"
#include "nightrain/error.hpp"
#include "nightrain/ops.hpp"
#include "nightrain/rng.hpp"
#include "nightrain/tensor.hpp"

namespace nightrain {

struct PatchSpec {
  std::size_t ts = 2;      // temporal patch size
  std::size_t ss = 2;      // spatial patch size
  std::size_t width = 64;  // token width C_p
  bool operator==(const PatchSpec&) const = default;
};

struct ModelConfig {
  ClipGeometry clip{3, 4, 16, 16};  // geometry of x_t (the condition matches)
  PatchSpec patch;
  std::size_t n_blocks = 2;
  std::size_t heads = 0;  // 0 selects width / 64 (at least 1)
  std::size_t mlp_ratio = 4;

  [[nodiscard]] std::size_t head_count() const { return heads != 0 ? heads : std::max<std::size_t>(1, patch.width / 64); }
  [[nodiscard]] std::size_t input_channels() const { return 2 * clip.channels; }
  [[nodiscard]] std::size_t token_count() const {
    return (clip.frames / patch.ts) * (clip.height / patch.ss) * (clip.width / patch.ss);
  }
  [[nodiscard]] std::size_t patch_volume() const { return patch.ts * patch.ss * patch.ss; }

  void validate() const {
    if (patch.ts == 0 || patch.ss == 0) throw ConfigError("patch sizes must be >= 1");
    if (patch.width < 2) throw ConfigError("token width must be >= 2");
    if (clip.channels == 0 || clip.frames == 0 || clip.height == 0 || clip.width == 0)
      throw ConfigError("clip dimensions must be positive");
    if (clip.frames % patch.ts != 0 || clip.height % patch.ss != 0 || clip.width % patch.ss != 0)
      throw ConfigError("clip " + to_string(clip) + " is not divisible by the patch size");
    if (patch.width % head_count() != 0) throw ConfigError("token width must be divisible by the head count");
    if (patch.width % 2 != 0) throw ConfigError("token width must be even for the sinusoidal time features");
    if (n_blocks == 0) throw ConfigError("need at least one transformer block");
    if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <class T>
struct BlockParams {
  BasicTensor<T> mod_w, mod_b;  // time embedding -> six modulation vectors
  BasicTensor<T> qkv_w, qkv_b;
  BasicTensor<T> proj_w, proj_b;
  BasicTensor<T> fc1_w, fc1_b;
  BasicTensor<T> fc2_w, fc2_b;
};

/// Every weight of the noise estimator. Copies share tensors; use clone().
template <class T>
struct BasicModelParams {
  ModelConfig config;
  BasicTensor<T> patch_w, patch_b;  // [C_p, 2C, ts, ss, ss], [C_p]
  BasicTensor<T> pos;               // [P, C_p]
  BasicTensor<T> time_w1, time_b1, time_w2, time_b2;
  std::vector<BlockParams<T>> blocks;
  BasicTensor<T> final_mod_w, final_mod_b;  // -> shift, scale
  BasicTensor<T> head_w, head_b;            // -> ts*ss*ss*C per token

  /// Visits (name, tensor) in the canonical serialization order.
  template <class F>
  void for_each(F&& f) {
    f("patch.weight", patch_w);
    f("patch.bias", patch_b);
    f("pos_embed", pos);
    f("time.fc1.weight", time_w1);
    f("time.fc1.bias", time_b1);
    f("time.fc2.weight", time_w2);
    f("time.fc2.bias", time_b2);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const std::string p = "blocks." + std::to_string(i) + ".";
      auto& b = blocks[i];
      f(p + "modulation.weight", b.mod_w);
      f(p + "modulation.bias", b.mod_b);
      f(p + "attn.qkv.weight", b.qkv_w);
      f(p + "attn.qkv.bias", b.qkv_b);
      f(p + "attn.proj.weight", b.proj_w);
      f(p + "attn.proj.bias", b.proj_b);
      f(p + "mlp.fc1.weight", b.fc1_w);
      f(p + "mlp.fc1.bias", b.fc1_b);
      f(p + "mlp.fc2.weight", b.fc2_w);
      f(p + "mlp.fc2.bias", b.fc2_b);
    }
    f("final.modulation.weight", final_mod_w);
    f("final.modulation.bias", final_mod_b);
    f("head.weight", head_w);
    f("head.bias", head_b);
  }

  template <class F>
  void for_each(F&& f) const {
    const_cast<BasicModelParams*>(this)->for_each([&](const std::string& name, BasicTensor<T>& t) {
      f(name, static_cast<const BasicTensor<T>&>(t));
    });
  }

  [[nodiscard]] std::vector<BasicTensor<T>*> tensors() {
    std::vector<BasicTensor<T>*> out;
    for_each([&](const std::string&, BasicTensor<T>& t) { out.push_back(&t); });
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t n = 0;
    for_each([&](const std::string&, const BasicTensor<T>& t) { n += t.numel(); });
    return n;
  }

  [[nodiscard]] BasicModelParams clone() const {
    BasicModelParams out = *this;
    out.for_each([](const std::string&, BasicTensor<T>& t) { t = t.clone(); });
    return out;
  }

  template <class U>
  [[nodiscard]] BasicModelParams<U> cast() const {
    BasicModelParams<U> out;
    out.config = config;
    out.blocks.resize(blocks.size());
    std::vector<BasicTensor<U>*> dst = out.tensors();
    std::size_t i = 0;
    for_each([&](const std::string&, const BasicTensor<T>& t) { *dst[i++] = t.template cast<U>(); });
    return out;
  }

  void set_requires_grad(bool v) {
    for_each([v](const std::string&, BasicTensor<T>& t) { t.set_requires_grad(v); });
  }

  void zero_grad() {
    for_each([](const std::string&, BasicTensor<T>& t) { t.zero_grad(); });
  }
};

using ModelParams = BasicModelParams<float>;

enum class InitMode {
  adaln_zero,  // modulation, gates, positional table and head start at zero
  random_all,  // every tensor random; used for gradient checks
};

/// Xavier-uniform linear weights and zero biases; see
/// InitMode for the zero-initialized parts.
template <class T = float>
BasicModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed, InitMode mode = InitMode::adaln_zero) {
  cfg.validate();
  CounterRng rng(seed);
  const std::size_t c = cfg.patch.width;
  const std::size_t cin = cfg.input_channels();
  const std::size_t vol = cfg.patch_volume();
  const bool zero = mode == InitMode::adaln_zero;

  auto xavier = [&](Shape shape, std::size_t fan_in, std::size_t fan_out) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    BasicTensor<T> t(shape, T(0), true);
    for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
    return t;
  };
  auto normal = [&](Shape shape, double std) {
    BasicTensor<T> t(shape, T(0), true);
    for (auto& v : t.values()) v = static_cast<T>(std * rng.gaussian());
    return t;
  };
  auto zeros_or = [&](Shape shape, double std) {
    return zero ? BasicTensor<T>(shape, T(0), true) : normal(std::move(shape), std);
  };
  auto bias = [&](std::size_t n) { return zero ? BasicTensor<T>({n}, T(0), true) : normal({n}, 0.02); };

  BasicModelParams<T> p;
  p.config = cfg;
  p.patch_w = xavier({c, cin, cfg.patch.ts, cfg.patch.ss, cfg.patch.ss}, cin * vol, c);
  p.patch_b = bias(c);
  p.pos = zeros_or({cfg.token_count(), c}, 0.02);
  p.time_w1 = xavier({c, c}, c, c);
  p.time_b1 = bias(c);
  p.time_w2 = xavier({c, c}, c, c);
  p.time_b2 = bias(c);
  const std::size_t hidden = c * cfg.mlp_ratio;
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    BlockParams<T> b;
    b.mod_w = zeros_or({c, 6 * c}, 0.1);
    b.mod_b = bias(6 * c);
    b.qkv_w = xavier({c, 3 * c}, c, 3 * c);
    b.qkv_b = bias(3 * c);
    b.proj_w = xavier({c, c}, c, c);
    b.proj_b = bias(c);
    b.fc1_w = xavier({c, hidden}, c, hidden);
    b.fc1_b = bias(hidden);
    b.fc2_w = xavier({hidden, c}, hidden, c);
    b.fc2_b = bias(c);
    p.blocks.push_back(std::move(b));
  }
  p.final_mod_w = zeros_or({c, 2 * c}, 0.1);
  p.final_mod_b = bias(2 * c);
  p.head_w = zeros_or({c, vol * cfg.clip.channels}, 0.1);
  p.head_b = bias(vol * cfg.clip.channels);
  return p;
}

// ---------------------------------------------------------------------------
// Patch ordering
//
// Token p = (a * H' + b) * W' + d for temporal/row/column patch coordinates
// (a, b, d): time-major, then rows, then columns. Inside a token, feature
// q = ((c * ts + dt) * ss + dy) * ss + dx, matching the conv kernel layout.

/// For every (token, feature) slot the flat (C, T, H, W) index it covers.
inline std::vector<std::size_t> patch_index_map(const ClipGeometry& g, std::size_t ts, std::size_t ss) {
  if (g.frames % ts != 0 || g.height % ss != 0 || g.width % ss != 0)
    throw DimensionError("geometry " + to_string(g) + " is not divisible by the patch size");
  const std::size_t ot = g.frames / ts, oh = g.height / ss, ow = g.width / ss;
  const std::size_t q = g.channels * ts * ss * ss;
  std::vector<std::size_t> map(ot * oh * ow * q);
  std::size_t k = 0;
  for (std::size_t a = 0; a < ot; ++a)
    for (std::size_t b = 0; b < oh; ++b)
      for (std::size_t d = 0; d < ow; ++d)
        for (std::size_t c = 0; c < g.channels; ++c)
          for (std::size_t dt = 0; dt < ts; ++dt)
            for (std::size_t dy = 0; dy < ss; ++dy)
              for (std::size_t dx = 0; dx < ss; ++dx)
                map[k++] = ((c * g.frames + a * ts + dt) * g.height + b * ss + dy) * g.width + d * ss + dx;
  return map;
}

/// Clip (C, T, H, W) -> tokens (P, C * ts * ss * ss).
template <class T>
BasicTensor<T> patchify(const BasicTensor<T>& x, std::size_t ts, std::size_t ss) {
  if (x.rank() != 4) throw DimensionError("patchify: expected rank-4 clip, got " + shape_str(x.shape()));
  const ClipGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  const auto map = patch_index_map(g, ts, ss);
  const std::size_t q = g.channels * ts * ss * ss;
  return gather(x, map, {map.size() / q, q});
}

/// Inverse of patchify: tokens (P, C * ts * ss * ss) -> clip of geometry g.
template <class T>
BasicTensor<T> unpatchify(const BasicTensor<T>& tokens, const ClipGeometry& g, std::size_t ts, std::size_t ss) {
  const auto map = patch_index_map(g, ts, ss);
  if (tokens.numel() != map.size())
    throw DimensionError("unpatchify: " + shape_str(tokens.shape()) + " does not cover geometry " + to_string(g));
  std::vector<std::size_t> inverse(map.size());
  for (std::size_t i = 0; i < map.size(); ++i) inverse[map[i]] = i;
  return gather(tokens, inverse, g.shape());
}

// ---------------------------------------------------------------------------
// Forward pass

/// conv3d with stride == kernel, flattened to (P, C_p), plus bias and the
/// positional table.
template <class T>
BasicTensor<T> patch_partition(const BasicModelParams<T>& p, const BasicTensor<T>& x) {
  const BasicTensor<T> grid = conv3d(x, p.patch_w);  // [C_p, T', H', W']
  const std::size_t c = grid.dim(0);
  const std::size_t tokens = grid.numel() / c;
  if (tokens != p.pos.dim(0))
    throw DimensionError("patch_partition: " + std::to_string(tokens) + " tokens but positional table has " +
                         std::to_string(p.pos.dim(0)));
  BasicTensor<T> seq = transpose(reshape(grid, {c, tokens}));
  return add(add_row(seq, p.patch_b), p.pos);
}

/// [cos(t w_i), sin(t w_i)] with w_i = 10000^(-i / half).
template <class T>
BasicTensor<T> sinusoidal_features(std::size_t t, std::size_t width) {
  const std::size_t half = width / 2;
  std::vector<T> v(width, T(0));
  for (std::size_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = static_cast<double>(t) * freq;
    v[i] = static_cast<T>(std::cos(arg));
    v[half + i] = static_cast<T>(std::sin(arg));
  }
  return BasicTensor<T>({1, width}, std::move(v));
}

/// Time embedding T_e (1, C_p): sinusoidal features then Linear-GELU-Linear.
template <class T>
BasicTensor<T> time_embed(const BasicModelParams<T>& p, std::size_t t) {
  const auto feats = sinusoidal_features<T>(t, p.config.patch.width);
  return linear(gelu(linear(feats, p.time_w1, p.time_b1)), p.time_w2, p.time_b2);
}

/// layer_norm(x) * (1 + scale) + shift, with shift/scale broadcast over rows.
template <class T>
BasicTensor<T> adaln(const BasicTensor<T>& x, const BasicTensor<T>& shift, const BasicTensor<T>& scale_v) {
  return add_row(mul_row(layer_norm(x), add_scalar(scale_v, T(1))), shift);
}

/// Multi-head self-attention over all tokens. When `weights_out` is given,
/// the per-head attention matrices are appended to it.
template <class T>
BasicTensor<T> self_attention(const BasicTensor<T>& x, const BlockParams<T>& b, std::size_t heads,
                              std::vector<BasicTensor<T>>* weights_out = nullptr) {
  const std::size_t c = x.dim(1);
  if (c % heads != 0) throw DimensionError("self_attention: width not divisible by head count");
  const std::size_t d = c / heads;
  const T inv_sqrt_d = T(1) / static_cast<T>(std::sqrt(static_cast<double>(d)));
  const BasicTensor<T> qkv = linear(x, b.qkv_w, b.qkv_b);  // [P, 3C]
  std::vector<BasicTensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const auto q = slice_cols(qkv, h * d, d);
    const auto k = slice_cols(qkv, c + h * d, d);
    const auto v = slice_cols(qkv, 2 * c + h * d, d);
    const auto attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d));
    if (weights_out) weights_out->push_back(attn);
    outs.push_back(matmul(attn, v));
  }
  const BasicTensor<T> merged = heads == 1 ? outs[0] : concat_cols(outs);
  return linear(merged, b.proj_w, b.proj_b);
}

/// The six block modulation vectors, each (1, C_p), from one time embedding.
template <class T>
struct BlockModulation {
  BasicTensor<T> s_msa, g_msa, c_msa, s_mlp, g_mlp, c_mlp;
};

template <class T>
BlockModulation<T> block_modulation(const BlockParams<T>& b, const BasicTensor<T>& temb) {
  const std::size_t c = temb.dim(1);
  const auto mod = linear(silu(temb), b.mod_w, b.mod_b);
  return {slice_cols(mod, 0, c),     slice_cols(mod, c, c),     slice_cols(mod, 2 * c, c),
          slice_cols(mod, 3 * c, c), slice_cols(mod, 4 * c, c), slice_cols(mod, 5 * c, c)};
}

/// Y_msa = X + g_msa * MSA(adaLN(X, s_msa, c_msa));
/// Y = Y_msa + g_mlp * MLP(adaLN(Y_msa, s_mlp, c_mlp)).
template <class T>
BasicTensor<T> transformer_block(const BasicTensor<T>& x, const BlockModulation<T>& m, const BlockParams<T>& b,
                                 std::size_t heads, std::vector<BasicTensor<T>>* attn_weights = nullptr) {
  const auto attn = self_attention(adaln(x, m.s_msa, m.c_msa), b, heads, attn_weights);
  const auto y_msa = add(x, mul_row(attn, m.g_msa));
  const auto hidden = gelu(linear(adaln(y_msa, m.s_mlp, m.c_mlp), b.fc1_w, b.fc1_b));
  const auto mlp = linear(hidden, b.fc2_w, b.fc2_b);
  return add(y_msa, mul_row(mlp, m.g_mlp));
}

/// Final adaLN, per-token linear map, and un-patching to (C, T, H, W).
template <class T>
BasicTensor<T> head_to_noise(const BasicModelParams<T>& p, const BasicTensor<T>& tokens, const BasicTensor<T>& temb) {
  const auto& cfg = p.config;
  if (tokens.dim(0) != cfg.token_count())
    throw DimensionError("head_to_noise: token count " + std::to_string(tokens.dim(0)) + " does not match geometry " +
                         to_string(cfg.clip));
  const std::size_t c = temb.dim(1);
  const auto mod = linear(silu(temb), p.final_mod_w, p.final_mod_b);
  const auto normed = adaln(tokens, slice_cols(mod, 0, c), slice_cols(mod, c, c));
  const auto out = linear(normed, p.head_w, p.head_b);
  return unpatchify(out, cfg.clip, cfg.patch.ts, cfg.patch.ss);
}

/// eps_w(x_t, cond, t): channel concatenation, patch partition, transformer
/// blocks sharing one time embedding, and the noise head.
template <class T>
BasicTensor<T> predict_noise(const BasicModelParams<T>& p, const BasicTensor<T>& x_t, const BasicTensor<T>& cond,
                             std::size_t t) {
  const auto& cfg = p.config;
  if (x_t.shape() != cfg.clip.shape() || cond.shape() != cfg.clip.shape())
    throw DimensionError("predict_noise: inputs " + shape_str(x_t.shape()) + " / " + shape_str(cond.shape()) +
                         " do not match model geometry " + to_string(cfg.clip));
  const auto temb = time_embed(p, t);
  auto tokens = patch_partition(p, concat0(x_t, cond));
  const std::size_t heads = cfg.head_count();
  for (const auto& b : p.blocks) tokens = transformer_block(tokens, block_modulation(b, temb), b, heads);
  return head_to_noise(p, tokens, temb);
}

/// Adapts parameters to the (x_t, cond, t) estimator interface used by the
/// diffusion routines.
template <class T>
auto noise_estimator(const BasicModelParams<T>& p) {
  return [&p](const BasicTensor<T>& x_t, const BasicTensor<T>& cond, std::size_t t) {
    return predict_noise(p, x_t, cond, t);
  };
}

}  // namespace nightrain
