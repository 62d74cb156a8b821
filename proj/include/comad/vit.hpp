#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "comad/errors.hpp"
#include "comad/ops.hpp"
#include "comad/rng.hpp"
#include "comad/tensor.hpp"

namespace comad {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

struct ViTConfig {
  std::int64_t image_size = 64;
  std::int64_t patch_size = 8;
  std::int64_t in_channels = 3;
  std::int64_t embed_dim = 32;
  std::int64_t depth = 4;
  std::int64_t num_heads = 2;
  double mlp_ratio = 4.0;

  std::int64_t grid() const { return image_size / patch_size; }
  std::int64_t num_patches() const { return grid() * grid(); }
  std::int64_t patch_dim() const {
    return patch_size * patch_size * in_channels;
  }
  std::int64_t head_dim() const { return embed_dim / num_heads; }
  std::int64_t mlp_hidden() const {
    return static_cast<std::int64_t>(std::llround(embed_dim * mlp_ratio));
  }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || in_channels <= 0)
      throw ConfigError("encoder: image_size, patch_size, channels must be > 0");
    if (image_size % patch_size != 0)
      throw ConfigError("encoder: image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " +
                        std::to_string(patch_size));
    if (embed_dim <= 0 || depth < 0 || num_heads <= 0)
      throw ConfigError("encoder: embed_dim/depth/heads out of range");
    if (embed_dim % num_heads != 0)
      throw ConfigError("encoder: embed_dim " + std::to_string(embed_dim) +
                        " not divisible by num_heads " +
                        std::to_string(num_heads));
    if (mlp_ratio <= 0) throw ConfigError("encoder: mlp_ratio must be > 0");
  }
};

// [B, C, H, W] -> [B, N, P*P*C], patches in row-major grid order, each patch
// flattened channel-major. Pure data transform; images carry no gradient.
template <typename T>
Tensor<T> patchify(const Tensor<T>& images, std::int64_t p) {
  if (images.rank() != 4)
    throw DimensionError("patchify: expected [B, C, H, W], got " +
                         shape_str(images.shape()));
  const std::int64_t b = images.dim(0), c = images.dim(1), h = images.dim(2),
                     w = images.dim(3);
  if (p <= 0 || h % p != 0 || w % p != 0)
    throw ConfigError("patchify: image " + std::to_string(h) + "x" +
                      std::to_string(w) + " not divisible by patch size " +
                      std::to_string(p));
  const std::int64_t gh = h / p, gw = w / p, n = gh * gw, pd = p * p * c;
  Tensor<T> out({b, n, pd});
  const T* src = images.data();
  T* dst = out.data();
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t gy = 0; gy < gh; ++gy)
      for (std::int64_t gx = 0; gx < gw; ++gx) {
        T* patch = dst + (i * n + gy * gw + gx) * pd;
        for (std::int64_t ch = 0; ch < c; ++ch)
          for (std::int64_t py = 0; py < p; ++py)
            for (std::int64_t px = 0; px < p; ++px)
              patch[(ch * p + py) * p + px] =
                  src[((i * c + ch) * h + gy * p + py) * w + gx * p + px];
      }
  return out;
}

// Exact inverse of patchify.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::int64_t p,
                     std::int64_t channels) {
  if (patches.rank() != 3)
    throw DimensionError("unpatchify: expected [B, N, P*P*C], got " +
                         shape_str(patches.shape()));
  const std::int64_t b = patches.dim(0), n = patches.dim(1),
                     pd = patches.dim(2);
  if (pd != p * p * channels)
    throw DimensionError("unpatchify: patch width " + std::to_string(pd) +
                         " != P*P*C");
  const std::int64_t g =
      static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (g * g != n)
    throw ConfigError("unpatchify: patch count " + std::to_string(n) +
                      " is not a perfect square");
  const std::int64_t h = g * p;
  Tensor<T> out({b, channels, h, h});
  const T* src = patches.data();
  T* dst = out.data();
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t gy = 0; gy < g; ++gy)
      for (std::int64_t gx = 0; gx < g; ++gx) {
        const T* patch = src + (i * n + gy * g + gx) * pd;
        for (std::int64_t ch = 0; ch < channels; ++ch)
          for (std::int64_t py = 0; py < p; ++py)
            for (std::int64_t px = 0; px < p; ++px)
              dst[((i * channels + ch) * h + gy * p + py) * h + gx * p + px] =
                  patch[(ch * p + py) * p + px];
      }
  return out;
}

template <typename T>
struct AttentionParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct BlockParams {
  Tensor<T> ln1_g, ln1_b;
  AttentionParams<T> attn;
  Tensor<T> ln2_g, ln2_b;
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

constexpr double kLayerNormEps = 1e-6;

// Pre-norm encoder: x += Attn(LN(x)); x += MLP(LN(x)); final LayerNorm.
// Weight matrices are stored input-major ([in, out]) so tokens multiply as
// x @ W.
template <typename T>
class ViTEncoder {
public:
  ViTEncoder() = default;

  ViTEncoder(ViTConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const double sigma = 0.02;
    patch_w_ = Tensor<T>::trunc_normal({cfg_.patch_dim(), cfg_.embed_dim}, rng,
                                       sigma);
    patch_b_ = Tensor<T>::zeros({cfg_.embed_dim});
    cls_ = Tensor<T>::trunc_normal({cfg_.embed_dim}, rng, sigma);
    pos_ = Tensor<T>::trunc_normal({cfg_.num_patches() + 1, cfg_.embed_dim},
                                   rng, sigma);
    const std::int64_t d = cfg_.embed_dim, hdim = cfg_.mlp_hidden();
    blocks_.resize(static_cast<std::size_t>(cfg_.depth));
    for (auto& blk : blocks_) {
      blk.ln1_g = Tensor<T>::ones({d});
      blk.ln1_b = Tensor<T>::zeros({d});
      blk.attn.wq = Tensor<T>::trunc_normal({d, d}, rng, sigma);
      blk.attn.bq = Tensor<T>::zeros({d});
      blk.attn.wk = Tensor<T>::trunc_normal({d, d}, rng, sigma);
      blk.attn.bk = Tensor<T>::zeros({d});
      blk.attn.wv = Tensor<T>::trunc_normal({d, d}, rng, sigma);
      blk.attn.bv = Tensor<T>::zeros({d});
      blk.attn.wo = Tensor<T>::trunc_normal({d, d}, rng, sigma);
      blk.attn.bo = Tensor<T>::zeros({d});
      blk.ln2_g = Tensor<T>::ones({d});
      blk.ln2_b = Tensor<T>::zeros({d});
      blk.mlp_w1 = Tensor<T>::trunc_normal({d, hdim}, rng, sigma);
      blk.mlp_b1 = Tensor<T>::zeros({hdim});
      blk.mlp_w2 = Tensor<T>::trunc_normal({hdim, d}, rng, sigma);
      blk.mlp_b2 = Tensor<T>::zeros({d});
    }
    final_g_ = Tensor<T>::ones({d});
    final_b_ = Tensor<T>::zeros({d});
    set_frozen(false);
  }

  const ViTConfig& config() const { return cfg_; }
  bool frozen() const { return frozen_; }

  void set_frozen(bool frozen) {
    frozen_ = frozen;
    for (auto& [name, p] : named_params("")) {
      Tensor<T> alias = p;
      alias.set_requires_grad(!frozen);
    }
  }

  NamedParams<T> named_params(const std::string& prefix) const {
    auto key = [&](const std::string& s) {
      return prefix.empty() ? s : prefix + "." + s;
    };
    NamedParams<T> out;
    out.emplace_back(key("patch_proj.w"), patch_w_);
    out.emplace_back(key("patch_proj.b"), patch_b_);
    out.emplace_back(key("cls"), cls_);
    out.emplace_back(key("pos"), pos_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      const std::string b = "block" + std::to_string(i) + ".";
      const auto& blk = blocks_[i];
      out.emplace_back(key(b + "ln1.g"), blk.ln1_g);
      out.emplace_back(key(b + "ln1.b"), blk.ln1_b);
      out.emplace_back(key(b + "attn.wq"), blk.attn.wq);
      out.emplace_back(key(b + "attn.bq"), blk.attn.bq);
      out.emplace_back(key(b + "attn.wk"), blk.attn.wk);
      out.emplace_back(key(b + "attn.bk"), blk.attn.bk);
      out.emplace_back(key(b + "attn.wv"), blk.attn.wv);
      out.emplace_back(key(b + "attn.bv"), blk.attn.bv);
      out.emplace_back(key(b + "attn.wo"), blk.attn.wo);
      out.emplace_back(key(b + "attn.bo"), blk.attn.bo);
      out.emplace_back(key(b + "ln2.g"), blk.ln2_g);
      out.emplace_back(key(b + "ln2.b"), blk.ln2_b);
      out.emplace_back(key(b + "mlp.w1"), blk.mlp_w1);
      out.emplace_back(key(b + "mlp.b1"), blk.mlp_b1);
      out.emplace_back(key(b + "mlp.w2"), blk.mlp_w2);
      out.emplace_back(key(b + "mlp.b2"), blk.mlp_b2);
    }
    out.emplace_back(key("final_norm.g"), final_g_);
    out.emplace_back(key("final_norm.b"), final_b_);
    return out;
  }

  // Per-patch projection plus positional rows; class token prepended with
  // positional row 0.
  Tensor<T> embed(const Tensor<T>& patches) const {
    if (patches.rank() != 3 || patches.dim(2) != cfg_.patch_dim())
      throw DimensionError("embed: expected [B, N, " +
                           std::to_string(cfg_.patch_dim()) + "], got " +
                           shape_str(patches.shape()));
    if (patches.dim(1) != cfg_.num_patches())
      throw DimensionError("embed: patch count " +
                           std::to_string(patches.dim(1)) +
                           " does not match config N " +
                           std::to_string(cfg_.num_patches()));
    Tensor<T> tok = linear(patches, patch_w_, patch_b_);
    tok = prepend_token(tok, cls_);
    return add(tok, pos_);
  }

  Tensor<T> forward(const Tensor<T>& tokens) const {
    if (tokens.rank() != 3 || tokens.dim(2) != cfg_.embed_dim)
      throw DimensionError("encoder forward: expected [B, S, " +
                           std::to_string(cfg_.embed_dim) + "], got " +
                           shape_str(tokens.shape()));
    Tensor<T> x = tokens;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      try {
        const auto& blk = blocks_[i];
        Tensor<T> h = layer_norm(x, blk.ln1_g, blk.ln1_b, kLayerNormEps);
        x = add(x, attention(h, blk.attn));
        Tensor<T> h2 = layer_norm(x, blk.ln2_g, blk.ln2_b, kLayerNormEps);
        Tensor<T> m = linear(gelu(linear(h2, blk.mlp_w1, blk.mlp_b1)),
                             blk.mlp_w2, blk.mlp_b2);
        x = add(x, m);
      } catch (const NumericError& e) {
        throw NumericError("encoder block " + std::to_string(i) + ": " +
                           e.what());
      }
    }
    return layer_norm(x, final_g_, final_b_, kLayerNormEps);
  }

  // Full unmasked pass from raw images; used by the linear probe and teacher
  // warm-up paths.
  Tensor<T> encode_images(const Tensor<T>& images) const {
    return forward(embed(patchify(images, cfg_.patch_size)));
  }

private:
  Tensor<T> attention(const Tensor<T>& x, const AttentionParams<T>& p) const {
    const std::int64_t b = x.dim(0), s = x.dim(1);
    const std::int64_t nh = cfg_.num_heads, hd = cfg_.head_dim();
    auto split = [&](const Tensor<T>& t) {
      return permute(reshape(t, {b, s, nh, hd}), {0, 2, 1, 3});
    };
    Tensor<T> q = split(linear(x, p.wq, p.bq));
    Tensor<T> k = split(linear(x, p.wk, p.bk));
    Tensor<T> v = split(linear(x, p.wv, p.bv));
    Tensor<T> scores =
        scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
    Tensor<T> probs = softmax(scores, 1.0);
    Tensor<T> ctx = permute(matmul(probs, v), {0, 2, 1, 3});
    return linear(reshape(ctx, {b, s, cfg_.embed_dim}), p.wo, p.bo);
  }

  ViTConfig cfg_;
  Tensor<T> patch_w_, patch_b_, cls_, pos_;
  std::vector<BlockParams<T>> blocks_;
  Tensor<T> final_g_, final_b_;
  bool frozen_ = false;
};

}  // namespace comad
