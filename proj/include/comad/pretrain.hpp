#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "comad/dataset.hpp"
#include "comad/distill.hpp"
#include "comad/masking.hpp"
#include "comad/optim.hpp"
#include "comad/ops.hpp"
#include "comad/rng.hpp"
#include "comad/tape.hpp"
#include "comad/tensor.hpp"
#include "comad/vit.hpp"

namespace comad {

struct ToyPretrainReport {
  double first_loss = 0;
  double last_loss = 0;
  double improvement() const {
    return first_loss > 0 ? 1.0 - last_loss / first_loss : 0.0;
  }
};

// Short masked-reconstruction warm-up: hide patches, predict their pixels
// from the visible context through a linear head, train encoder + head with
// AdamW at a flat rate. A second head makes the class token predict the
// image's mean patch, so the global representation carries an image summary
// rather than drifting untrained. Gives an encoder input-dependent structure
// without a full pretraining run.
template <typename T>
ToyPretrainReport toy_pretrain(ViTEncoder<T>& encoder, const Dataset<T>& ds,
                               double mask_ratio, std::int64_t steps,
                               std::int64_t batch_size, std::uint64_t seed) {
  if (mask_ratio <= 0.0 || mask_ratio >= 1.0)
    throw ConfigError("toy pretrain: mask ratio " + std::to_string(mask_ratio) +
                      " outside (0, 1)");
  if (steps < 2) throw ConfigError("toy pretrain: need at least 2 steps");
  if (ds.count() < batch_size)
    throw ConfigError("toy pretrain: dataset smaller than one batch");

  encoder.set_frozen(false);
  const ViTConfig& vcfg = encoder.config();
  const std::int64_t n = vcfg.num_patches();

  Rng init(mix_seed(seed, 0x9E70ull));
  Tensor<T> head_w =
      Tensor<T>::trunc_normal({vcfg.embed_dim, vcfg.patch_dim()}, init, 0.02);
  Tensor<T> head_b = Tensor<T>::zeros({vcfg.patch_dim()});
  Tensor<T> cls_w = Tensor<T>::trunc_normal({vcfg.embed_dim, n}, init, 0.02);
  Tensor<T> cls_b = Tensor<T>::zeros({n});
  head_w.set_requires_grad(true);
  head_b.set_requires_grad(true);
  cls_w.set_requires_grad(true);
  cls_b.set_requires_grad(true);

  NamedParams<T> params = encoder.named_params("encoder");
  params.push_back({"recon.w", head_w});
  params.push_back({"recon.b", head_b});
  params.push_back({"recon.cls_w", cls_w});
  params.push_back({"recon.cls_b", cls_b});
  AdamW<T> opt(params, 0.0, 0.9, 0.999);

  Rng pick(mix_seed(seed, 0x51C7ull));
  ToyPretrainReport report;
  for (std::int64_t k = 0; k < steps; ++k) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(batch_size));
    for (auto& i : idx)
      i = static_cast<std::int64_t>(
          pick.uniform_below(static_cast<std::uint64_t>(ds.count())));
    Tensor<T> patches = patchify(ds.batch(idx), vcfg.patch_size);

    Tensor<T> mask = detail::sample_mask_stream<T>(
        batch_size, n, mask_ratio, mix_seed(seed, 0x3A5Cull,
                                            static_cast<std::uint64_t>(k)));
    Tensor<T> hidden_weight({batch_size, n});
    for (std::int64_t b = 0; b < batch_size; ++b)
      for (std::int64_t j = 0; j < n; ++j)
        hidden_weight.at({b, j}) = T(1) - mask.at({b, j + 1});

    // Constant global target: the image thumbnail (each patch's mean value),
    // which keeps the low-frequency pattern the classes differ by.
    Tensor<T> gist({batch_size, n});
    {
      const T* pp = patches.data();
      T* pg = gist.data();
      const std::int64_t pd = vcfg.patch_dim();
      for (std::int64_t b = 0; b < batch_size; ++b)
        for (std::int64_t p = 0; p < n; ++p) {
          double acc = 0;
          for (std::int64_t j = 0; j < pd; ++j)
            acc += static_cast<double>(pp[(b * n + p) * pd + j]);
          pg[b * n + p] = static_cast<T>(acc / static_cast<double>(pd));
        }
    }

    opt.zero_grad();
    double loss_value = 0;
    {
      Tape<T> tape;
      typename Tape<T>::Scope scope(tape);
      Tensor<T> tokens =
          encoder.forward(apply_mask(encoder.embed(patches), mask));
      Tensor<T> recon = linear(drop_first_token(tokens), head_w, head_b);
      Tensor<T> diff = sub(recon, patches);
      Tensor<T> rows = scale(reduce_sum_last(mul(diff, diff)),
                             1.0 / static_cast<double>(vcfg.patch_dim()));
      Tensor<T> gdiff = sub(linear(first_token(tokens), cls_w, cls_b), gist);
      Tensor<T> gloss = scale(sum_all(mul(gdiff, gdiff)),
                              1.0 / static_cast<double>(gdiff.numel()));
      Tensor<T> loss =
          add(detail::masked_mean(rows, hidden_weight), gloss);
      loss_value = static_cast<double>(loss.item());
      tape.backward(loss);
    }
    opt.step(1e-3);
    if (k == 0) report.first_loss = loss_value;
    report.last_loss = loss_value;
  }
  return report;
}

}  // namespace comad
