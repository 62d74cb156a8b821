#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "comad/errors.hpp"
#include "comad/ops.hpp"
#include "comad/rng.hpp"
#include "comad/tensor.hpp"
#include "comad/vit.hpp"

namespace comad {

enum class LossVariant { dual_kl, token_only, spatial_only, dual_mse };

inline LossVariant parse_loss_variant(const std::string& name) {
  if (name == "dual_kl") return LossVariant::dual_kl;
  if (name == "token_only") return LossVariant::token_only;
  if (name == "spatial_only") return LossVariant::spatial_only;
  if (name == "dual_mse") return LossVariant::dual_mse;
  throw ConfigError("loss.variant: unknown value '" + name +
                    "' (expected dual_kl, token_only, spatial_only, dual_mse)");
}

enum class KlDirection { student_first, teacher_first };

inline KlDirection parse_kl_direction(const std::string& name) {
  if (name == "student_first") return KlDirection::student_first;
  if (name == "teacher_first") return KlDirection::teacher_first;
  throw ConfigError("loss.kl_direction: unknown value '" + name +
                    "' (expected student_first, teacher_first)");
}

// Two affine layers with GELU between, D_S -> D_S -> K. One instance maps
// token vectors to category logits (token loss), another maps channel
// vectors (spatial loss). The same weights serve the student and the fused
// target; on the target side the weights enter as constants so the head
// trains only against the student branch while the gradient still passes
// through to the fused tokens.
template <typename T>
class ProjectionHead {
public:
  ProjectionHead() = default;

  ProjectionHead(std::int64_t dim, std::int64_t categories, Rng& rng) {
    w1_ = Tensor<T>::trunc_normal({dim, dim}, rng,
                                  std::sqrt(1.0 / static_cast<double>(dim)));
    b1_ = Tensor<T>::zeros({dim});
    w2_ = Tensor<T>::trunc_normal({dim, categories}, rng,
                                  std::sqrt(1.0 / static_cast<double>(dim)));
    b2_ = Tensor<T>::zeros({categories});
    set_trainable(true);
  }

  Tensor<T> forward(const Tensor<T>& x) const {
    return linear(gelu(linear(x, w1_, b1_)), w2_, b2_);
  }

  // Same map with the parameters detached from the graph.
  Tensor<T> forward_frozen_params(const Tensor<T>& x) const {
    return linear(gelu(linear(x, detach(w1_), detach(b1_))), detach(w2_),
                  detach(b2_));
  }

  // Deep copy of the current weights, off the graph. Numeric gradient
  // checks evaluate the loss with the target-side head held at such a
  // snapshot so the probe function matches what the tape differentiates.
  ProjectionHead<T> snapshot() const {
    ProjectionHead<T> copy;
    copy.w1_ = w1_.clone_data();
    copy.b1_ = b1_.clone_data();
    copy.w2_ = w2_.clone_data();
    copy.b2_ = b2_.clone_data();
    return copy;
  }

  void set_trainable(bool trainable) {
    for (auto& [name, p] : named_params("")) {
      Tensor<T> alias = p;
      alias.set_requires_grad(trainable);
    }
  }

  NamedParams<T> named_params(const std::string& prefix) const {
    auto key = [&](const std::string& s) {
      return prefix.empty() ? s : prefix + "." + s;
    };
    return {{key("w1"), w1_}, {key("b1"), b1_}, {key("w2"), w2_},
            {key("b2"), b2_}};
  }

  std::int64_t categories() const { return b2_.numel(); }

private:
  Tensor<T> w1_, b1_, w2_, b2_;
};

struct LossReport {
  double l_token = 0;
  double l_spatial = 0;
  double total = 0;
  std::int64_t visible_count = 0;
  std::vector<double> alpha_mean;
};

// z^T[b, n] = sum_m alpha[b, n, m] * adapted[m][b, n]; each fused token is a
// convex combination of the adapted teacher tokens.
template <typename T>
Tensor<T> fuse(const Tensor<T>& alpha, const std::vector<Tensor<T>>& adapted) {
  if (alpha.rank() < 1 ||
      alpha.shape().back() != static_cast<std::int64_t>(adapted.size()))
    throw DimensionError("fuse: weight count " +
                         std::to_string(alpha.shape().back()) +
                         " does not match " + std::to_string(adapted.size()) +
                         " teachers");
  {
    const std::int64_t m = alpha.shape().back();
    const std::int64_t rows = alpha.numel() / m;
    const T* pa = alpha.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      double sum = 0;
      for (std::int64_t j = 0; j < m; ++j) sum += pa[r * m + j];
      if (std::abs(sum - 1.0) > 1e-5)
        throw ContractError("fuse: weight row " + std::to_string(r) +
                            " sums to " + std::to_string(sum));
    }
  }
  const std::int64_t m = alpha.shape().back();
  Tensor<T> fused;
  for (std::int64_t j = 0; j < m; ++j) {
    Tensor<T> am = index_last(alpha, j);
    Shape wshape = am.shape();
    wshape.push_back(1);
    Tensor<T> term = mul(adapted[static_cast<std::size_t>(j)],
                         reshape(am, wshape));
    fused = j == 0 ? term : add(fused, term);
  }
  return fused;
}

namespace detail {

// Mean over channels of (a - b)^2, one value per token position.
template <typename T>
Tensor<T> mse_rows(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> d = sub(a, b);
  return scale(reduce_sum_last(mul(d, d)),
               1.0 / static_cast<double>(a.shape().back()));
}

template <typename T>
Tensor<T> kl_rows(const Tensor<T>& student_logits,
                  const Tensor<T>& target_logits, KlDirection dir) {
  return dir == KlDirection::student_first
             ? kl_from_logits(student_logits, target_logits)
             : kl_from_logits(target_logits, student_logits);
}

// Weighted mean over token positions: sum(values * weights) / sum(weights).
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& values, const Tensor<T>& weights) {
  double denom = 0;
  const T* pw = weights.data();
  for (std::int64_t i = 0; i < weights.numel(); ++i)
    denom += static_cast<double>(pw[i]);
  if (denom <= 0) throw ContractError("masked mean: no visible positions");
  return scale(sum_all(mul(values, weights)), 1.0 / denom);
}

}  // namespace detail

// Mean over student-visible positions of the categorical divergence between
// projected student tokens and projected fused tokens. The normalizer is the
// total count of visible positions across the batch.
template <typename T>
Tensor<T> token_loss(const Tensor<T>& student_tokens, const Tensor<T>& fused,
                     const Tensor<T>& student_mask,
                     const ProjectionHead<T>& phi,
                     KlDirection dir = KlDirection::student_first,
                     const ProjectionHead<T>* target_head = nullptr) {
  if (student_tokens.shape() != fused.shape())
    throw DimensionError("token loss: student " +
                         shape_str(student_tokens.shape()) + " vs fused " +
                         shape_str(fused.shape()));
  if (student_mask.rank() != 2 ||
      student_mask.dim(0) != student_tokens.dim(0) ||
      student_mask.dim(1) != student_tokens.dim(1))
    throw DimensionError("token loss: mask " + shape_str(student_mask.shape()) +
                         " vs tokens " + shape_str(student_tokens.shape()));
  const ProjectionHead<T>& tgt = target_head ? *target_head : phi;
  Tensor<T> kl = detail::kl_rows(phi.forward(student_tokens),
                                 tgt.forward_frozen_params(fused), dir);
  return detail::masked_mean(kl, student_mask);
}

// MSE form of the token loss, on raw tokens.
template <typename T>
Tensor<T> token_loss_mse(const Tensor<T>& student_tokens, const Tensor<T>& fused,
                         const Tensor<T>& student_mask) {
  return detail::masked_mean(detail::mse_rows(student_tokens, fused),
                             student_mask);
}

// Channelwise divergence between the student's and the fused target's patch
// grids. Dropping the class token, each patch token is the channel vector at
// one spatial site of a sqrt(N) x sqrt(N) feature map; the loss averages the
// per-site divergence over all sites and the batch.
template <typename T>
Tensor<T> spatial_loss(const Tensor<T>& student_tokens, const Tensor<T>& fused,
                       const ProjectionHead<T>& psi,
                       KlDirection dir = KlDirection::student_first,
                       const ProjectionHead<T>* target_head = nullptr) {
  Tensor<T> sp = drop_first_token(student_tokens);
  Tensor<T> tp = drop_first_token(fused);
  const ProjectionHead<T>& tgt = target_head ? *target_head : psi;
  Tensor<T> kl = detail::kl_rows(psi.forward(sp),
                                 tgt.forward_frozen_params(tp), dir);
  return scale(sum_all(kl), 1.0 / static_cast<double>(kl.numel()));
}

template <typename T>
Tensor<T> spatial_loss_mse(const Tensor<T>& student_tokens,
                           const Tensor<T>& fused) {
  Tensor<T> rows = detail::mse_rows(drop_first_token(student_tokens),
                                    drop_first_token(fused));
  return scale(sum_all(rows), 1.0 / static_cast<double>(rows.numel()));
}

template <typename T>
struct TotalLoss {
  Tensor<T> total;
  LossReport report;
};

// Assembles the configured objective. token_only and spatial_only skip the
// other term entirely (reported as 0, no gradient); dual_mse swaps both KL
// terms for raw-feature MSE with identical masking. phi_target / psi_target,
// when given, replace the heads on the fused side (used by gradient checks
// to hold the detached target maps constant).
template <typename T>
TotalLoss<T> total_loss(const Tensor<T>& student_tokens, const Tensor<T>& fused,
                        const Tensor<T>& student_mask,
                        const ProjectionHead<T>& phi,
                        const ProjectionHead<T>& psi, LossVariant variant,
                        KlDirection dir = KlDirection::student_first,
                        const ProjectionHead<T>* phi_target = nullptr,
                        const ProjectionHead<T>* psi_target = nullptr) {
  TotalLoss<T> out;
  Tensor<T> lt, ls;
  const bool want_token = variant != LossVariant::spatial_only;
  const bool want_spatial = variant != LossVariant::token_only;
  if (variant == LossVariant::dual_mse) {
    lt = token_loss_mse(student_tokens, fused, student_mask);
    ls = spatial_loss_mse(student_tokens, fused);
  } else {
    if (want_token)
      lt = token_loss(student_tokens, fused, student_mask, phi, dir, phi_target);
    if (want_spatial)
      ls = spatial_loss(student_tokens, fused, psi, dir, psi_target);
  }
  if (want_token && want_spatial)
    out.total = add(lt, ls);
  else
    out.total = want_token ? lt : ls;
  out.report.l_token = want_token ? static_cast<double>(lt.item()) : 0.0;
  out.report.l_spatial = want_spatial ? static_cast<double>(ls.item()) : 0.0;
  out.report.total = static_cast<double>(out.total.item());
  const T* pm = student_mask.data();
  for (std::int64_t i = 0; i < student_mask.numel(); ++i)
    out.report.visible_count += pm[i] != T(0) ? 1 : 0;
  return out;
}

}  // namespace comad
