#pragma once

#include <cstdint>
#include <string>

#include "comad/errors.hpp"
#include "comad/ops.hpp"
#include "comad/rng.hpp"
#include "comad/tensor.hpp"
#include "comad/vit.hpp"

namespace comad {

// Per-teacher alignment: tokens of width D_T map through one affine layer to
// D_S, then LayerNorm. The only trainable pieces on a teacher branch.
template <typename T>
class Adapter {
public:
  Adapter() = default;

  Adapter(std::int64_t d_teacher, std::int64_t d_student, Rng& rng)
      : d_teacher_(d_teacher), d_student_(d_student) {
    w_ = Tensor<T>::trunc_normal({d_teacher, d_student}, rng, 0.02);
    b_ = Tensor<T>::zeros({d_student});
    gamma_ = Tensor<T>::ones({d_student});
    beta_ = Tensor<T>::zeros({d_student});
    set_trainable(true);
  }

  Tensor<T> adapt(const Tensor<T>& teacher_tokens) const {
    if (teacher_tokens.shape().back() != d_teacher_)
      throw DimensionError("adapter: token width " +
                           std::to_string(teacher_tokens.shape().back()) +
                           " does not match teacher dim " +
                           std::to_string(d_teacher_));
    return layer_norm(linear(teacher_tokens, w_, b_), gamma_, beta_,
                      kLayerNormEps);
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
    return {{key("w"), w_},
            {key("b"), b_},
            {key("norm.g"), gamma_},
            {key("norm.b"), beta_}};
  }

  std::int64_t teacher_dim() const { return d_teacher_; }
  std::int64_t student_dim() const { return d_student_; }

private:
  std::int64_t d_teacher_ = 0, d_student_ = 0;
  Tensor<T> w_, b_, gamma_, beta_;
};

}  // namespace comad
