#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "comad/errors.hpp"
#include "comad/tensor.hpp"
#include "comad/vit.hpp"

namespace comad {

// Linear warmup to lr_peak over round(warmup_fraction * total) steps, then a
// half-cosine decay reaching 0 at total_steps.
inline double lr_at(std::int64_t step, std::int64_t total_steps, double lr_peak,
                    double warmup_fraction) {
  if (total_steps <= 0) return 0.0;
  const auto warmup = static_cast<std::int64_t>(
      std::llround(warmup_fraction * static_cast<double>(total_steps)));
  if (warmup > 0 && step < warmup)
    return lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
  const std::int64_t span = std::max<std::int64_t>(total_steps - warmup, 1);
  double progress = static_cast<double>(step - warmup) / static_cast<double>(span);
  progress = std::min(std::max(progress, 0.0), 1.0);
  return lr_peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// AdamW with decoupled weight decay. Decay skips rank<2 tensors (biases,
// norm scales) plus the class-token and positional tables, per the usual ViT
// exemptions. Parameters with no gradient this step are treated as
// zero-gradient: moments decay and weight decay still applies.
template <typename T>
class AdamW {
public:
  AdamW() = default;

  AdamW(NamedParams<T> params, double weight_decay, double beta1, double beta2,
        double clip_norm = 0.0, double eps = 1e-8)
      : wd_(weight_decay), beta1_(beta1), beta2_(beta2), clip_norm_(clip_norm),
        eps_(eps) {
    slots_.reserve(params.size());
    for (auto& [name, p] : params) {
      Slot slot;
      slot.name = name;
      slot.param = p;
      slot.m.assign(static_cast<std::size_t>(p.numel()), T(0));
      slot.v.assign(static_cast<std::size_t>(p.numel()), T(0));
      slot.decay = p.rank() >= 2 && !ends_with(name, ".cls") &&
                   !ends_with(name, ".pos");
      slots_.push_back(std::move(slot));
    }
  }

  std::uint64_t step_count() const { return t_; }
  void set_step_count(std::uint64_t t) { t_ = t; }

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    names.reserve(slots_.size());
    for (const auto& s : slots_) names.push_back(s.name);
    return names;
  }

  void zero_grad() {
    for (auto& s : slots_) s.param.zero_grad();
  }

  void step(double lr) {
    for (const auto& s : slots_) {
      const auto& g = s.param.grad_or_empty();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (!std::isfinite(static_cast<double>(g[i])))
          throw NumericError("gradient for parameter '" + s.name +
                             "' is not finite at entry " + std::to_string(i));
    }
    if (clip_norm_ > 0) clip_gradients();
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& s : slots_) {
      const auto& g = s.param.grad_or_empty();
      T* p = s.param.data();
      const std::size_t n = s.m.size();
      const double decay = s.decay ? lr * wd_ : 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = i < g.size() ? static_cast<double>(g[i]) : 0.0;
        const double m = beta1_ * static_cast<double>(s.m[i]) + (1.0 - beta1_) * gi;
        const double v = beta2_ * static_cast<double>(s.v[i]) + (1.0 - beta2_) * gi * gi;
        s.m[i] = static_cast<T>(m);
        s.v[i] = static_cast<T>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_);
        double pv = static_cast<double>(p[i]);
        pv -= lr * update;
        pv -= decay * pv;
        p[i] = static_cast<T>(pv);
      }
    }
  }

  // Moment arrays exposed for checkpointing, named after their parameters.
  NamedParams<T> state_tensors() const {
    NamedParams<T> out;
    out.reserve(2 * slots_.size());
    for (const auto& s : slots_) {
      Shape shape = s.param.shape();
      out.emplace_back("optim.m." + s.name,
                       Tensor<T>::from_data(shape, s.m));
      out.emplace_back("optim.v." + s.name,
                       Tensor<T>::from_data(shape, s.v));
    }
    return out;
  }

  void restore_state(const NamedParams<T>& tensors, std::uint64_t step) {
    for (auto& s : slots_) {
      const Tensor<T>* m = nullptr;
      const Tensor<T>* v = nullptr;
      for (const auto& [name, t] : tensors) {
        if (name == "optim.m." + s.name) m = &t;
        if (name == "optim.v." + s.name) v = &t;
      }
      if (!m || !v)
        throw IoError("optimizer state for '" + s.name +
                      "' missing from checkpoint");
      if (m->numel() != static_cast<std::int64_t>(s.m.size()) ||
          v->numel() != static_cast<std::int64_t>(s.v.size()))
        throw IoError("optimizer state for '" + s.name + "' has wrong size");
      s.m.assign(m->data(), m->data() + m->numel());
      s.v.assign(v->data(), v->data() + v->numel());
    }
    t_ = step;
  }

private:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<T> m, v;
    bool decay = true;
  };

  static bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

  void clip_gradients() {
    double sq = 0;
    for (const auto& s : slots_) {
      const auto& g = s.param.grad_or_empty();
      for (T gv : g) sq += static_cast<double>(gv) * static_cast<double>(gv);
    }
    const double norm = std::sqrt(sq);
    if (norm <= clip_norm_) return;
    const double factor = clip_norm_ / norm;
    for (auto& s : slots_) {
      Tensor<T> alias = s.param;
      if (!alias.has_grad()) continue;
      for (T& gv : alias.grad()) gv = static_cast<T>(gv * factor);
    }
  }

  std::vector<Slot> slots_;
  double wd_ = 0.05, beta1_ = 0.9, beta2_ = 0.999, clip_norm_ = 0.0,
         eps_ = 1e-8;
  std::uint64_t t_ = 0;
};

}  // namespace comad
