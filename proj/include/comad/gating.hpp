#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "comad/errors.hpp"
#include "comad/ops.hpp"
#include "comad/tensor.hpp"

namespace comad {

enum class GatingVariant { full, affinity_only, consensus_only, uniform };

inline GatingVariant parse_gating_variant(const std::string& name) {
  if (name == "full") return GatingVariant::full;
  if (name == "affinity_only") return GatingVariant::affinity_only;
  if (name == "consensus_only") return GatingVariant::consensus_only;
  if (name == "uniform") return GatingVariant::uniform;
  throw ConfigError("gating.variant: unknown value '" + name +
                    "' (expected full, affinity_only, consensus_only, uniform)");
}

inline const char* gating_variant_name(GatingVariant v) {
  switch (v) {
    case GatingVariant::full: return "full";
    case GatingVariant::affinity_only: return "affinity_only";
    case GatingVariant::consensus_only: return "consensus_only";
    case GatingVariant::uniform: return "uniform";
  }
  return "?";
}

struct GatingConfig {
  double temperature = 0.1;
  GatingVariant variant = GatingVariant::full;
  // When false (default) the weights enter fusion as constants and the
  // cosine terms carry no gradient.
  bool differentiable = false;

  void validate() const {
    if (temperature <= 0)
      throw ConfigError("gating.temperature must be > 0, got " +
                        std::to_string(temperature));
  }
};

template <typename T>
struct GatingResult {
  Tensor<T> s;      // [B, N+1, M] student-teacher affinity
  Tensor<T> c;      // [B, N+1, M] inter-teacher consensus
  Tensor<T> e;      // [B, N+1, M] combined score entering the softmax
  Tensor<T> alpha;  // [B, N+1, M] fusion weights, rows sum to 1
};

constexpr double kCosineEps = 1e-8;

// s[b, n, m] = cosine of the student token against teacher m's adapted token
// at the same position.
template <typename T>
Tensor<T> affinity(const Tensor<T>& student,
                   const std::vector<Tensor<T>>& adapted) {
  if (adapted.empty()) throw ConfigError("gating: at least one teacher required");
  for (const auto& a : adapted)
    if (a.shape() != student.shape())
      throw DimensionError("gating affinity: teacher tokens " +
                           shape_str(a.shape()) + " vs student " +
                           shape_str(student.shape()));
  std::vector<Tensor<T>> cols;
  cols.reserve(adapted.size());
  for (const auto& a : adapted)
    cols.push_back(cosine_similarity(student, a, kCosineEps));
  return stack_last(cols);
}

// c[b, n, m] = mean cosine of teacher m's token against every other teacher;
// 0 when only one teacher is present.
template <typename T>
Tensor<T> consensus(const std::vector<Tensor<T>>& adapted) {
  if (adapted.empty()) throw ConfigError("gating: at least one teacher required");
  const std::size_t m = adapted.size();
  Shape token_shape(adapted[0].shape().begin(), adapted[0].shape().end() - 1);
  if (m == 1) {
    Shape oshape = token_shape;
    oshape.push_back(1);
    return Tensor<T>::zeros(oshape);
  }
  std::vector<std::vector<Tensor<T>>> pair(m, std::vector<Tensor<T>>(m));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      Tensor<T> cij = cosine_similarity(adapted[i], adapted[j], kCosineEps);
      pair[i][j] = cij;
      pair[j][i] = cij;
    }
  std::vector<Tensor<T>> cols;
  cols.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    Tensor<T> acc;
    bool first = true;
    for (std::size_t j = 0; j < m; ++j) {
      if (j == i) continue;
      acc = first ? pair[i][j] : add(acc, pair[i][j]);
      first = false;
    }
    cols.push_back(scale(acc, 1.0 / static_cast<double>(m - 1)));
  }
  return stack_last(cols);
}

// Combines affinity and consensus into fusion weights. The teacher axis is
// last; softmax temperature sharpens toward the best-scoring teacher.
template <typename T>
GatingResult<T> gate(const Tensor<T>& s, const Tensor<T>& c,
                     const GatingConfig& cfg) {
  cfg.validate();
  if (s.shape() != c.shape())
    throw DimensionError("gate: s " + shape_str(s.shape()) + " vs c " +
                         shape_str(c.shape()));
  GatingResult<T> out;
  out.s = s;
  out.c = c;
  switch (cfg.variant) {
    case GatingVariant::full: out.e = add(s, c); break;
    case GatingVariant::affinity_only: out.e = s; break;
    case GatingVariant::consensus_only: out.e = c; break;
    case GatingVariant::uniform: out.e = add(s, c); break;
  }
  if (cfg.variant == GatingVariant::uniform) {
    const std::int64_t m = s.shape().back();
    out.alpha = Tensor<T>::full(s.shape(), static_cast<T>(1.0 / static_cast<double>(m)));
    return out;
  }
  Tensor<T> alpha = softmax(out.e, cfg.temperature);
  out.alpha = cfg.differentiable ? alpha : detach(alpha);
  return out;
}

// Convenience wrapper running the full pipeline on adapted teacher tokens.
template <typename T>
GatingResult<T> gate_tokens(const Tensor<T>& student,
                            const std::vector<Tensor<T>>& adapted,
                            const GatingConfig& cfg) {
  return gate(affinity(student, adapted), consensus(adapted), cfg);
}

}  // namespace comad
