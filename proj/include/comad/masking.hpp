#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "comad/errors.hpp"
#include "comad/ops.hpp"
#include "comad/rng.hpp"
#include "comad/tensor.hpp"

namespace comad {

struct MaskSpec {
  double r_student = 0.75;
  std::vector<double> r_teachers{0.50, 0.40, 0.30};

  void validate() const {
    if (r_teachers.empty())
      throw ConfigError("mask: at least one teacher ratio required");
    auto in_range = [](double r) { return r >= 0.0 && r < 1.0; };
    if (!in_range(r_student))
      throw ConfigError("mask: student ratio " + std::to_string(r_student) +
                        " outside [0, 1)");
    double max_t = 0.0;
    for (double r : r_teachers) {
      if (!in_range(r))
        throw ConfigError("mask: teacher ratio " + std::to_string(r) +
                          " outside [0, 1)");
      max_t = std::max(max_t, r);
    }
    if (r_student <= max_t)
      throw ConfigError("mask: student ratio " + std::to_string(r_student) +
                        " must exceed max teacher ratio " +
                        std::to_string(max_t));
  }
};

inline std::int64_t kept_count(double ratio, std::int64_t n) {
  const std::int64_t kept =
      static_cast<std::int64_t>(std::llround((1.0 - ratio) * static_cast<double>(n)));
  return std::max<std::int64_t>(kept, 1);
}

// Per-sample binary keep masks over N+1 token positions; entry 0 (the class
// token) is always 1.
template <typename T>
struct MaskSet {
  Tensor<T> student;               // [B, N+1]
  std::vector<Tensor<T>> teachers; // M x [B, N+1]
  std::uint64_t rng_seed = 0;
};

namespace detail {

// One stream draws all B masks for a single view. Kept patch indices come
// from a partial Fisher-Yates shuffle, uniform without replacement.
template <typename T>
Tensor<T> sample_mask_stream(std::int64_t b, std::int64_t n, double ratio,
                             std::uint64_t stream_seed) {
  Tensor<T> mask = Tensor<T>::zeros({b, n + 1});
  Rng rng(stream_seed);
  const std::int64_t kept = kept_count(ratio, n);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < b; ++i) {
    std::iota(idx.begin(), idx.end(), 0);
    for (std::int64_t j = 0; j < kept; ++j) {
      const std::int64_t pick =
          j + static_cast<std::int64_t>(
                  rng.uniform_below(static_cast<std::uint64_t>(n - j)));
      std::swap(idx[static_cast<std::size_t>(j)],
                idx[static_cast<std::size_t>(pick)]);
    }
    T* row = mask.data() + i * (n + 1);
    row[0] = T(1);
    for (std::int64_t j = 0; j < kept; ++j)
      row[1 + idx[static_cast<std::size_t>(j)]] = T(1);
  }
  return mask;
}

}  // namespace detail

// Deterministic given (seed, B, N, spec). Stream k of the seed mix covers the
// student (k = 0) and each teacher (k = 1..M), so the draws are independent.
template <typename T>
MaskSet<T> sample_mask_set(std::int64_t b, std::int64_t n, const MaskSpec& spec,
                           std::uint64_t seed) {
  spec.validate();
  if (n < 1) throw ConfigError("mask: need at least one patch token");
  if (b < 1) throw ConfigError("mask: batch must be >= 1");
  MaskSet<T> set;
  set.rng_seed = seed;
  set.student =
      detail::sample_mask_stream<T>(b, n, spec.r_student, mix_seed(seed, 0));
  set.teachers.reserve(spec.r_teachers.size());
  for (std::size_t m = 0; m < spec.r_teachers.size(); ++m)
    set.teachers.push_back(detail::sample_mask_stream<T>(
        b, n, spec.r_teachers[m], mix_seed(seed, m + 1)));
  return set;
}

// Elementwise M * Z with the mask broadcast over channels; rows at zero
// entries become zero, sequence length is preserved.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& tokens, const Tensor<T>& mask) {
  if (tokens.rank() != 3 || mask.rank() != 2 ||
      tokens.dim(0) != mask.dim(0) || tokens.dim(1) != mask.dim(1))
    throw DimensionError("apply_mask: tokens " + shape_str(tokens.shape()) +
                         " vs mask " + shape_str(mask.shape()));
  const T* pm = mask.data();
  for (std::int64_t i = 0; i < mask.numel(); ++i)
    if (pm[i] != T(0) && pm[i] != T(1))
      throw ContractError("apply_mask: mask entry " + std::to_string(i) +
                          " is not binary");
  return mul(tokens, reshape(mask, {mask.dim(0), mask.dim(1), 1}));
}

}  // namespace comad
