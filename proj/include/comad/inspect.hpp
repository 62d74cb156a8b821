#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "comad/dataset.hpp"
#include "comad/model.hpp"

namespace comad {

struct GatingStats {
  std::int64_t teacher_id = 0;
  std::int64_t count = 0;  // token positions observed
  double mean = 0;
  double stddev = 0;
  double min = 0;
  double max = 0;
  std::vector<std::int64_t> histogram;  // 16 equal bins over [0, 1]
};

// Runs `batches` forward passes without recording and aggregates the fusion
// weight of every token position, separately per teacher.
template <typename T>
std::vector<GatingStats> collect_gating_stats(const DistillModel<T>& model,
                                              const Dataset<T>& ds,
                                              std::int64_t batches,
                                              std::int64_t batch_size,
                                              std::uint64_t seed) {
  if (batches < 1) throw ConfigError("inspect: need at least one batch");
  if (ds.count() < batch_size)
    throw ConfigError("inspect: dataset smaller than one batch");
  const std::int64_t m = model.teacher_count();

  std::vector<GatingStats> stats(static_cast<std::size_t>(m));
  std::vector<double> sum(static_cast<std::size_t>(m), 0.0);
  std::vector<double> sum_sq(static_cast<std::size_t>(m), 0.0);
  for (std::int64_t j = 0; j < m; ++j) {
    auto& st = stats[static_cast<std::size_t>(j)];
    st.teacher_id = model.teacher_ids()[static_cast<std::size_t>(j)];
    st.min = 2.0;
    st.max = -1.0;
    st.histogram.assign(16, 0);
  }

  for (std::int64_t k = 0; k < batches; ++k) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(batch_size));
    for (std::size_t i = 0; i < idx.size(); ++i)
      idx[i] = (k * batch_size + static_cast<std::int64_t>(i)) % ds.count();
    MaskSet<T> masks = model.sample_masks(
        batch_size, mix_seed(seed, 0x6D41ull, static_cast<std::uint64_t>(k)));
    Tensor<T> images = ds.batch(idx);
    StepOutput<T> out = model.forward_step(
        images, images, masks, mix_seed(seed, 0x401Eull, 0), nullptr, &idx);

    const T* pa = out.gating.alpha.data();
    const std::int64_t rows = out.gating.alpha.numel() / m;
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < m; ++j) {
        const double a = static_cast<double>(pa[r * m + j]);
        auto& st = stats[static_cast<std::size_t>(j)];
        sum[static_cast<std::size_t>(j)] += a;
        sum_sq[static_cast<std::size_t>(j)] += a * a;
        st.min = std::min(st.min, a);
        st.max = std::max(st.max, a);
        const auto bin = static_cast<std::size_t>(std::clamp<std::int64_t>(
            static_cast<std::int64_t>(a * 16.0), 0, 15));
        ++st.histogram[bin];
        ++st.count;
      }
  }

  for (std::int64_t j = 0; j < m; ++j) {
    auto& st = stats[static_cast<std::size_t>(j)];
    const double n = static_cast<double>(st.count);
    st.mean = st.min == st.max ? st.min : sum[static_cast<std::size_t>(j)] / n;
    const double var = std::max(
        0.0, sum_sq[static_cast<std::size_t>(j)] / n - st.mean * st.mean);
    st.stddev = st.min == st.max ? 0.0 : std::sqrt(var);
  }
  return stats;
}

}  // namespace comad
