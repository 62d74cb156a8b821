#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "comad/adapter.hpp"
#include "comad/config.hpp"
#include "comad/distill.hpp"
#include "comad/gating.hpp"
#include "comad/masking.hpp"
#include "comad/rng.hpp"
#include "comad/tensor.hpp"
#include "comad/vit.hpp"

namespace comad {

template <typename T>
struct StepOutput {
  Tensor<T> total;  // scalar loss, attached to the active tape
  LossReport report;
  GatingResult<T> gating;
  Tensor<T> fused;
  std::vector<Tensor<T>> adapted;
  Tensor<T> student_tokens;
};

// The graph treats some quantities as constants: the gating weights (unless
// gating.differentiable) and the target-side head parameters. A numeric
// gradient probe must hold those at fixed reference values while it perturbs
// a parameter, otherwise it differentiates a different function than the
// tape does. An empty alpha means "recompute normally".
template <typename T>
struct StopGradPins {
  Tensor<T> alpha;
  const ProjectionHead<T>* phi = nullptr;
  const ProjectionHead<T>* psi = nullptr;
};

// The whole distillation graph: one student, the configured teacher subset
// (frozen), one adapter per teacher, and the two projection heads. Teachers
// record nothing on the tape because none of their tensors require grad.
template <typename T>
class DistillModel {
public:
  explicit DistillModel(const Config& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng init_rng(mix_seed(cfg_.seed, 0x1217ull));
    student_ = ViTEncoder<T>(cfg_.student_vit(), init_rng);
    teacher_ids_ = cfg_.effective_teachers();
    for (std::int64_t id : teacher_ids_) {
      Rng trng(mix_seed(cfg_.seed, 0x7EACull, static_cast<std::uint64_t>(id)));
      teachers_.emplace_back(cfg_.teacher_vit(), trng);
      teachers_.back().set_frozen(true);
    }
    for (std::size_t k = 0; k < teachers_.size(); ++k)
      adapters_.emplace_back(cfg_.teacher_dim, cfg_.student_dim, init_rng);
    phi_ = ProjectionHead<T>(cfg_.student_dim, cfg_.projection_dim, init_rng);
    psi_ = ProjectionHead<T>(cfg_.student_dim, cfg_.projection_dim, init_rng);
    noise_slot_ = -1;
    for (std::size_t k = 0; k < teacher_ids_.size(); ++k)
      if (teacher_ids_[k] == cfg_.teacher_noise_index)
        noise_slot_ = static_cast<std::int64_t>(k);
  }

  const Config& config() const { return cfg_; }
  std::int64_t teacher_count() const {
    return static_cast<std::int64_t>(teachers_.size());
  }
  const std::vector<std::int64_t>& teacher_ids() const { return teacher_ids_; }
  ViTEncoder<T>& student() { return student_; }
  const ViTEncoder<T>& student() const { return student_; }
  ViTEncoder<T>& teacher(std::size_t k) { return teachers_[k]; }
  Adapter<T>& adapter(std::size_t k) { return adapters_[k]; }
  ProjectionHead<T>& phi() { return phi_; }
  ProjectionHead<T>& psi() { return psi_; }

  NamedParams<T> trainable_params() const {
    NamedParams<T> out = student_.named_params("student");
    for (std::size_t k = 0; k < adapters_.size(); ++k) {
      auto ap = adapters_[k].named_params(
          "adapter" + std::to_string(teacher_ids_[k]));
      out.insert(out.end(), ap.begin(), ap.end());
    }
    auto hp = phi_.named_params("phi");
    out.insert(out.end(), hp.begin(), hp.end());
    auto sp = psi_.named_params("psi");
    out.insert(out.end(), sp.begin(), sp.end());
    return out;
  }

  NamedParams<T> teacher_params(std::size_t k,
                                const std::string& prefix = "encoder") const {
    return teachers_[k].named_params(prefix);
  }

  std::vector<std::uint64_t> teacher_checksums() const {
    std::vector<std::uint64_t> sums;
    for (const auto& t : teachers_)
      for (const auto& [name, p] : t.named_params(""))
        sums.push_back(data_checksum(p));
    return sums;
  }

  MaskSet<T> sample_masks(std::int64_t batch, std::uint64_t seed) const {
    return sample_mask_set<T>(batch, cfg_.student_vit().num_patches(),
                              cfg_.mask_spec(), seed);
  }

  // One full forward pass over a batch. `student_images` and
  // `teacher_images` are the same tensor unless student-side augmentation is
  // on. When a noise-emitting teacher is configured, each sample's noise
  // features come from the stream (noise_seed, sample id), so a given sample
  // meets the same noise whenever it reappears; `sample_ids` carries the
  // dataset indices and defaults to batch position.
  StepOutput<T> forward_step(const Tensor<T>& student_images,
                             const Tensor<T>& teacher_images,
                             const MaskSet<T>& masks,
                             std::uint64_t noise_seed,
                             const StopGradPins<T>* pins = nullptr,
                             const std::vector<std::int64_t>* sample_ids =
                                 nullptr) const {
    if (static_cast<std::int64_t>(masks.teachers.size()) != teacher_count())
      throw DimensionError("forward: mask set has " +
                           std::to_string(masks.teachers.size()) +
                           " teacher masks for " +
                           std::to_string(teacher_count()) + " teachers");
    StepOutput<T> out;

    Tensor<T> s_patches = patchify(student_images, cfg_.patch_size);
    Tensor<T> s_tokens = apply_mask(student_.embed(s_patches), masks.student);
    out.student_tokens = student_.forward(s_tokens);

    Tensor<T> t_patches =
        student_images.same_storage(teacher_images)
            ? s_patches
            : patchify(teacher_images, cfg_.patch_size);
    out.adapted.reserve(teachers_.size());
    for (std::size_t k = 0; k < teachers_.size(); ++k) {
      Tensor<T> z;
      if (static_cast<std::int64_t>(k) == noise_slot_) {
        const std::int64_t batch = teacher_images.dim(0);
        const std::int64_t rows = cfg_.teacher_vit().num_patches() + 1;
        z = Tensor<T>({batch, rows, cfg_.teacher_dim});
        T* zp = z.data();
        for (std::int64_t b = 0; b < batch; ++b) {
          const std::uint64_t id = sample_ids
                                       ? static_cast<std::uint64_t>(
                                             (*sample_ids)[static_cast<std::size_t>(b)])
                                       : static_cast<std::uint64_t>(b);
          Rng nrng(mix_seed(noise_seed, 0x401Eull, id));
          for (std::int64_t i = 0; i < rows * cfg_.teacher_dim; ++i)
            zp[b * rows * cfg_.teacher_dim + i] =
                static_cast<T>(nrng.gaussian());
        }
      } else {
        Tensor<T> masked =
            apply_mask(teachers_[k].embed(t_patches), masks.teachers[k]);
        z = teachers_[k].forward(masked);
      }
      out.adapted.push_back(adapters_[k].adapt(z));
    }

    out.gating = gate_tokens(out.student_tokens, out.adapted, cfg_.gating);
    Tensor<T> weights = pins && pins->alpha.numel() > 0 ? pins->alpha
                                                        : out.gating.alpha;
    out.fused = fuse(weights, out.adapted);

    if (teachers_.size() == 1) {
      const T* a = out.fused.data();
      const T* b = out.adapted[0].data();
      for (std::int64_t i = 0; i < out.fused.numel(); ++i)
        if (a[i] != b[i])
          throw ContractError(
              "single-teacher fusion drifted from the adapted tokens at entry " +
              std::to_string(i));
    }

    TotalLoss<T> loss = total_loss(
        out.student_tokens, out.fused, masks.student, phi_, psi_,
        cfg_.loss_variant, cfg_.kl_direction, pins ? pins->phi : nullptr,
        pins ? pins->psi : nullptr);
    out.total = loss.total;
    out.report = loss.report;

    const std::int64_t m = teacher_count();
    const std::int64_t rows = out.gating.alpha.numel() / m;
    out.report.alpha_mean.assign(static_cast<std::size_t>(m), 0.0);
    const T* pa = out.gating.alpha.data();
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < m; ++j)
        out.report.alpha_mean[static_cast<std::size_t>(j)] +=
            static_cast<double>(pa[r * m + j]);
    for (auto& v : out.report.alpha_mean) v /= static_cast<double>(rows);
    return out;
  }

private:
  Config cfg_;
  ViTEncoder<T> student_;
  std::vector<std::int64_t> teacher_ids_;
  std::vector<ViTEncoder<T>> teachers_;
  std::vector<Adapter<T>> adapters_;
  ProjectionHead<T> phi_, psi_;
  std::int64_t noise_slot_ = -1;
};

}  // namespace comad
