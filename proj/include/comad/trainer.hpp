#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "comad/checkpoint.hpp"
#include "comad/config.hpp"
#include "comad/dataset.hpp"
#include "comad/model.hpp"
#include "comad/optim.hpp"
#include "comad/tape.hpp"

namespace comad {

// Per-sample channel jitter for the student view: multiplicative contrast
// around 0.5 plus a brightness shift, clamped back to [0, 1].
template <typename T>
Tensor<T> jitter_images(const Tensor<T>& images, Rng& rng) {
  Tensor<T> out = images.clone_data();
  const std::int64_t b = images.dim(0), c = images.dim(1),
                     hw = images.dim(2) * images.dim(3);
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double scale = rng.uniform(0.8, 1.2);
      const double shift = rng.uniform(-0.1, 0.1);
      T* px = out.data() + (i * c + ch) * hw;
      for (std::int64_t j = 0; j < hw; ++j) {
        const double v = (static_cast<double>(px[j]) - 0.5) * scale + 0.5 + shift;
        px[j] = static_cast<T>(std::clamp(v, 0.0, 1.0));
      }
    }
  return out;
}

template <typename T>
class Trainer {
public:
  Trainer(const Config& cfg, std::string out_dir)
      : cfg_(cfg), out_dir_(std::move(out_dir)), model_(cfg),
        jitter_rng_(mix_seed(cfg.seed, 0x1177ull)) {
    dataset_ = load_data();
    steps_per_epoch_ = dataset_.count() / cfg_.batch_size;
    if (steps_per_epoch_ < 1)
      throw ConfigError("dataset of " + std::to_string(dataset_.count()) +
                        " samples yields no full batch of " +
                        std::to_string(cfg_.batch_size));
    total_steps_ = cfg_.steps > 0 ? cfg_.steps
                                  : cfg_.epochs * steps_per_epoch_;
    optim_ = AdamW<T>(model_.trainable_params(), cfg_.weight_decay, cfg_.beta1,
                      cfg_.beta2, cfg_.clip_norm);
  }

  DistillModel<T>& model() { return model_; }
  const Dataset<T>& dataset() const { return dataset_; }
  std::int64_t total_steps() const { return total_steps_; }
  std::int64_t current_step() const { return step_; }
  AdamW<T>& optimizer() { return optim_; }

  void load_teachers(const std::string& dir) {
    for (std::size_t k = 0; k < static_cast<std::size_t>(model_.teacher_count());
         ++k) {
      const std::int64_t id = model_.teacher_ids()[k];
      const std::string path =
          (std::filesystem::path(dir) /
           ("teacher_" + std::to_string(id) + ".ckpt")).string();
      Checkpoint<T> ck = load_checkpoint<T>(path);
      restore_params(ck, model_.teacher_params(k));
    }
  }

  void resume(const std::string& ckpt_path) {
    Checkpoint<T> ck = load_checkpoint<T>(ckpt_path);
    restore_params(ck, model_.trainable_params());
    optim_.restore_state(ck.tensors, ck.step);
    if (!ck.rng_state.empty()) jitter_rng_.deserialize(ck.rng_state);
    step_ = static_cast<std::int64_t>(ck.step);
  }

  void save(const std::string& path) const {
    Checkpoint<T> ck;
    ck.config_digest = cfg_.digest();
    ck.tensors = model_.trainable_params();
    auto st = optim_.state_tensors();
    ck.tensors.insert(ck.tensors.end(), st.begin(), st.end());
    ck.rng_state = jitter_rng_.serialize();
    ck.step = static_cast<std::uint64_t>(step_);
    save_checkpoint(path, ck);
  }

  // Deterministic batch for step k: a seeded shuffle fixes each epoch's
  // visit order, consecutive slices form the batches.
  std::vector<std::int64_t> batch_indices(std::int64_t step) const {
    const std::int64_t epoch = step / steps_per_epoch_;
    const std::int64_t pos = step % steps_per_epoch_;
    std::vector<std::int64_t> perm(static_cast<std::size_t>(dataset_.count()));
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(mix_seed(cfg_.seed, 0x9E3Dull, static_cast<std::uint64_t>(epoch)));
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[rng.uniform_below(i)]);
    return {perm.begin() + pos * cfg_.batch_size,
            perm.begin() + (pos + 1) * cfg_.batch_size};
  }

  LossReport train_one_step() {
    const std::int64_t k = step_;
    const std::vector<std::int64_t> indices = batch_indices(k);
    Tensor<T> images = dataset_.batch(indices);
    Tensor<T> student_view =
        cfg_.student_jitter ? jitter_images(images, jitter_rng_) : images;
    MaskSet<T> masks =
        model_.sample_masks(cfg_.batch_size, mix_seed(cfg_.seed, 0x6D41ull,
                                                      static_cast<std::uint64_t>(k)));
    // Step-independent: a sample keeps its noise features across epochs.
    const std::uint64_t noise_seed = mix_seed(cfg_.seed, 0x401Eull, 0);

    optim_.zero_grad();
    StepOutput<T> out;
    {
      Tape<T> tape;
      typename Tape<T>::Scope scope(tape);
      out = model_.forward_step(student_view, images, masks, noise_seed,
                                nullptr, &indices);
      tape.backward(out.total);
    }
    optim_.step(lr_at(k, total_steps_, cfg_.lr_peak, cfg_.warmup_fraction));
    last_lr_ = lr_at(k, total_steps_, cfg_.lr_peak, cfg_.warmup_fraction);
    ++step_;
    return out.report;
  }

  // Runs to total_steps, appending one JSON object per step to
  // out_dir/metrics.jsonl and writing out_dir/checkpoint.ckpt at the end.
  std::vector<LossReport> run() {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir_);
    const std::string metrics_path =
        (fs::path(out_dir_) / "metrics.jsonl").string();
    std::ofstream metrics(metrics_path,
                          step_ > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics) throw IoError("cannot open '" + metrics_path + "'");
    std::vector<LossReport> reports;
    while (step_ < total_steps_) {
      LossReport r = train_one_step();
      nlohmann::json line;
      line["step"] = step_ - 1;
      line["lr"] = last_lr_;
      line["l_token"] = r.l_token;
      line["l_spatial"] = r.l_spatial;
      line["total"] = r.total;
      line["alpha_mean"] = r.alpha_mean;
      metrics << line.dump() << "\n";
      if (!metrics) throw IoError("metrics write failed");
      reports.push_back(std::move(r));
    }
    metrics.flush();
    save((fs::path(out_dir_) / "checkpoint.ckpt").string());
    return reports;
  }

private:
  Dataset<T> load_data() const {
    if (cfg_.data_kind == "synthetic")
      return make_synthetic_dataset<T>(cfg_.data_count, cfg_.data_classes,
                                       cfg_.image_size, cfg_.channels,
                                       cfg_.data_seed);
    Dataset<T> ds = load_dataset_binary<T>(cfg_.data_path);
    if (ds.images.dim(1) != cfg_.channels ||
        ds.images.dim(2) != cfg_.image_size ||
        ds.images.dim(3) != cfg_.image_size)
      throw ConfigError("dataset '" + cfg_.data_path + "' has geometry " +
                        shape_str(ds.images.shape()) +
                        " incompatible with the configured model");
    return ds;
  }

  Config cfg_;
  std::string out_dir_;
  DistillModel<T> model_;
  Dataset<T> dataset_;
  AdamW<T> optim_;
  Rng jitter_rng_;
  std::int64_t steps_per_epoch_ = 0;
  std::int64_t total_steps_ = 0;
  std::int64_t step_ = 0;
  double last_lr_ = 0;
};

}  // namespace comad
