#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "comad/errors.hpp"
#include "comad/io.hpp"
#include "comad/rng.hpp"
#include "comad/tensor.hpp"

namespace comad {

template <typename T>
struct Dataset {
  Tensor<T> images;  // [count, C, H, W], values in [0, 1]
  std::vector<std::int64_t> labels;
  std::int64_t num_classes = 0;

  std::int64_t count() const { return images.rank() ? images.dim(0) : 0; }

  Tensor<T> batch(const std::vector<std::int64_t>& indices) const {
    const std::int64_t c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::int64_t px = c * h * w;
    Tensor<T> out({static_cast<std::int64_t>(indices.size()), c, h, w});
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] < 0 || indices[i] >= count())
        throw DimensionError("batch: index " + std::to_string(indices[i]) +
                             " outside dataset of " + std::to_string(count()));
      std::copy(images.data() + indices[i] * px,
                images.data() + (indices[i] + 1) * px, out.data() + i * px);
    }
    return out;
  }
};

// Class-conditional images built from a few low-frequency sinusoids. The
// frequencies and channel amplitudes are fixed per class; each image draws
// its own phases, so class means in pixel space are flat and a linear readout
// of raw pixels carries no label signal. Fully determined by
// (seed, class_count, image_size).
template <typename T>
Dataset<T> make_synthetic_dataset(std::int64_t count, std::int64_t classes,
                                  std::int64_t image_size,
                                  std::int64_t channels, std::uint64_t seed) {
  if (count < 1 || classes < 1 || image_size < 1 || channels < 1)
    throw ConfigError("synthetic dataset: count, classes, image_size, "
                      "channels must all be >= 1");
  constexpr int kWaves = 3;
  struct Wave {
    double fx, fy;
    std::vector<double> amp;  // per channel
  };
  std::vector<std::vector<Wave>> class_waves(static_cast<std::size_t>(classes));
  for (std::int64_t y = 0; y < classes; ++y) {
    Rng crng(mix_seed(seed, 0xC1A55ull, static_cast<std::uint64_t>(y)));
    auto& waves = class_waves[static_cast<std::size_t>(y)];
    waves.resize(kWaves);
    for (auto& wv : waves) {
      wv.fx = static_cast<double>(1 + crng.uniform_below(3));
      wv.fy = static_cast<double>(1 + crng.uniform_below(3));
      wv.amp.resize(static_cast<std::size_t>(channels));
      for (auto& a : wv.amp)
        a = (crng.uniform() < 0.5 ? -1.0 : 1.0) * crng.uniform(0.4, 1.0);
    }
  }

  Dataset<T> ds;
  ds.num_classes = classes;
  ds.images = Tensor<T>({count, channels, image_size, image_size});
  ds.labels.resize(static_cast<std::size_t>(count));
  const double tau = 6.283185307179586476925286766559;
  const double inv = 1.0 / static_cast<double>(image_size);
  T* dst = ds.images.data();
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t label = i % classes;
    ds.labels[static_cast<std::size_t>(i)] = label;
    Rng irng(mix_seed(seed, 0x13A7ull, static_cast<std::uint64_t>(i)));
    std::vector<double> phase(kWaves);
    for (auto& ph : phase) ph = irng.uniform(0.0, tau);
    const auto& waves = class_waves[static_cast<std::size_t>(label)];
    for (std::int64_t c = 0; c < channels; ++c)
      for (std::int64_t py = 0; py < image_size; ++py)
        for (std::int64_t px = 0; px < image_size; ++px) {
          double v = 0;
          for (int k = 0; k < kWaves; ++k)
            v += waves[static_cast<std::size_t>(k)].amp[static_cast<std::size_t>(c)] *
                 std::sin(tau * (waves[static_cast<std::size_t>(k)].fx * px +
                                 waves[static_cast<std::size_t>(k)].fy * py) *
                              inv +
                          phase[static_cast<std::size_t>(k)]);
          v = 0.5 + 0.18 * v + 0.05 * irng.gaussian();
          dst[((i * channels + c) * image_size + py) * image_size + px] =
              static_cast<T>(std::clamp(v, 0.0, 1.0));
        }
  }
  return ds;
}

// On-disk layout: magic "CMAD", u32 version, u32 count, u16 H, u16 W,
// u8 channels, u8 label_width, then per sample label bytes (little-endian)
// followed by H*W*C pixel bytes, row-major, channel-last.
constexpr std::uint32_t kDatasetVersion = 1;

template <typename T>
void save_dataset_binary(const Dataset<T>& ds, const std::string& path) {
  if (ds.images.rank() != 4)
    throw ContractError("dataset save: images must be [count, C, H, W]");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const std::int64_t count = ds.images.dim(0), c = ds.images.dim(1),
                     h = ds.images.dim(2), w = ds.images.dim(3);
  bin::write_bytes(out, "CMAD", 4);
  bin::write_scalar<std::uint32_t>(out, kDatasetVersion);
  bin::write_scalar<std::uint32_t>(out, static_cast<std::uint32_t>(count));
  bin::write_scalar<std::uint16_t>(out, static_cast<std::uint16_t>(h));
  bin::write_scalar<std::uint16_t>(out, static_cast<std::uint16_t>(w));
  bin::write_scalar<std::uint8_t>(out, static_cast<std::uint8_t>(c));
  const std::uint8_t label_width = 2;
  bin::write_scalar<std::uint8_t>(out, label_width);
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(h * w * c));
  for (std::int64_t i = 0; i < count; ++i) {
    bin::write_scalar<std::uint16_t>(
        out, static_cast<std::uint16_t>(ds.labels[static_cast<std::size_t>(i)]));
    const T* img = ds.images.data() + i * c * h * w;
    for (std::int64_t py = 0; py < h; ++py)
      for (std::int64_t px = 0; px < w; ++px)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const double v = std::clamp(static_cast<double>(
                                          img[(ch * h + py) * w + px]),
                                      0.0, 1.0);
          pixels[static_cast<std::size_t>((py * w + px) * c + ch)] =
              static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
    bin::write_bytes(out, pixels.data(), pixels.size());
  }
  if (!out) throw IoError("write failed for '" + path + "'");
}

template <typename T>
Dataset<T> load_dataset_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset file '" + path + "'");
  char magic[4];
  bin::read_bytes(in, magic, 4, "dataset magic");
  if (std::string(magic, 4) != "CMAD")
    throw IoError("'" + path + "' is not a dataset file (bad magic)");
  const auto version = bin::read_scalar<std::uint32_t>(in, "dataset version");
  if (version != kDatasetVersion)
    throw IoError("dataset version " + std::to_string(version) +
                  " unsupported (expected " + std::to_string(kDatasetVersion) +
                  ")");
  const auto count = bin::read_scalar<std::uint32_t>(in, "sample count");
  const auto h = bin::read_scalar<std::uint16_t>(in, "height");
  const auto w = bin::read_scalar<std::uint16_t>(in, "width");
  const auto c = bin::read_scalar<std::uint8_t>(in, "channels");
  const auto label_width = bin::read_scalar<std::uint8_t>(in, "label width");
  if (count == 0 || h == 0 || w == 0 || c == 0)
    throw IoError("dataset header has zero dimension");
  if (label_width == 0 || label_width > 8)
    throw IoError("dataset label width " + std::to_string(label_width) +
                  " out of range");
  Dataset<T> ds;
  ds.images = Tensor<T>({count, c, h, w});
  ds.labels.resize(count);
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(h) * w * c);
  std::int64_t max_label = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint64_t label = 0;
    for (std::uint8_t byte = 0; byte < label_width; ++byte)
      label |= static_cast<std::uint64_t>(
                   bin::read_scalar<std::uint8_t>(in, "label")) << (8 * byte);
    ds.labels[i] = static_cast<std::int64_t>(label);
    max_label = std::max(max_label, ds.labels[i]);
    bin::read_bytes(in, pixels.data(), pixels.size(), "pixels");
    T* img = ds.images.data() + static_cast<std::int64_t>(i) * c * h * w;
    for (std::int64_t py = 0; py < h; ++py)
      for (std::int64_t px = 0; px < w; ++px)
        for (std::int64_t ch = 0; ch < c; ++ch)
          img[(ch * h + py) * w + px] = static_cast<T>(
              pixels[static_cast<std::size_t>((py * w + px) * c + ch)] / 255.0);
  }
  ds.num_classes = max_label + 1;
  return ds;
}

}  // namespace comad
