#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "comad/dataset.hpp"
#include "comad/errors.hpp"
#include "comad/ops.hpp"
#include "comad/tape.hpp"
#include "comad/tensor.hpp"
#include "comad/vit.hpp"

namespace comad {

// Class-token features for every sample, extracted without recording.
template <typename T>
Tensor<T> extract_cls_features(const ViTEncoder<T>& encoder,
                               const Dataset<T>& ds,
                               std::int64_t chunk = 64) {
  const std::int64_t count = ds.count();
  const std::int64_t d = encoder.config().embed_dim;
  Tensor<T> features({count, d});
  for (std::int64_t start = 0; start < count; start += chunk) {
    const std::int64_t stop = std::min(count, start + chunk);
    std::vector<std::int64_t> idx;
    for (std::int64_t i = start; i < stop; ++i) idx.push_back(i);
    Tensor<T> tokens = encoder.encode_images(ds.batch(idx));
    for (std::int64_t i = 0; i < stop - start; ++i)
      std::copy(tokens.data() + i * tokens.dim(1) * d,
                tokens.data() + i * tokens.dim(1) * d + d,
                features.data() + (start + i) * d);
  }
  return features;
}

// Trains one affine softmax classifier on frozen class-token features and
// reports top-1 accuracy on the held-out tail of the dataset. Features are
// standardized with train-split statistics before the fit.
template <typename T>
double linear_probe(const ViTEncoder<T>& encoder, const Dataset<T>& ds,
                    std::int64_t epochs, double lr, double split) {
  if (ds.num_classes < 2)
    throw ConfigError("linear probe: need at least 2 classes, got " +
                      std::to_string(ds.num_classes));
  if (split <= 0 || split >= 1)
    throw ConfigError("linear probe: split must be in (0, 1)");
  const std::int64_t count = ds.count();
  const std::int64_t train_n = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::llround(split * static_cast<double>(count))));
  const std::int64_t test_n = count - train_n;
  if (test_n < 1)
    throw ConfigError("linear probe: no held-out samples at split " +
                      std::to_string(split));

  Tensor<T> all = extract_cls_features(encoder, ds);
  const std::int64_t d = all.dim(1);

  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  std::vector<double> stdev(static_cast<std::size_t>(d), 0.0);
  for (std::int64_t i = 0; i < train_n; ++i)
    for (std::int64_t j = 0; j < d; ++j)
      mean[static_cast<std::size_t>(j)] += static_cast<double>(all.at({i, j}));
  for (auto& m : mean) m /= static_cast<double>(train_n);
  for (std::int64_t i = 0; i < train_n; ++i)
    for (std::int64_t j = 0; j < d; ++j) {
      const double co = static_cast<double>(all.at({i, j})) -
                        mean[static_cast<std::size_t>(j)];
      stdev[static_cast<std::size_t>(j)] += co * co;
    }
  for (auto& s : stdev) s = std::sqrt(s / static_cast<double>(train_n)) + 1e-8;

  auto standardize = [&](std::int64_t from, std::int64_t n) {
    Tensor<T> x({n, d});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < d; ++j)
        x.at({i, j}) = static_cast<T>(
            (static_cast<double>(all.at({from + i, j})) -
             mean[static_cast<std::size_t>(j)]) /
            stdev[static_cast<std::size_t>(j)]);
    return x;
  };
  Tensor<T> x_train = standardize(0, train_n);
  Tensor<T> x_test = standardize(train_n, test_n);
  std::vector<std::int64_t> y_train(ds.labels.begin(),
                                    ds.labels.begin() + train_n);
  std::vector<std::int64_t> y_test(ds.labels.begin() + train_n,
                                   ds.labels.end());

  const std::int64_t k = ds.num_classes;
  Tensor<T> w = Tensor<T>::zeros({d, k});
  Tensor<T> b = Tensor<T>::zeros({k});
  w.set_requires_grad(true);
  b.set_requires_grad(true);
  for (std::int64_t e = 0; e < epochs; ++e) {
    w.zero_grad();
    b.zero_grad();
    Tape<T> tape;
    typename Tape<T>::Scope scope(tape);
    Tensor<T> loss = nll_loss(log_softmax(add(matmul(x_train, w), b)), y_train);
    tape.backward(loss);
    for (std::int64_t i = 0; i < w.numel(); ++i)
      w.data()[i] -= static_cast<T>(lr * static_cast<double>(w.grad()[i]));
    for (std::int64_t i = 0; i < b.numel(); ++i)
      b.data()[i] -= static_cast<T>(lr * static_cast<double>(b.grad()[i]));
  }

  std::int64_t hits = 0;
  for (std::int64_t i = 0; i < test_n; ++i) {
    std::int64_t best = 0;
    double best_v = -1e300;
    for (std::int64_t j = 0; j < k; ++j) {
      double v = static_cast<double>(b.at({j}));
      for (std::int64_t c = 0; c < d; ++c)
        v += static_cast<double>(x_test.at({i, c})) *
             static_cast<double>(w.at({c, j}));
      if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    if (best == y_test[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(test_n);
}

}  // namespace comad
