#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "comad/errors.hpp"
#include "comad/rng.hpp"

namespace comad {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Row-major strides of a contiguous tensor.
inline Shape contiguous_strides(const Shape& s) {
  Shape st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a backward pass touches this tensor
  bool requires_grad = false;
};

// Dense row-major tensor with value semantics at the surface; copies alias the
// same storage. Once produced by an op a tensor is treated as immutable;
// only the optimizer writes into parameter storage, between steps.
template <typename T>
class Tensor {
public:
  using Scalar = T;

  Tensor() : impl_(std::make_shared<TensorImpl<T>>()) {}

  explicit Tensor(Shape shape)
      : impl_(std::make_shared<TensorImpl<T>>()) {
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<std::size_t>(shape_numel(impl_->shape)), T(0));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

  static Tensor scalar(T value) { return full({}, value); }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    Tensor t;
    if (static_cast<std::int64_t>(data.size()) != shape_numel(shape))
      throw DimensionError("from_data: " + std::to_string(data.size()) +
                           " values do not fill shape " + shape_str(shape));
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double sigma = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.impl_->data) v = static_cast<T>(rng.gaussian() * sigma);
    return t;
  }

  static Tensor trunc_normal(Shape shape, Rng& rng, double sigma) {
    Tensor t(std::move(shape));
    for (auto& v : t.impl_->data) v = static_cast<T>(rng.trunc_normal(sigma));
    return t;
  }

  const Shape& shape() const { return impl_->shape; }
  std::int64_t dim(std::size_t i) const { return impl_->shape[i]; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::int64_t numel() const { return shape_numel(impl_->shape); }

  T* data() { return impl_->data.data(); }
  const T* data() const { return impl_->data.data(); }
  std::vector<T>& vec() { return impl_->data; }
  const std::vector<T>& vec() const { return impl_->data; }

  T item() const {
    if (numel() != 1)
      throw ContractError("item(): tensor of shape " + shape_str(shape()) +
                          " is not a scalar");
    return impl_->data[0];
  }

  // Convenience indexed access for tests and small helpers.
  T& at(std::initializer_list<std::int64_t> idx) {
    return impl_->data[flat_index(idx)];
  }
  T at(std::initializer_list<std::int64_t> idx) const {
    return impl_->data[flat_index(idx)];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::vector<T>& grad() {
    ensure_grad();
    return impl_->grad;
  }
  const std::vector<T>& grad_or_empty() const { return impl_->grad; }

  void ensure_grad() {
    if (impl_->grad.empty())
      impl_->grad.assign(impl_->data.size(), T(0));
  }
  void zero_grad() { impl_->grad.clear(); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  std::shared_ptr<TensorImpl<T>>& impl() { return impl_; }
  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }

  // Deep copy with fresh storage (no grad, no flags carried over).
  Tensor clone_data() const {
    Tensor t;
    t.impl_->shape = impl_->shape;
    t.impl_->data = impl_->data;
    return t;
  }

private:
  std::size_t flat_index(std::initializer_list<std::int64_t> idx) const {
    const Shape st = contiguous_strides(impl_->shape);
    std::size_t flat = 0;
    std::size_t i = 0;
    for (auto v : idx) flat += static_cast<std::size_t>(v) * st[i++];
    return flat;
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

template <typename T>
inline void check_finite(const T* p, std::int64_t n, const char* where) {
  for (std::int64_t i = 0; i < n; ++i) {
    if (!std::isfinite(static_cast<double>(p[i])))
      throw NumericError(std::string("non-finite value in ") + where +
                         " at index " + std::to_string(i));
  }
}

template <typename T>
inline void check_finite(const Tensor<T>& t, const char* where) {
  check_finite(t.data(), t.numel(), where);
}

// FNV-1a over raw data bytes; used for frozen-parameter checksums.
template <typename T>
inline std::uint64_t data_checksum(const Tensor<T>& t) {
  std::uint64_t h = 14695981039346656037ull;
  const auto* bytes = reinterpret_cast<const unsigned char*>(t.data());
  const std::size_t n = static_cast<std::size_t>(t.numel()) * sizeof(T);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace comad
