#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "comad/errors.hpp"
#include "comad/gemm.hpp"
#include "comad/tape.hpp"
#include "comad/tensor.hpp"

namespace comad {

namespace detail {

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) +
                           " and " + shape_str(b) + " do not broadcast");
    out[i] = std::max(da, db);
  }
  return out;
}

// Right-aligned strides of `in` against broadcast shape `out`; 0 marks a
// broadcast dimension.
inline Shape broadcast_strides(const Shape& in, const Shape& out) {
  const Shape real = contiguous_strides(in);
  Shape st(out.size(), 0);
  const std::size_t off = out.size() - in.size();
  for (std::size_t i = 0; i < in.size(); ++i)
    st[off + i] = in[i] == 1 ? 0 : real[i];
  return st;
}

// Row-major iteration over the broadcast output shape, yielding
// f(out_linear, a_offset, b_offset). Last dim is the hot inner loop.
template <typename F>
void broadcast_iterate(const Shape& out, const Shape& astr, const Shape& bstr,
                       F&& f) {
  const std::size_t rank = out.size();
  if (rank == 0) {
    f(0, 0, 0);
    return;
  }
  const std::int64_t last = out[rank - 1];
  const std::int64_t sa = astr[rank - 1];
  const std::int64_t sb = bstr[rank - 1];
  Shape idx(rank > 1 ? rank - 1 : 0, 0);
  std::int64_t out_linear = 0;
  for (;;) {
    std::int64_t aoff = 0, boff = 0;
    for (std::size_t d = 0; d + 1 < rank; ++d) {
      aoff += idx[d] * astr[d];
      boff += idx[d] * bstr[d];
    }
    for (std::int64_t j = 0; j < last; ++j)
      f(out_linear++, aoff + j * sa, boff + j * sb);
    // odometer over leading dims
    std::size_t d = rank >= 1 ? rank - 1 : 0;
    bool done = true;
    while (d-- > 0) {
      if (++idx[d] < out[d]) {
        done = false;
        break;
      }
      idx[d] = 0;
    }
    if (done) break;
  }
}

template <typename T>
bool tracking(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::active()) return false;
  for (const auto* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops with numpy-style broadcasting
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b,
                           const char* name, Fwd&& fwd, Bwd&& bwd) {
  const Shape oshape = detail::broadcast_shape(a.shape(), b.shape(), name);
  const Shape astr = detail::broadcast_strides(a.shape(), oshape);
  const Shape bstr = detail::broadcast_strides(b.shape(), oshape);
  Tensor<T> out(oshape);
  {
    const T* pa = a.data();
    const T* pb = b.data();
    T* po = out.data();
    detail::broadcast_iterate(oshape, astr, bstr,
                              [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                                po[o] = fwd(pa[ia], pb[ib]);
                              });
  }
  check_finite(out, name);
  if (detail::tracking<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record(
        [ai = a.impl(), bi = b.impl(), oi = out.impl(), oshape, astr, bstr,
         bwd]() {
          const std::vector<T>& g = oi->grad;
          if (g.empty()) return;
          const bool wa = ai->requires_grad;
          const bool wb = bi->requires_grad;
          if (wa && ai->grad.empty()) ai->grad.assign(ai->data.size(), T(0));
          if (wb && bi->grad.empty()) bi->grad.assign(bi->data.size(), T(0));
          detail::broadcast_iterate(
              oshape, astr, bstr,
              [&](std::int64_t o, std::int64_t ia, std::int64_t ib) {
                T da, db;
                bwd(g[o], ai->data[ia], bi->data[ib], da, db);
                if (wa) ai->grad[ia] += da;
                if (wb) bi->grad[ib] += db;
              });
        });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_binary(
      a, b, "add", [](T x, T y) { return x + y; },
      [](T g, T, T, T& da, T& db) {
        da = g;
        db = g;
      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_binary(
      a, b, "sub", [](T x, T y) { return x - y; },
      [](T g, T, T, T& da, T& db) {
        da = g;
        db = -g;
      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return broadcast_binary(
      a, b, "mul", [](T x, T y) { return x * y; },
      [](T g, T x, T y, T& da, T& db) {
        da = g * y;
        db = g * x;
      });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary_op(const Tensor<T>& x, const char* name, Fwd&& fwd, Bwd&& bwd) {
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = fwd(px[i]);
  check_finite(out, name);
  if (detail::tracking<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([xi = x.impl(), oi = out.impl(), bwd]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i)
        xi->grad[i] += bwd(g[i], xi->data[i], oi->data[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double s) {
  const T ts = static_cast<T>(s);
  return unary_op(
      x, "scale", [ts](T v) { return v * ts; },
      [ts](T g, T, T) { return g * ts; });
}

template <typename T>
Tensor<T> exp_op(const Tensor<T>& x) {
  return unary_op(
      x, "exp", [](T v) { return std::exp(v); },
      [](T g, T, T y) { return g * y; });
}

// Exact GELU, 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return unary_op(
      x, "gelu",
      [](T v) {
        return static_cast<T>(0.5 * static_cast<double>(v) *
                              (1.0 + std::erf(static_cast<double>(v) * inv_sqrt2)));
      },
      [](T g, T v, T) {
        const double xv = static_cast<double>(v);
        const double cdf = 0.5 * (1.0 + std::erf(xv * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * xv * xv);
        return static_cast<T>(static_cast<double>(g) * (cdf + xv * pdf));
      });
}

// Shares values with x but carries no graph; gradients stop here.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.clone_data();
}

// ---------------------------------------------------------------------------
// Matrix multiplication (batched, batch dims broadcast)
// ---------------------------------------------------------------------------

namespace detail {

struct MatmulPlan {
  Shape out_shape;
  Shape batch_shape;          // leading dims of the output
  std::vector<std::int64_t> a_batch_offsets;
  std::vector<std::int64_t> b_batch_offsets;
  std::int64_t m, n, k;
};

template <typename T>
MatmulPlan matmul_plan(const Tensor<T>& a, const Tensor<T>& b, bool b_transposed,
                       const char* op) {
  if (a.rank() < 2 || b.rank() < 2)
    throw DimensionError(std::string(op) + ": operands must have rank >= 2, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  MatmulPlan plan;
  plan.m = a.shape()[a.rank() - 2];
  plan.k = a.shape()[a.rank() - 1];
  const std::int64_t bk = b_transposed ? b.shape()[b.rank() - 1]
                                       : b.shape()[b.rank() - 2];
  plan.n = b_transposed ? b.shape()[b.rank() - 2] : b.shape()[b.rank() - 1];
  if (plan.k != bk)
    throw DimensionError(std::string(op) + ": inner dimensions differ, " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape abatch(a.shape().begin(), a.shape().end() - 2);
  const Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  plan.batch_shape = broadcast_shape(abatch, bbatch, op);
  plan.out_shape = plan.batch_shape;
  plan.out_shape.push_back(plan.m);
  plan.out_shape.push_back(plan.n);

  const std::int64_t batches = shape_numel(plan.batch_shape);
  plan.a_batch_offsets.resize(batches);
  plan.b_batch_offsets.resize(batches);
  const Shape astr = broadcast_strides(abatch, plan.batch_shape);
  const Shape bstr = broadcast_strides(bbatch, plan.batch_shape);
  const std::int64_t a_mat = plan.m * plan.k;
  const std::int64_t b_mat = b_transposed ? plan.n * plan.k : plan.k * plan.n;
  Shape idx(plan.batch_shape.size(), 0);
  for (std::int64_t lin = 0; lin < batches; ++lin) {
    std::int64_t ao = 0, bo = 0;
    for (std::size_t d = 0; d < idx.size(); ++d) {
      ao += idx[d] * astr[d];
      bo += idx[d] * bstr[d];
    }
    plan.a_batch_offsets[lin] = ao * a_mat;
    plan.b_batch_offsets[lin] = bo * b_mat;
    for (std::size_t d = idx.size(); d-- > 0;) {
      if (++idx[d] < plan.batch_shape[d]) break;
      idx[d] = 0;
    }
  }
  return plan;
}

}  // namespace detail

// Standard product over the last two axes: [..., m, k] x [..., k, n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::MatmulPlan plan = detail::matmul_plan(a, b, false, "matmul");
  Tensor<T> out(plan.out_shape);
  const std::int64_t batches = shape_numel(plan.batch_shape);
  const std::int64_t out_mat = plan.m * plan.n;
  for (std::int64_t i = 0; i < batches; ++i) {
    gemm_nn(plan.m, plan.n, plan.k, T(1), a.data() + plan.a_batch_offsets[i],
            plan.k, b.data() + plan.b_batch_offsets[i], plan.n, T(0),
            out.data() + i * out_mat, plan.n);
  }
  check_finite(out, "matmul");
  if (detail::tracking<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(),
                               plan]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      const std::int64_t batches = shape_numel(plan.batch_shape);
      const std::int64_t out_mat = plan.m * plan.n;
      if (ai->requires_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->data.size(), T(0));
        for (std::int64_t i = 0; i < batches; ++i) {
          // dA = G * B^T
          gemm_nt(plan.m, plan.k, plan.n, T(1), g.data() + i * out_mat, plan.n,
                  bi->data.data() + plan.b_batch_offsets[i], plan.n, T(1),
                  ai->grad.data() + plan.a_batch_offsets[i], plan.k);
        }
      }
      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), T(0));
        for (std::int64_t i = 0; i < batches; ++i) {
          // dB = A^T * G
          gemm_tn(plan.k, plan.n, plan.m, T(1),
                  ai->data.data() + plan.a_batch_offsets[i], plan.k,
                  g.data() + i * out_mat, plan.n, T(1),
                  bi->grad.data() + plan.b_batch_offsets[i], plan.n);
        }
      }
    });
  }
  return out;
}

// a @ b^T over the last two axes: [..., m, k] x [..., n, k] -> [..., m, n].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  const detail::MatmulPlan plan = detail::matmul_plan(a, b, true, "matmul_nt");
  Tensor<T> out(plan.out_shape);
  const std::int64_t batches = shape_numel(plan.batch_shape);
  const std::int64_t out_mat = plan.m * plan.n;
  for (std::int64_t i = 0; i < batches; ++i) {
    gemm_nt(plan.m, plan.n, plan.k, T(1), a.data() + plan.a_batch_offsets[i],
            plan.k, b.data() + plan.b_batch_offsets[i], plan.k, T(0),
            out.data() + i * out_mat, plan.n);
  }
  check_finite(out, "matmul_nt");
  if (detail::tracking<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(),
                               plan]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      const std::int64_t batches = shape_numel(plan.batch_shape);
      const std::int64_t out_mat = plan.m * plan.n;
      if (ai->requires_grad) {
        if (ai->grad.empty()) ai->grad.assign(ai->data.size(), T(0));
        for (std::int64_t i = 0; i < batches; ++i) {
          // dA = G * B
          gemm_nn(plan.m, plan.k, plan.n, T(1), g.data() + i * out_mat, plan.n,
                  bi->data.data() + plan.b_batch_offsets[i], plan.k, T(1),
                  ai->grad.data() + plan.a_batch_offsets[i], plan.k);
        }
      }
      if (bi->requires_grad) {
        if (bi->grad.empty()) bi->grad.assign(bi->data.size(), T(0));
        for (std::int64_t i = 0; i < batches; ++i) {
          // dB = G^T * A
          gemm_tn(plan.n, plan.k, plan.m, T(1), g.data() + i * out_mat, plan.n,
                  ai->data.data() + plan.a_batch_offsets[i], plan.k, T(1),
                  bi->grad.data() + plan.b_batch_offsets[i], plan.k);
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and probability ops (all over the last axis)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps) {
  if (x.rank() < 1)
    throw DimensionError("layer_norm: input must have rank >= 1");
  const std::int64_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw DimensionError("layer_norm: gamma/beta of sizes " +
                         std::to_string(gamma.numel()) + "/" +
                         std::to_string(beta.numel()) + " do not match last dim " +
                         std::to_string(d));
  if (eps <= 0) throw ConfigError("layer_norm: eps must be > 0");
  const std::int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    double mean = 0;
    for (std::int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const T rs = static_cast<T>(1.0 / std::sqrt(var + eps));
    rstd[r] = rs;
    for (std::int64_t j = 0; j < d; ++j) {
      const T xh = static_cast<T>((row[j] - mean) * rs);
      xhat[r * d + j] = xh;
      po[r * d + j] = pg[j] * xh + pb[j];
    }
  }
  check_finite(out, "layer_norm");
  if (detail::tracking<T>({&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([xi = x.impl(), gi = gamma.impl(), bi = beta.impl(),
                               oi = out.impl(), xhat = std::move(xhat),
                               rstd = std::move(rstd), rows, d]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      const bool wx = xi->requires_grad;
      const bool wg = gi->requires_grad;
      const bool wb = bi->requires_grad;
      if (wx && xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
      if (wg && gi->grad.empty()) gi->grad.assign(gi->data.size(), T(0));
      if (wb && bi->grad.empty()) bi->grad.assign(bi->data.size(), T(0));
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* grow = g.data() + r * d;
        const T* xrow = xhat.data() + r * d;
        if (wg || wb) {
          for (std::int64_t j = 0; j < d; ++j) {
            if (wg) gi->grad[j] += grow[j] * xrow[j];
            if (wb) bi->grad[j] += grow[j];
          }
        }
        if (wx) {
          double sum_gg = 0, sum_ggx = 0;
          for (std::int64_t j = 0; j < d; ++j) {
            const double gg = static_cast<double>(grow[j]) * gi->data[j];
            sum_gg += gg;
            sum_ggx += gg * xrow[j];
          }
          const double mg = sum_gg / static_cast<double>(d);
          const double mgx = sum_ggx / static_cast<double>(d);
          for (std::int64_t j = 0; j < d; ++j) {
            const double gg = static_cast<double>(grow[j]) * gi->data[j];
            xi->grad[r * d + j] +=
                static_cast<T>(rstd[r] * (gg - mg - xrow[j] * mgx));
          }
        }
      }
    });
  }
  return out;
}

// Temperature softmax with max-subtraction; rows over the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, double temperature) {
  if (temperature <= 0)
    throw ConfigError("softmax: temperature must be > 0, got " +
                      std::to_string(temperature));
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  const double invt = 1.0 / temperature;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    double mx = -1e300;
    for (std::int64_t j = 0; j < d; ++j)
      mx = std::max(mx, static_cast<double>(row[j]) * invt);
    double denom = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double e = std::exp(static_cast<double>(row[j]) * invt - mx);
      po[r * d + j] = static_cast<T>(e);
      denom += e;
    }
    const T inv = static_cast<T>(1.0 / denom);
    for (std::int64_t j = 0; j < d; ++j) po[r * d + j] *= inv;
  }
  check_finite(out, "softmax");
  if (detail::tracking<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([xi = x.impl(), oi = out.impl(), rows, d, invt]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* grow = g.data() + r * d;
        const T* yrow = oi->data.data() + r * d;
        double dot = 0;
        for (std::int64_t j = 0; j < d; ++j)
          dot += static_cast<double>(grow[j]) * yrow[j];
        for (std::int64_t j = 0; j < d; ++j)
          xi->grad[r * d + j] +=
              static_cast<T>(invt * yrow[j] * (grow[j] - dot));
      }
    });
  }
  return out;
}

// Log-probabilities over the last axis, max-subtracted for stability.
template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * d;
    double mx = -1e300;
    for (std::int64_t j = 0; j < d; ++j)
      mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0;
    for (std::int64_t j = 0; j < d; ++j)
      denom += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(denom);
    for (std::int64_t j = 0; j < d; ++j)
      po[r * d + j] = static_cast<T>(static_cast<double>(row[j]) - lse);
  }
  check_finite(out, "log_softmax");
  if (detail::tracking<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([xi = x.impl(), oi = out.impl(), rows, d]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* grow = g.data() + r * d;
        const T* yrow = oi->data.data() + r * d;
        double gsum = 0;
        for (std::int64_t j = 0; j < d; ++j) gsum += grow[j];
        for (std::int64_t j = 0; j < d; ++j)
          xi->grad[r * d + j] +=
              static_cast<T>(grow[j] - std::exp(static_cast<double>(yrow[j])) * gsum);
      }
    });
  }
  return out;
}

// Cosine similarity over the last axis; eps guards zero vectors.
template <typename T>
Tensor<T> cosine_similarity(const Tensor<T>& a, const Tensor<T>& b,
                            double eps = 1e-8) {
  if (a.shape() != b.shape())
    throw DimensionError("cosine_similarity: shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()) + " differ");
  const std::int64_t d = a.shape().back();
  const std::int64_t rows = a.numel() / d;
  Shape oshape(a.shape().begin(), a.shape().end() - 1);
  Tensor<T> out(oshape);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* ra = pa + r * d;
    const T* rb = pb + r * d;
    double dot = 0, na2 = 0, nb2 = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      dot += static_cast<double>(ra[j]) * rb[j];
      na2 += static_cast<double>(ra[j]) * ra[j];
      nb2 += static_cast<double>(rb[j]) * rb[j];
    }
    const double da = std::max(std::sqrt(na2), eps);
    const double db = std::max(std::sqrt(nb2), eps);
    po[r] = static_cast<T>(dot / (da * db));
  }
  check_finite(out, "cosine_similarity");
  if (detail::tracking<T>({&a, &b})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([ai = a.impl(), bi = b.impl(), oi = out.impl(),
                               rows, d, eps]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      const bool wa = ai->requires_grad;
      const bool wb = bi->requires_grad;
      if (wa && ai->grad.empty()) ai->grad.assign(ai->data.size(), T(0));
      if (wb && bi->grad.empty()) bi->grad.assign(bi->data.size(), T(0));
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* ra = ai->data.data() + r * d;
        const T* rb = bi->data.data() + r * d;
        double dot = 0, na2 = 0, nb2 = 0;
        for (std::int64_t j = 0; j < d; ++j) {
          dot += static_cast<double>(ra[j]) * rb[j];
          na2 += static_cast<double>(ra[j]) * ra[j];
          nb2 += static_cast<double>(rb[j]) * rb[j];
        }
        const double na = std::sqrt(na2);
        const double nb = std::sqrt(nb2);
        const double da = std::max(na, eps);
        const double db = std::max(nb, eps);
        const double s = dot / (da * db);
        const double gr = static_cast<double>(g[r]);
        for (std::int64_t j = 0; j < d; ++j) {
          if (wa) {
            double grad = rb[j] / (da * db);
            if (na > eps) grad -= s * ra[j] / na2;
            ai->grad[r * d + j] += static_cast<T>(gr * grad);
          }
          if (wb) {
            double grad = ra[j] / (da * db);
            if (nb > eps) grad -= s * rb[j] / nb2;
            bi->grad[r * d + j] += static_cast<T>(gr * grad);
          }
        }
      }
    });
  }
  return out;
}

// KL divergence between probability rows: sum_i p_i (log p_i - log q_i).
// Inputs must already be normalized; the training path builds distributions
// from logits instead (see kl_from_logits).
template <typename T>
Tensor<T> kl_divergence(const Tensor<T>& p, const Tensor<T>& q) {
  if (p.shape() != q.shape())
    throw DimensionError("kl_divergence: shapes " + shape_str(p.shape()) +
                         " and " + shape_str(q.shape()) + " differ");
  const std::int64_t d = p.shape().back();
  const std::int64_t rows = p.numel() / d;
  const T* pp = p.data();
  const T* pq = q.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double sp = 0, sq = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double pv = pp[r * d + j];
      const double qv = pq[r * d + j];
      if (pv < -1e-9 || qv < -1e-9)
        throw ContractError("kl_divergence: negative probability at row " +
                            std::to_string(r));
      if (pv > 1e-12 && qv <= 0)
        throw ContractError("kl_divergence: q has zero mass where p > 0 at row " +
                            std::to_string(r));
      sp += pv;
      sq += qv;
    }
    if (std::abs(sp - 1.0) > 1e-5 || std::abs(sq - 1.0) > 1e-5)
      throw ContractError("kl_divergence: row " + std::to_string(r) +
                          " is not normalized (sums " + std::to_string(sp) + ", " +
                          std::to_string(sq) + ")");
  }
  Shape oshape(p.shape().begin(), p.shape().end() - 1);
  Tensor<T> out(oshape);
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double acc = 0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double pv = pp[r * d + j];
      if (pv > 0)
        acc += pv * (std::log(pv) - std::log(static_cast<double>(pq[r * d + j])));
    }
    po[r] = static_cast<T>(acc);
  }
  check_finite(out, "kl_divergence");
  if (detail::tracking<T>({&p, &q})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([pi = p.impl(), qi = q.impl(), oi = out.impl(),
                               rows, d]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      const bool wp = pi->requires_grad;
      const bool wq = qi->requires_grad;
      if (wp && pi->grad.empty()) pi->grad.assign(pi->data.size(), T(0));
      if (wq && qi->grad.empty()) qi->grad.assign(qi->data.size(), T(0));
      for (std::int64_t r = 0; r < rows; ++r) {
        const double gr = static_cast<double>(g[r]);
        for (std::int64_t j = 0; j < d; ++j) {
          const double pv = pi->data[r * d + j];
          const double qv = qi->data[r * d + j];
          if (pv > 0) {
            if (wp)
              pi->grad[r * d + j] +=
                  static_cast<T>(gr * (std::log(pv) - std::log(qv) + 1.0));
            if (wq) qi->grad[r * d + j] += static_cast<T>(-gr * pv / qv);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reduce_sum_last(const Tensor<T>& x) {
  const std::int64_t d = x.shape().back();
  const std::int64_t rows = x.numel() / d;
  Shape oshape(x.shape().begin(), x.shape().end() - 1);
  Tensor<T> out(oshape);
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::int64_t j = 0; j < d; ++j) acc += px[r * d + j];
    po[r] = acc;
  }
  check_finite(out, "reduce_sum_last");
  if (detail::tracking<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([xi = x.impl(), oi = out.impl(), rows, d]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) xi->grad[r * d + j] += g[r];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros({});
  T acc = T(0);
  const T* px = x.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) acc += px[i];
  out.data()[0] = acc;
  check_finite(out, "sum_all");
  if (detail::tracking<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([xi = x.impl(), oi = out.impl()]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
      for (auto& gv : xi->grad) gv += g[0];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " +
                         shape_str(new_shape) + " changes element count");
  Tensor<T> out = Tensor<T>::from_data(std::move(new_shape), x.vec());
  if (detail::tracking<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([xi = x.impl(), oi = out.impl()]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
      for (std::size_t i = 0; i < g.size(); ++i) xi->grad[i] += g[i];
    });
  }
  return out;
}

namespace detail {

// dst[i0..ik] = src[idx permuted by axes]; dst iterated row-major.
template <typename T>
void permute_copy(const T* src, const Shape& src_shape,
                  const std::vector<std::size_t>& axes, T* dst) {
  const std::size_t rank = src_shape.size();
  const Shape sstr = contiguous_strides(src_shape);
  Shape dshape(rank), dstr(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    dshape[i] = src_shape[axes[i]];
    dstr[i] = sstr[axes[i]];
  }
  Shape idx(rank, 0);
  const std::int64_t total = shape_numel(dshape);
  for (std::int64_t lin = 0; lin < total; ++lin) {
    std::int64_t soff = 0;
    for (std::size_t d = 0; d < rank; ++d) soff += idx[d] * dstr[d];
    dst[lin] = src[soff];
    for (std::size_t d = rank; d-- > 0;) {
      if (++idx[d] < dshape[d]) break;
      idx[d] = 0;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> axes) {
  if (axes.size() != x.rank())
    throw DimensionError("permute: axes count " + std::to_string(axes.size()) +
                         " does not match rank of " + shape_str(x.shape()));
  Shape oshape(x.rank());
  for (std::size_t i = 0; i < axes.size(); ++i) oshape[i] = x.shape()[axes[i]];
  Tensor<T> out(oshape);
  detail::permute_copy(x.data(), x.shape(), axes, out.data());
  if (detail::tracking<T>({&x})) {
    out.set_requires_grad(true);
    std::vector<std::size_t> inverse(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;
    Tape<T>::active()->record(
        [xi = x.impl(), oi = out.impl(), oshape, inverse]() {
          const std::vector<T>& g = oi->grad;
          if (g.empty()) return;
          if (xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
          std::vector<T> gperm(g.size());
          detail::permute_copy(g.data(), oshape, inverse, gperm.data());
          for (std::size_t i = 0; i < gperm.size(); ++i) xi->grad[i] += gperm[i];
        });
  }
  return out;
}

// [B, N, D] + class vector [D] -> [B, N+1, D] with the class token at index 0.
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& patches, const Tensor<T>& cls) {
  if (patches.rank() != 3 || cls.rank() != 1 ||
      cls.dim(0) != patches.dim(2))
    throw DimensionError("prepend_token: expected [B, N, D] and [D], got " +
                         shape_str(patches.shape()) + " and " +
                         shape_str(cls.shape()));
  const std::int64_t b = patches.dim(0), n = patches.dim(1), d = patches.dim(2);
  Tensor<T> out({b, n + 1, d});
  const T* pp = patches.data();
  const T* pc = cls.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < b; ++i) {
    T* row0 = po + i * (n + 1) * d;
    for (std::int64_t j = 0; j < d; ++j) row0[j] = pc[j];
    std::copy(pp + i * n * d, pp + (i + 1) * n * d, row0 + d);
  }
  if (detail::tracking<T>({&patches, &cls})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([pi = patches.impl(), ci = cls.impl(),
                               oi = out.impl(), b, n, d]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (pi->requires_grad) {
        if (pi->grad.empty()) pi->grad.assign(pi->data.size(), T(0));
        for (std::int64_t i = 0; i < b; ++i)
          for (std::int64_t k = 0; k < n * d; ++k)
            pi->grad[i * n * d + k] += g[i * (n + 1) * d + d + k];
      }
      if (ci->requires_grad) {
        if (ci->grad.empty()) ci->grad.assign(ci->data.size(), T(0));
        for (std::int64_t i = 0; i < b; ++i)
          for (std::int64_t j = 0; j < d; ++j)
            ci->grad[j] += g[i * (n + 1) * d + j];
      }
    });
  }
  return out;
}

// [B, N+1, D] -> [B, D], the class token of each sequence.
template <typename T>
Tensor<T> first_token(const Tensor<T>& tokens) {
  if (tokens.rank() != 3)
    throw DimensionError("first_token: expected [B, N+1, D], got " +
                         shape_str(tokens.shape()));
  const std::int64_t b = tokens.dim(0), n1 = tokens.dim(1), d = tokens.dim(2);
  Tensor<T> out({b, d});
  const T* pt = tokens.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < b; ++i)
    std::copy(pt + i * n1 * d, pt + i * n1 * d + d, po + i * d);
  if (detail::tracking<T>({&tokens})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([ti = tokens.impl(), oi = out.impl(), b, n1, d]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (ti->grad.empty()) ti->grad.assign(ti->data.size(), T(0));
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < d; ++j)
          ti->grad[i * n1 * d + j] += g[i * d + j];
    });
  }
  return out;
}

// [B, N+1, D] -> [B, N, D], removing the class token.
template <typename T>
Tensor<T> drop_first_token(const Tensor<T>& tokens) {
  if (tokens.rank() != 3)
    throw DimensionError("drop_first_token: expected [B, N+1, D], got " +
                         shape_str(tokens.shape()));
  const std::int64_t b = tokens.dim(0), n1 = tokens.dim(1), d = tokens.dim(2);
  Tensor<T> out({b, n1 - 1, d});
  const T* pt = tokens.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < b; ++i)
    std::copy(pt + (i * n1 + 1) * d, pt + (i + 1) * n1 * d,
              po + i * (n1 - 1) * d);
  if (detail::tracking<T>({&tokens})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([ti = tokens.impl(), oi = out.impl(), b, n1, d]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (ti->grad.empty()) ti->grad.assign(ti->data.size(), T(0));
      for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t k = 0; k < (n1 - 1) * d; ++k)
          ti->grad[(i * n1 + 1) * d + k] += g[i * (n1 - 1) * d + k];
    });
  }
  return out;
}

// Select index m of the last axis: [..., M] -> [...].
template <typename T>
Tensor<T> index_last(const Tensor<T>& x, std::int64_t m) {
  const std::int64_t last = x.shape().back();
  if (m < 0 || m >= last)
    throw DimensionError("index_last: index " + std::to_string(m) +
                         " out of range for " + shape_str(x.shape()));
  const std::int64_t rows = x.numel() / last;
  Shape oshape(x.shape().begin(), x.shape().end() - 1);
  Tensor<T> out(oshape);
  const T* px = x.data();
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) po[r] = px[r * last + m];
  if (detail::tracking<T>({&x})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([xi = x.impl(), oi = out.impl(), rows, last, m]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (xi->grad.empty()) xi->grad.assign(xi->data.size(), T(0));
      for (std::int64_t r = 0; r < rows; ++r) xi->grad[r * last + m] += g[r];
    });
  }
  return out;
}

// Stack M same-shape tensors along a new trailing axis: M x [...] -> [..., M].
template <typename T>
Tensor<T> stack_last(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ConfigError("stack_last: no tensors given");
  const Shape base = parts[0].shape();
  for (const auto& p : parts)
    if (p.shape() != base)
      throw DimensionError("stack_last: mismatched shapes " + shape_str(base) +
                           " vs " + shape_str(p.shape()));
  const std::int64_t m = static_cast<std::int64_t>(parts.size());
  const std::int64_t rows = parts[0].numel();
  Shape oshape = base;
  oshape.push_back(m);
  Tensor<T> out(oshape);
  T* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < m; ++j) po[r * m + j] = parts[j].data()[r];
  bool track = false;
  if (Tape<T>::active())
    for (const auto& p : parts) track = track || p.requires_grad();
  if (track) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorImpl<T>>> impls;
    impls.reserve(parts.size());
    for (const auto& p : parts) impls.push_back(p.impl());
    Tape<T>::active()->record([impls, oi = out.impl(), rows, m]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      for (std::int64_t j = 0; j < m; ++j) {
        auto& pi = impls[static_cast<std::size_t>(j)];
        if (!pi->requires_grad) continue;
        if (pi->grad.empty()) pi->grad.assign(pi->data.size(), T(0));
        for (std::int64_t r = 0; r < rows; ++r) pi->grad[r] += g[r * m + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Composite helpers
// ---------------------------------------------------------------------------

// Per-row KL(softmax(p_logits) || softmax(q_logits)) built from
// log-probabilities, so tau-sharp distributions cannot underflow.
template <typename T>
Tensor<T> kl_from_logits(const Tensor<T>& p_logits, const Tensor<T>& q_logits) {
  Tensor<T> lp = log_softmax(p_logits);
  Tensor<T> lq = log_softmax(q_logits);
  Tensor<T> p = exp_op(lp);
  return reduce_sum_last(mul(p, sub(lp, lq)));
}

// Mean negative log-likelihood of integer labels under log-probability rows.
template <typename T>
Tensor<T> nll_loss(const Tensor<T>& log_probs,
                   const std::vector<std::int64_t>& labels) {
  if (log_probs.rank() != 2)
    throw DimensionError("nll_loss: expected [B, K] log-probs, got " +
                         shape_str(log_probs.shape()));
  const std::int64_t b = log_probs.dim(0), k = log_probs.dim(1);
  if (static_cast<std::int64_t>(labels.size()) != b)
    throw DimensionError("nll_loss: " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(b));
  Tensor<T> out = Tensor<T>::zeros({});
  double acc = 0;
  for (std::int64_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= k)
      throw ContractError("nll_loss: label " + std::to_string(labels[i]) +
                          " out of range");
    acc -= static_cast<double>(log_probs.data()[i * k + labels[i]]);
  }
  out.data()[0] = static_cast<T>(acc / static_cast<double>(b));
  check_finite(out, "nll_loss");
  if (detail::tracking<T>({&log_probs})) {
    out.set_requires_grad(true);
    Tape<T>::active()->record([li = log_probs.impl(), oi = out.impl(), labels, b,
                               k]() {
      const std::vector<T>& g = oi->grad;
      if (g.empty()) return;
      if (li->grad.empty()) li->grad.assign(li->data.size(), T(0));
      const T go = g[0] / static_cast<T>(b);
      for (std::int64_t i = 0; i < b; ++i)
        li->grad[i * k + labels[i]] -= go;
    });
  }
  return out;
}

// x @ w + bias over the last axis; higher-rank inputs are flattened so the
// product runs as a single GEMM.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  if (x.rank() == 2) return add(matmul(x, w), bias);
  Shape flat{x.numel() / x.shape().back(), x.shape().back()};
  Tensor<T> y = add(matmul(reshape(x, flat), w), bias);
  Shape oshape = x.shape();
  oshape.back() = w.shape().back();
  return reshape(y, oshape);
}

}  // namespace comad
