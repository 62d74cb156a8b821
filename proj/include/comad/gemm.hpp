#pragma once

#include <cstdint>

namespace comad {

// Hand-rolled GEMM. Single-threaded with a fixed accumulation order, so
// results are reproducible bit-for-bit on a given platform. Loop orders are
// chosen so the innermost loop is contiguous in both operands and
// auto-vectorizes. Sizes here are desk scale; this is not a BLAS.
//
// C = alpha * op(A) * op(B) + beta * C, all row-major.

template <typename T>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, std::int64_t lda, const T* b, std::int64_t ldb,
             T beta, T* c, std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* crow = c + i * ldc;
    if (beta == T(0)) {
      for (std::int64_t j = 0; j < n; ++j) crow[j] = T(0);
    } else if (beta != T(1)) {
      for (std::int64_t j = 0; j < n; ++j) crow[j] *= beta;
    }
    const T* arow = a + i * lda;
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = alpha * arow[p];
      const T* brow = b + p * ldb;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C = alpha * A * B^T + beta * C  (A m-by-k, B n-by-k)
template <typename T>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, std::int64_t lda, const T* b, std::int64_t ldb,
             T beta, T* c, std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * lda;
    T* crow = c + i * ldc;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * ldb;
      T acc = T(0);
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = alpha * acc + (beta == T(0) ? T(0) : beta * crow[j]);
    }
  }
}

// C = alpha * A^T * B + beta * C  (A k-by-m, B k-by-n)
template <typename T>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
             const T* a, std::int64_t lda, const T* b, std::int64_t ldb,
             T beta, T* c, std::int64_t ldc) {
  if (beta == T(0)) {
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) c[i * ldc + j] = T(0);
  } else if (beta != T(1)) {
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
  }
  for (std::int64_t p = 0; p < k; ++p) {
    const T* arow = a + p * lda;
    const T* brow = b + p * ldb;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = alpha * arow[i];
      T* crow = c + i * ldc;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace comad
