#pragma once

#include <cblas.h>

#include <cmath>
#include <string>

#include "csformer/tensor.hpp"

namespace csformer::detail {

// Row-major GEMM: C = alpha·op(A)·op(B) + beta·C.
inline void gemm(bool ta, bool tb, int m, int n, int k, float alpha, const float* a, int lda, const float* b,
                 int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a,
              lda, b, ldb, beta, c, ldc);
}

inline void gemm(bool ta, bool tb, int m, int n, int k, double alpha, const double* a, int lda, const double* b,
                 int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, alpha, a,
              lda, b, ldb, beta, c, ldc);
}

template <typename T>
void check_finite([[maybe_unused]] const Tensor<T>& t, [[maybe_unused]] const char* op) {
#ifndef NDEBUG
  for (T v : t.data()) {
    if (!std::isfinite(v)) throw Error(std::string("non-finite value produced by ") + op);
  }
#endif
}

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

}  // namespace csformer::detail
