#pragma once

#include <cblas.h>

#include <mutex>

extern "C" void openblas_set_num_threads(int);

namespace crfuse::detail {

// Single-threaded BLAS: reproducible accumulation order, and training runs
// themselves are the unit of parallelism.
inline void blas_init_once() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

// C += op(A) * op(B), row-major.
inline void gemm_acc(bool trans_a, bool trans_b, int m, int n, int k, const float* a, int lda,
                     const float* b, int ldb, float* c, int ldc) {
  blas_init_once();
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, a, lda, b, ldb, 1.0f, c, ldc);
}

inline void gemm_acc(bool trans_a, bool trans_b, int m, int n, int k, const double* a, int lda,
                     const double* b, int ldb, double* c, int ldc) {
  blas_init_once();
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, m, n, k, 1.0, a, lda, b, ldb, 1.0, c, ldc);
}

}  // namespace crfuse::detail
