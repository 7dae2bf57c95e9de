#pragma once

// Row-major GEMM wrappers over OpenBLAS, pinned to one thread so results are
// bitwise reproducible run to run and independent of machine thread count.

#include <mutex>

#include <cblas.h>

extern "C" void openblas_set_num_threads(int);

namespace segada::detail {

inline void blas_single_thread() {
  static std::once_flag once;
  std::call_once(once, [] { openblas_set_num_threads(1); });
}

// C[m,n] = A[m,k] * B[k,n] + beta*C
inline void gemm_nn(int m, int n, int k, const float* a, const float* b,
                    float* c, float beta) {
  blas_single_thread();
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f, a, k,
              b, n, beta, c, n);
}
inline void gemm_nn(int m, int n, int k, const double* a, const double* b,
                    double* c, double beta) {
  blas_single_thread();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a, k, b,
              n, beta, c, n);
}

// C[m,n] = A[m,k] * B[n,k]^T + beta*C
inline void gemm_nt(int m, int n, int k, const float* a, const float* b,
                    float* c, float beta) {
  blas_single_thread();
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0f, a, k, b,
              k, beta, c, n);
}
inline void gemm_nt(int m, int n, int k, const double* a, const double* b,
                    double* c, double beta) {
  blas_single_thread();
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, n, k, 1.0, a, k, b,
              k, beta, c, n);
}

// C[m,n] = A[k,m]^T * B[k,n] + beta*C
inline void gemm_tn(int m, int n, int k, const float* a, const float* b,
                    float* c, float beta) {
  blas_single_thread();
  cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0f, a, m, b,
              n, beta, c, n);
}
inline void gemm_tn(int m, int n, int k, const double* a, const double* b,
                    double* c, double beta) {
  blas_single_thread();
  cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, m, n, k, 1.0, a, m, b,
              n, beta, c, n);
}

}  // namespace segada::detail
