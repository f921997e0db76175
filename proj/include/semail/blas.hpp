#pragma once

#include <cstddef>

extern "C" {
// row-major wrappers below map onto the CBLAS column-major entry points
void cblas_sgemm(int order, int transA, int transB, int m, int n, int k, float alpha,
                 const float* A, int lda, const float* B, int ldb, float beta, float* C, int ldc);
void cblas_dgemm(int order, int transA, int transB, int m, int n, int k, double alpha,
                 const double* A, int lda, const double* B, int ldb, double beta, double* C, int ldc);
}

namespace semail {

inline constexpr int kCblasRowMajor = 101;
inline constexpr int kCblasNoTrans = 111;
inline constexpr int kCblasTrans = 112;

// C = alpha * op(A) * op(B) + beta * C, row-major.
// op(A) is m x k, op(B) is k x n, C is m x n.
inline void gemm(bool transA, bool transB, int m, int n, int k, float alpha, const float* A,
                 const float* B, float beta, float* C) {
    const int lda = transA ? m : k;
    const int ldb = transB ? k : n;
    cblas_sgemm(kCblasRowMajor, transA ? kCblasTrans : kCblasNoTrans,
                transB ? kCblasTrans : kCblasNoTrans, m, n, k, alpha, A, lda, B, ldb, beta, C, n);
}

inline void gemm(bool transA, bool transB, int m, int n, int k, double alpha, const double* A,
                 const double* B, double beta, double* C) {
    const int lda = transA ? m : k;
    const int ldb = transB ? k : n;
    cblas_dgemm(kCblasRowMajor, transA ? kCblasTrans : kCblasNoTrans,
                transB ? kCblasTrans : kCblasNoTrans, m, n, k, alpha, A, lda, B, ldb, beta, C, n);
}

} // namespace semail
