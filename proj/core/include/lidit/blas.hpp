#pragma once

namespace lidit::blas {

// Row-major GEMM: C = alpha * op(A) * op(B) + beta * C
// op(A) is [m x k], op(B) is [k x n], C is [m x n].
void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          float alpha, const float* a, int lda, const float* b, int ldb,
          float beta, float* c, int ldc);
void gemm(bool trans_a, bool trans_b, int m, int n, int k,
          double alpha, const double* a, int lda, const double* b, int ldb,
          double beta, double* c, int ldc);

// Caps BLAS worker threads; call once at startup. Thread count changes
// throughput only, never results, but pinning it keeps runs comparable.
void set_threads(int n);

}  // namespace lidit::blas
