#pragma once

namespace edh::detail {

// Row-major general matrix multiply:
//   C = alpha * op(A) * op(B) + beta * C
// with op(X) = X or X^T depending on trans_a / trans_b.
// Dimensions are those of op(A) [m x k] and op(B) [k x n].
//
// Backed by OpenBLAS when it can be loaded at runtime, otherwise by a
// portable built-in kernel. Set EDH_NO_BLAS=1 to force the built-in path.
void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc);

// Which backend got resolved ("openblas" or "builtin"); for diagnostics.
const char* gemm_backend();

}  // namespace edh::detail
