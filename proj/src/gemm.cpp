#include "edh/gemm.hpp"

#include <cstdlib>
#include <dlfcn.h>

namespace edh::detail {
namespace {

// cblas_dgemm with CBLAS enums passed as plain ints.
using cblas_dgemm_fn = void (*)(int order, int trans_a, int trans_b, int m,
                                int n, int k, double alpha, const double* a,
                                int lda, const double* b, int ldb, double beta,
                                double* c, int ldc);

constexpr int kCblasRowMajor = 101;
constexpr int kCblasNoTrans = 111;
constexpr int kCblasTrans = 112;

cblas_dgemm_fn load_openblas() {
  if (std::getenv("EDH_NO_BLAS")) return nullptr;
  // OpenBLAS <= 0.3.20 misdetects recent Xeons whose CPUID model is masked by
  // the hypervisor and falls back to a scalar kernel. When the CPU reports
  // AVX-512 support, select the Skylake-X kernels explicitly. Must happen
  // before the library is loaded, hence dlopen instead of linking.
#if defined(__x86_64__)
  if (!std::getenv("OPENBLAS_CORETYPE") && __builtin_cpu_supports("avx512f"))
    setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
#endif
  // Single-threaded BLAS keeps results reproducible and timing stable.
  setenv("OPENBLAS_NUM_THREADS", "1", 0);
  void* handle = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
  if (!handle) handle = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
  if (!handle) return nullptr;
  return reinterpret_cast<cblas_dgemm_fn>(dlsym(handle, "cblas_dgemm"));
}

// Fallback kernel, used only when OpenBLAS is unavailable. Correct but slow.
void builtin_gemm(bool trans_a, bool trans_b, int m, int n, int k,
                  double alpha, const double* a, int lda, const double* b,
                  int ldb, double beta, double* c, int ldc) {
  auto at = [&](int i, int p) { return trans_a ? a[p * lda + i] : a[i * lda + p]; };
  auto bt = [&](int p, int j) { return trans_b ? b[j * ldb + p] : b[p * ldb + j]; };
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += at(i, p) * bt(p, j);
      c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
    }
  }
}

struct Backend {
  cblas_dgemm_fn blas = nullptr;
  Backend() : blas(load_openblas()) {}
};

Backend& backend() {
  static Backend b;
  return b;
}

}  // namespace

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, int lda, const double* b, int ldb, double beta,
          double* c, int ldc) {
  if (m == 0 || n == 0) return;
  if (auto* fn = backend().blas) {
    fn(kCblasRowMajor, trans_a ? kCblasTrans : kCblasNoTrans,
       trans_b ? kCblasTrans : kCblasNoTrans, m, n, k, alpha, a, lda, b, ldb,
       beta, c, ldc);
    return;
  }
  builtin_gemm(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

const char* gemm_backend() { return backend().blas ? "openblas" : "builtin"; }

}  // namespace edh::detail
