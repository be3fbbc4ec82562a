#pragma once

#include <dlfcn.h>
#include <stdlib.h>

#include <cstdint>

#include "t2i/common.hpp"

namespace t2i {

// Single-precision GEMM backend. OpenBLAS is loaded lazily via dlopen so we
// can pin OPENBLAS_CORETYPE before its init runs: under hypervisors that mask
// the CPU model string, DYNAMIC_ARCH falls back to generic SSE2 kernels that
// are 3-4x slower than the AVX-512 path. BLAS threading is forced to 1; all
// parallelism in this project lives above the GEMM calls, which keeps results
// independent of the machine's core count.
namespace blasdet {

typedef void (*sgemm_fn)(int order, int transa, int transb, int m, int n, int k,
                         float alpha, const float* a, int lda, const float* b, int ldb,
                         float beta, float* c, int ldc);
typedef void (*set_threads_fn)(int);

constexpr int kRowMajor = 101, kNoTrans = 111, kTrans = 112;

struct Backend {
    sgemm_fn sgemm = nullptr;
};

inline Backend load_backend() {
    Backend be;
#if defined(__x86_64__)
    if (!getenv("OPENBLAS_CORETYPE") && __builtin_cpu_supports("avx512f"))
        setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
#endif
    void* h = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
    if (!h) h = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
    if (h) {
        be.sgemm = reinterpret_cast<sgemm_fn>(dlsym(h, "cblas_sgemm"));
        auto set_threads = reinterpret_cast<set_threads_fn>(dlsym(h, "openblas_set_num_threads"));
        if (set_threads) set_threads(1);
    }
    return be;
}

inline const Backend& backend() {
    static Backend be = load_backend();
    return be;
}

// Portable fallback, used only when no BLAS library is present.
inline void naive_sgemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha,
                        const float* a, int64_t lda, const float* b, int64_t ldb,
                        float beta, float* c, int64_t ldc) {
    for (int64_t i = 0; i < m; i++) {
        float* crow = c + i * ldc;
        for (int64_t j = 0; j < n; j++) crow[j] *= beta;
        for (int64_t p = 0; p < k; p++) {
            float av = ta ? a[p * lda + i] : a[i * lda + p];
            if (av == 0.0f) continue;
            av *= alpha;
            const float* brow = tb ? nullptr : b + p * ldb;
            if (tb) {
                for (int64_t j = 0; j < n; j++) crow[j] += av * b[j * ldb + p];
            } else {
                for (int64_t j = 0; j < n; j++) crow[j] += av * brow[j];
            }
        }
    }
}

}  // namespace blasdet

// Row-major C[m,n] = alpha * op(A)[m,k] * op(B)[k,n] + beta * C.
inline void sgemm(bool ta, bool tb, int64_t m, int64_t n, int64_t k, float alpha,
                  const float* a, int64_t lda, const float* b, int64_t ldb,
                  float beta, float* c, int64_t ldc) {
    if (m == 0 || n == 0) return;
    const auto& be = blasdet::backend();
    if (be.sgemm) {
        be.sgemm(blasdet::kRowMajor, ta ? blasdet::kTrans : blasdet::kNoTrans,
                 tb ? blasdet::kTrans : blasdet::kNoTrans,
                 static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha,
                 a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
                 c, static_cast<int>(ldc));
    } else {
        blasdet::naive_sgemm(ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    }
}

}  // namespace t2i
