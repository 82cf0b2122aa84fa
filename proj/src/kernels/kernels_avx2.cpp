// Compiled with -mavx2 -mfma; only reached after a runtime CPU check.
#include "dadm/kernels.hpp"

#if defined(DADM_HAVE_AVX2)

#include <immintrin.h>

#include <cstring>
#include <vector>

namespace dadm::kernels {

namespace {

inline double hsum(__m256d v) {
    __m128d lo = _mm256_castpd256_pd128(v);
    __m128d hi = _mm256_extractf128_pd(v, 1);
    lo = _mm_add_pd(lo, hi);
    __m128d sh = _mm_unpackhi_pd(lo, lo);
    return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

double dot(const double* a, const double* b, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
        acc1 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i + 4), _mm256_loadu_pd(b + i + 4), acc1);
    }
    for (; i + 4 <= n; i += 4) acc0 = _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), acc0);
    double res = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) res += a[i] * b[i];
    return res;
}

double sum(const double* x, std::size_t n) {
    __m256d acc0 = _mm256_setzero_pd();
    __m256d acc1 = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 8 <= n; i += 8) {
        acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
        acc1 = _mm256_add_pd(acc1, _mm256_loadu_pd(x + i + 4));
    }
    for (; i + 4 <= n; i += 4) acc0 = _mm256_add_pd(acc0, _mm256_loadu_pd(x + i));
    double res = hsum(_mm256_add_pd(acc0, acc1));
    for (; i < n; ++i) res += x[i];
    return res;
}

bool all_finite(const double* x, std::size_t n) {
    // x - x is 0 for finite x and NaN otherwise; NaN survives the sum.
    __m256d acc = _mm256_setzero_pd();
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) {
        const __m256d v = _mm256_loadu_pd(x + i);
        acc = _mm256_add_pd(acc, _mm256_sub_pd(v, v));
    }
    double tail = 0.0;
    for (; i < n; ++i) tail += x[i] - x[i];
    return hsum(acc) + tail == 0.0;
}

void axpy(double alpha, const double* x, double* y, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += alpha * x[i];
}

void add(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_add_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_sub_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul(const double* a, const double* b, double* out, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
    for (; i < n; ++i) out[i] = a[i] * b[i];
}

void mul_acc(const double* a, const double* b, double* y, std::size_t n) {
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4)
        _mm256_storeu_pd(y + i, _mm256_fmadd_pd(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i), _mm256_loadu_pd(y + i)));
    for (; i < n; ++i) y[i] += a[i] * b[i];
}

void scale(double alpha, const double* x, double* out, std::size_t n) {
    const __m256d va = _mm256_set1_pd(alpha);
    std::size_t i = 0;
    for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
    for (; i < n; ++i) out[i] = alpha * x[i];
}

/// C(m,n) += A(m,k) * B(k,n), all row-major with leading dimensions.
/// 4x8 register tile: four broadcast rows of A against two vectors of B.
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
             std::size_t ldb, double* c, std::size_t ldc) {
    std::size_t i = 0;
    for (; i + 4 <= m; i += 4) {
        std::size_t j = 0;
        for (; j + 8 <= n; j += 8) {
            __m256d c00 = _mm256_loadu_pd(c + (i + 0) * ldc + j), c01 = _mm256_loadu_pd(c + (i + 0) * ldc + j + 4);
            __m256d c10 = _mm256_loadu_pd(c + (i + 1) * ldc + j), c11 = _mm256_loadu_pd(c + (i + 1) * ldc + j + 4);
            __m256d c20 = _mm256_loadu_pd(c + (i + 2) * ldc + j), c21 = _mm256_loadu_pd(c + (i + 2) * ldc + j + 4);
            __m256d c30 = _mm256_loadu_pd(c + (i + 3) * ldc + j), c31 = _mm256_loadu_pd(c + (i + 3) * ldc + j + 4);
            for (std::size_t p = 0; p < k; ++p) {
                const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j);
                const __m256d b1 = _mm256_loadu_pd(b + p * ldb + j + 4);
                __m256d av = _mm256_broadcast_sd(a + (i + 0) * lda + p);
                c00 = _mm256_fmadd_pd(av, b0, c00);
                c01 = _mm256_fmadd_pd(av, b1, c01);
                av = _mm256_broadcast_sd(a + (i + 1) * lda + p);
                c10 = _mm256_fmadd_pd(av, b0, c10);
                c11 = _mm256_fmadd_pd(av, b1, c11);
                av = _mm256_broadcast_sd(a + (i + 2) * lda + p);
                c20 = _mm256_fmadd_pd(av, b0, c20);
                c21 = _mm256_fmadd_pd(av, b1, c21);
                av = _mm256_broadcast_sd(a + (i + 3) * lda + p);
                c30 = _mm256_fmadd_pd(av, b0, c30);
                c31 = _mm256_fmadd_pd(av, b1, c31);
            }
            _mm256_storeu_pd(c + (i + 0) * ldc + j, c00);
            _mm256_storeu_pd(c + (i + 0) * ldc + j + 4, c01);
            _mm256_storeu_pd(c + (i + 1) * ldc + j, c10);
            _mm256_storeu_pd(c + (i + 1) * ldc + j + 4, c11);
            _mm256_storeu_pd(c + (i + 2) * ldc + j, c20);
            _mm256_storeu_pd(c + (i + 2) * ldc + j + 4, c21);
            _mm256_storeu_pd(c + (i + 3) * ldc + j, c30);
            _mm256_storeu_pd(c + (i + 3) * ldc + j + 4, c31);
        }
        for (; j + 4 <= n; j += 4) {
            __m256d c0 = _mm256_loadu_pd(c + (i + 0) * ldc + j), c1 = _mm256_loadu_pd(c + (i + 1) * ldc + j);
            __m256d c2 = _mm256_loadu_pd(c + (i + 2) * ldc + j), c3 = _mm256_loadu_pd(c + (i + 3) * ldc + j);
            for (std::size_t p = 0; p < k; ++p) {
                const __m256d b0 = _mm256_loadu_pd(b + p * ldb + j);
                c0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a + (i + 0) * lda + p), b0, c0);
                c1 = _mm256_fmadd_pd(_mm256_broadcast_sd(a + (i + 1) * lda + p), b0, c1);
                c2 = _mm256_fmadd_pd(_mm256_broadcast_sd(a + (i + 2) * lda + p), b0, c2);
                c3 = _mm256_fmadd_pd(_mm256_broadcast_sd(a + (i + 3) * lda + p), b0, c3);
            }
            _mm256_storeu_pd(c + (i + 0) * ldc + j, c0);
            _mm256_storeu_pd(c + (i + 1) * ldc + j, c1);
            _mm256_storeu_pd(c + (i + 2) * ldc + j, c2);
            _mm256_storeu_pd(c + (i + 3) * ldc + j, c3);
        }
        for (; j < n; ++j)
            for (std::size_t r = 0; r < 4; ++r) {
                double acc = c[(i + r) * ldc + j];
                for (std::size_t p = 0; p < k; ++p) acc += a[(i + r) * lda + p] * b[p * ldb + j];
                c[(i + r) * ldc + j] = acc;
            }
    }
    for (; i < m; ++i) {
        std::size_t j = 0;
        for (; j + 4 <= n; j += 4) {
            __m256d c0 = _mm256_loadu_pd(c + i * ldc + j);
            for (std::size_t p = 0; p < k; ++p)
                c0 = _mm256_fmadd_pd(_mm256_broadcast_sd(a + i * lda + p), _mm256_loadu_pd(b + p * ldb + j), c0);
            _mm256_storeu_pd(c + i * ldc + j, c0);
        }
        for (; j < n; ++j) {
            double acc = c[i * ldc + j];
            for (std::size_t p = 0; p < k; ++p) acc += a[i * lda + p] * b[p * ldb + j];
            c[i * ldc + j] = acc;
        }
    }
}

/// Row-major copy of the transpose of a (rows x cols) matrix.
void transpose_into(const double* src, std::size_t rows, std::size_t cols, std::vector<double>& dst) {
    dst.resize(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

void gemm(bool ta, bool tb, std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c,
          bool accumulate) {
    if (!accumulate) std::memset(c, 0, sizeof(double) * m * n);
    if (m == 0 || n == 0 || k == 0) return;
    thread_local std::vector<double> pa, pb;
    if (ta) {
        transpose_into(a, k, m, pa);
        a = pa.data();
    }
    if (tb) {
        transpose_into(b, n, k, pb);
        b = pb.data();
    }
    if (n < 4 && k >= 8) {
        // Skinny output: one dot product per entry against rows of B^T.
        thread_local std::vector<double> bt;
        transpose_into(b, k, n, bt);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += dot(a + i * k, bt.data() + j * k, k);
        return;
    }
    gemm_nn(m, n, k, a, k, b, n, c, n);
}

}  // namespace

const KernelTable* avx2_table_impl() {
    static const KernelTable table{"avx2", dot, sum, axpy, add, sub, mul, mul_acc, all_finite, scale, gemm};
    return &table;
}

}  // namespace dadm::kernels

#endif
