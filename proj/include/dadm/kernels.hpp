#pragma once

#include <cstddef>
#include <string_view>

// Inner-loop arithmetic behind every tensor operation. Each kernel has a
// scalar reference implementation and, where the CPU supports it, an AVX2+FMA
// variant. The variant is chosen once at startup; DADM_KERNELS=scalar in the
// environment forces the reference path.

namespace dadm::kernels {

struct KernelTable {
    std::string_view name;

    double (*dot)(const double* a, const double* b, std::size_t n);
    double (*sum)(const double* x, std::size_t n);
    /// y += alpha * x
    void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
    /// out = a + b (out may alias a or b)
    void (*add)(const double* a, const double* b, double* out, std::size_t n);
    /// out = a - b
    void (*sub)(const double* a, const double* b, double* out, std::size_t n);
    /// out = a * b elementwise
    void (*mul)(const double* a, const double* b, double* out, std::size_t n);
    /// y += a * b elementwise
    void (*mul_acc)(const double* a, const double* b, double* y, std::size_t n);
    /// True when no element is NaN or infinite.
    bool (*all_finite)(const double* x, std::size_t n);
    /// out = alpha * x
    void (*scale)(double alpha, const double* x, double* out, std::size_t n);
    /// C(M,N) (+)= op(A) * op(B), row-major. op(A) is M x K; A is stored
    /// K x M when trans_a. op(B) is K x N; B is stored N x K when trans_b.
    void (*gemm)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c, bool accumulate);
};

const KernelTable& scalar_table();
/// Null when the binary was built without AVX2 support or the CPU lacks it.
const KernelTable* avx2_table();

/// The table every tensor operation dispatches through.
const KernelTable& active();
/// Override dispatch ("scalar" or "avx2"); returns false if unavailable.
bool select(std::string_view name);

}  // namespace dadm::kernels
