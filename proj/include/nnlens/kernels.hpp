#pragma once

#include <cstddef>

namespace nnlens::kernels {

// Work sizes below these cutoffs run serially; above them the OpenMP
// variants split the outer loop. Each output element is always produced
// by exactly one thread with a fixed inner accumulation order, so results
// are bit-identical to the serial reference at any thread count.
inline constexpr size_t kMatmulParallelFlops = 1u << 15;
inline constexpr size_t kMapParallelElems = 1u << 14;

// Serial reference: out[m x n] = a[m x k] * b[k x n], row-major.
// Kept for testing and benchmarking against the parallel kernel.
void matmul_serial(const double* a, const double* b, double* out,
                   size_t m, size_t k, size_t n);

// Production kernel: ikj loop order, OpenMP over rows for large sizes.
void matmul(const double* a, const double* b, double* out,
            size_t m, size_t k, size_t n);

// out[m x n] += a[m x k] * b[k x n]
void matmul_acc(const double* a, const double* b, double* out,
                size_t m, size_t k, size_t n);

template <class F>
void map_serial(double* out, const double* x, size_t n, F f) {
    for (size_t i = 0; i < n; ++i) out[i] = f(x[i]);
}

template <class F>
void map(double* out, const double* x, size_t n, F f) {
    if (n < kMapParallelElems) {
        map_serial(out, x, n, f);
        return;
    }
#pragma omp parallel for schedule(static)
    for (size_t i = 0; i < n; ++i) out[i] = f(x[i]);
}

template <class F>
void zip_serial(double* out, const double* a, const double* b, size_t n, F f) {
    for (size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
}

template <class F>
void zip(double* out, const double* a, const double* b, size_t n, F f) {
    if (n < kMapParallelElems) {
        zip_serial(out, a, b, n, f);
        return;
    }
#pragma omp parallel for schedule(static)
    for (size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
}

} // namespace nnlens::kernels
