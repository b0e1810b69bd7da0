#include "nnlens/kernels.hpp"

#include <cstring>

namespace nnlens::kernels {

namespace {

// Shared inner body. For one output row i, the k loop runs in ascending
// order and j is innermost, so every out[i*n + j] accumulates its terms in
// the same order as the naive ijk triple loop.
inline void matmul_row(const double* a, const double* b, double* out,
                       size_t i, size_t k, size_t n) {
    double* orow = out + i * n;
    const double* arow = a + i * k;
    for (size_t kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        const double* brow = b + kk * n;
        for (size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
}

} // namespace

void matmul_serial(const double* a, const double* b, double* out,
                   size_t m, size_t k, size_t n) {
    std::memset(out, 0, m * n * sizeof(double));
    for (size_t i = 0; i < m; ++i) matmul_row(a, b, out, i, k, n);
}

void matmul(const double* a, const double* b, double* out,
            size_t m, size_t k, size_t n) {
    if (m * n * k < kMatmulParallelFlops || m == 1) {
        matmul_serial(a, b, out, m, k, n);
        return;
    }
    std::memset(out, 0, m * n * sizeof(double));
#pragma omp parallel for schedule(static)
    for (size_t i = 0; i < m; ++i) matmul_row(a, b, out, i, k, n);
}

void matmul_acc(const double* a, const double* b, double* out,
                size_t m, size_t k, size_t n) {
    if (m * n * k < kMatmulParallelFlops || m == 1) {
        for (size_t i = 0; i < m; ++i) matmul_row(a, b, out, i, k, n);
        return;
    }
#pragma omp parallel for schedule(static)
    for (size_t i = 0; i < m; ++i) matmul_row(a, b, out, i, k, n);
}

} // namespace nnlens::kernels
