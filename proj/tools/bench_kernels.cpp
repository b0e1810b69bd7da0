// Compares the serial reference kernels against the OpenMP variants and
// reports throughput, plus the coalition-column fan-out of the attribution
// engine at different thread counts.

#include <chrono>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "nnlens/attribute.hpp"
#include "nnlens/kernels.hpp"
#include "nnlens/model.hpp"
#include "nnlens/rng.hpp"
#include "nnlens/tensor.hpp"

using namespace nnlens;

namespace {

double now_s() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::vector<double> random_vec(size_t n, Rng& rng) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

void bench_matmul(size_t m, size_t k, size_t n, int reps) {
    Rng rng(42);
    std::vector<double> a = random_vec(m * k, rng);
    std::vector<double> b = random_vec(k * n, rng);
    std::vector<double> out(m * n);

    double t0 = now_s();
    for (int r = 0; r < reps; ++r) kernels::matmul_serial(a.data(), b.data(), out.data(), m, k, n);
    double serial = (now_s() - t0) / reps;

    t0 = now_s();
    for (int r = 0; r < reps; ++r) kernels::matmul(a.data(), b.data(), out.data(), m, k, n);
    double parallel = (now_s() - t0) / reps;

    const double flops = 2.0 * double(m) * double(k) * double(n);
    std::printf("matmul %4zux%4zux%4zu  serial %8.3f ms (%6.2f GF/s)  omp %8.3f ms (%6.2f GF/s)  speedup %.2fx\n",
                m, k, n, serial * 1e3, flops / serial * 1e-9, parallel * 1e3,
                flops / parallel * 1e-9, serial / parallel);
}

void bench_attribution() {
    const size_t vocab = 200;
    LstmConfig cfg;
    cfg.vocab_size = vocab;
    cfg.embed_dim = 64;
    cfg.hidden_dim = 64;
    cfg.layers = 2;
    LstmLm model(cfg, 7);

    std::vector<int> tokens{5, 9, 17, 33, 57, 90, 120, 150};
    PlayerPartition part = PlayerPartition::per_token(tokens.size());
    std::vector<int> targets{4};

    double t0 = now_s();
    auto attrs = decompose_forward(model, tokens, part, AttributionMethod::exact(), targets);
    double dt = now_s() - t0;
    std::printf("exact attribution, lstm d=64 x2, %zu tokens (%zu coalitions): %.3f s\n",
                tokens.size(), size_t{1} << tokens.size(), dt);
    std::printf("  full logit %.4f, bias %.4f\n", attrs[0].full_logit, attrs[0].bias);
}

} // namespace

int main() {
#ifdef _OPENMP
    std::printf("OpenMP enabled, max threads = %d\n", omp_get_max_threads());
#else
    std::printf("OpenMP disabled (serial build)\n");
#endif
    bench_matmul(64, 64, 256, 200);
    bench_matmul(256, 256, 256, 50);
    bench_matmul(512, 512, 512, 10);
    bench_attribution();
    return 0;
}
