#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <tuple>

#include "nnlens/kernels.hpp"
#include "nnlens/rng.hpp"
#include "oracles.hpp"

using namespace nnlens;

TEST_CASE("matmul kernel matches the naive triple-loop oracle") {
    Rng rng(1);
    for (auto [m, k, n] : {std::tuple<size_t, size_t, size_t>{4, 5, 3},
                           {1, 7, 1},
                           {16, 16, 16},
                           {33, 65, 17}}) {
        std::vector<double> a(m * k), b(k * n), out(m * n);
        for (double& x : a) x = rng.uniform(-2.0, 2.0);
        for (double& x : b) x = rng.uniform(-2.0, 2.0);
        kernels::matmul(a.data(), b.data(), out.data(), m, k, n);
        auto expect = oracle::matmul(a, b, m, k, n);
        for (size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
}

TEST_CASE("parallel matmul is bit-identical to the serial reference") {
    Rng rng(2);
    // Big enough to cross the parallel cutoff.
    const size_t m = 64, k = 96, n = 80;
    std::vector<double> a(m * k), b(k * n), s(m * n), p(m * n);
    for (double& x : a) x = rng.uniform(-1.0, 1.0);
    for (double& x : b) x = rng.uniform(-1.0, 1.0);
    kernels::matmul_serial(a.data(), b.data(), s.data(), m, k, n);
    kernels::matmul(a.data(), b.data(), p.data(), m, k, n);
    CHECK(std::memcmp(s.data(), p.data(), s.size() * 8) == 0);
}

TEST_CASE("matmul_acc accumulates on top of existing values") {
    std::vector<double> a{1, 2, 3, 4}; // 2x2
    std::vector<double> b{1, 0, 0, 1}; // identity
    std::vector<double> out{10, 10, 10, 10};
    kernels::matmul_acc(a.data(), b.data(), out.data(), 2, 2, 2);
    CHECK(out[0] == 11.0);
    CHECK(out[1] == 12.0);
    CHECK(out[2] == 13.0);
    CHECK(out[3] == 14.0);
}

TEST_CASE("map and zip agree with their serial forms at every size") {
    Rng rng(3);
    for (size_t n : {size_t{5}, size_t{1 << 15}}) {
        std::vector<double> x(n), a(n), b(n);
        for (double& v : x) v = rng.uniform(-3.0, 3.0);
        for (double& v : a) v = rng.uniform(-3.0, 3.0);
        for (double& v : b) v = rng.uniform(-3.0, 3.0);
        std::vector<double> o1(n), o2(n);
        auto f = [](double v) { return std::tanh(v) + 1.0; };
        kernels::map_serial(o1.data(), x.data(), n, f);
        kernels::map(o2.data(), x.data(), n, f);
        CHECK(std::memcmp(o1.data(), o2.data(), n * 8) == 0);
        auto g = [](double u, double v) { return u * v - u; };
        kernels::zip_serial(o1.data(), a.data(), b.data(), n, g);
        kernels::zip(o2.data(), a.data(), b.data(), n, g);
        CHECK(std::memcmp(o1.data(), o2.data(), n * 8) == 0);
    }
}
