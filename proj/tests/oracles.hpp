// Independent reference implementations used as test oracles. Everything
// here is deliberately written against raw buffers / scalars, not against
// the library's kernels, so the two paths share no code.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <vector>

#include "nnlens/rng.hpp"
#include "nnlens/tensor.hpp"

namespace oracle {

// Naive ijk triple loop.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  size_t m, size_t k, size_t n) {
    std::vector<double> out(m * n, 0.0);
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (size_t kk = 0; kk < k; ++kk) acc += a[i * k + kk] * b[kk * n + j];
            out[i * n + j] = acc;
        }
    return out;
}

inline std::vector<double> softmax_row(const std::vector<double>& x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    std::vector<double> e(x.size());
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        e[i] = std::exp(x[i] - mx);
        s += e[i];
    }
    for (double& v : e) v /= s;
    return e;
}

// Central finite differences of a scalar function of a flat parameter
// vector.
inline std::vector<double> finite_diff(const std::function<double(const std::vector<double>&)>& f,
                                       std::vector<double> x, double eps = 1e-5) {
    std::vector<double> g(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        const double keep = x[i];
        x[i] = keep + eps;
        double hi = f(x);
        x[i] = keep - eps;
        double lo = f(x);
        x[i] = keep;
        g[i] = (hi - lo) / (2.0 * eps);
    }
    return g;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

// ---------------------------------------------------------------------------
// Scalar-loop LSTM, including a zero-embedding occlusion mode. Weight
// layout mirrors the checkpoint convention: wx [in x 4h], wh [h x 4h],
// b [4h], gate columns ordered [i, f, g, o].

struct ScalarLstm {
    size_t embed = 0, hidden = 0, layers = 0, vocab = 0;
    std::vector<double> emb; // [vocab x embed]
    struct Layer {
        std::vector<double> wx, wh, b;
    };
    std::vector<Layer> layer;
    std::vector<double> dec_w, dec_b; // [hidden x vocab], [vocab]

    struct State {
        std::vector<std::vector<double>> h, c;
    };

    State zero_state() const {
        State s;
        s.h.assign(layers, std::vector<double>(hidden, 0.0));
        s.c.assign(layers, std::vector<double>(hidden, 0.0));
        return s;
    }

    void step(const std::vector<double>& x, State& s) const {
        std::vector<double> input = x;
        for (size_t l = 0; l < layers; ++l) {
            const size_t in_dim = l == 0 ? embed : hidden;
            const Layer& L = layer[l];
            std::vector<double> pre(4 * hidden, 0.0);
            for (size_t j = 0; j < 4 * hidden; ++j) {
                double acc = L.b[j];
                for (size_t i = 0; i < in_dim; ++i) acc += input[i] * L.wx[i * 4 * hidden + j];
                for (size_t i = 0; i < hidden; ++i) acc += s.h[l][i] * L.wh[i * 4 * hidden + j];
                pre[j] = acc;
            }
            std::vector<double> ht(hidden);
            for (size_t u = 0; u < hidden; ++u) {
                const double ig = 1.0 / (1.0 + std::exp(-pre[u]));
                const double fg = 1.0 / (1.0 + std::exp(-pre[hidden + u]));
                const double gg = std::tanh(pre[2 * hidden + u]);
                const double og = 1.0 / (1.0 + std::exp(-pre[3 * hidden + u]));
                s.c[l][u] = fg * s.c[l][u] + ig * gg;
                ht[u] = og * std::tanh(s.c[l][u]);
            }
            s.h[l] = ht;
            input = s.h[l];
        }
    }

    std::vector<double> embed_of(int token) const {
        return std::vector<double>(emb.begin() + token * static_cast<long>(embed),
                                   emb.begin() + (token + 1) * static_cast<long>(embed));
    }

    State phrase_state(const std::vector<int>& phrase) const {
        State s = zero_state();
        for (int t : phrase) {
            auto x = embed_of(t);
            step(x, s);
        }
        return s;
    }

    // Final-position logits; tokens whose bit in `keep_mask` (by position
    // via `group_of`) is absent are zero-embedded. Pass all-ones to run
    // the model unmodified.
    std::vector<double> occluded_logits(const std::vector<int>& tokens,
                                        const std::vector<int>& group_of, uint64_t keep_mask,
                                        const std::vector<int>& phrase) const {
        State s = phrase_state(phrase);
        for (size_t t = 0; t < tokens.size(); ++t) {
            std::vector<double> x(embed, 0.0);
            if (keep_mask & (uint64_t{1} << group_of[t])) x = embed_of(tokens[t]);
            step(x, s);
        }
        std::vector<double> logits(vocab);
        for (size_t v = 0; v < vocab; ++v) {
            double acc = dec_b[v];
            for (size_t i = 0; i < hidden; ++i) acc += s.h[layers - 1][i] * dec_w[i * vocab + v];
            logits[v] = acc;
        }
        return logits;
    }
};

// ---------------------------------------------------------------------------
// Shapley via full permutation enumeration (the factorial oracle).

inline void permutations_rec(std::vector<int>& cur, uint64_t used, int n,
                             const std::function<void(const std::vector<int>&)>& visit) {
    if (static_cast<int>(cur.size()) == n) {
        visit(cur);
        return;
    }
    for (int g = 0; g < n; ++g) {
        if (used & (uint64_t{1} << g)) continue;
        cur.push_back(g);
        permutations_rec(cur, used | (uint64_t{1} << g), n, visit);
        cur.pop_back();
    }
}

inline std::vector<double> shapley_permutation_average(
    const std::function<double(uint64_t)>& game, int n) {
    std::vector<double> phi(static_cast<size_t>(n), 0.0);
    size_t count = 0;
    std::vector<int> cur;
    permutations_rec(cur, 0, n, [&](const std::vector<int>& perm) {
        uint64_t mask = 0;
        double prev = game(0);
        for (int g : perm) {
            mask |= uint64_t{1} << g;
            double v = game(mask);
            phi[static_cast<size_t>(g)] += v - prev;
            prev = v;
        }
        ++count;
    });
    for (double& p : phi) p /= static_cast<double>(count);
    return phi;
}

inline nnlens::Tensor random_tensor(std::vector<size_t> shape, nnlens::Rng& rng, double a = 1.0) {
    nnlens::Tensor t(std::move(shape));
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
    return t;
}

} // namespace oracle
