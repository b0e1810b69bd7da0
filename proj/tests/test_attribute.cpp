#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "nnlens/attribute.hpp"
#include "nnlens/corpus.hpp"
#include "oracles.hpp"

using namespace nnlens;

namespace {

Game table_game(std::map<uint64_t, double> table) {
    return [table = std::move(table)](uint64_t mask) {
        return Tensor::scalar(table.at(mask));
    };
}

Game random_game(int players, uint64_t seed) {
    Rng rng(seed);
    std::map<uint64_t, double> table;
    for (uint64_t m = 0; m < (uint64_t{1} << players); ++m) table[m] = rng.uniform(-3.0, 3.0);
    return table_game(std::move(table));
}

Game additive_game(const std::vector<double>& w) {
    return [w](uint64_t mask) {
        double v = 0.0;
        for (size_t i = 0; i < w.size(); ++i)
            if (mask & (uint64_t{1} << i)) v += w[i];
        return Tensor::scalar(v);
    };
}

double max_abs(const std::vector<Tensor>& phi) {
    double m = 0.0;
    for (const Tensor& p : phi)
        for (size_t i = 0; i < p.size(); ++i) m = std::max(m, std::abs(p[i]));
    return m;
}

} // namespace

// ---------------------------------------------------------------------------
// exact_shapley

TEST_CASE("exact_shapley recovers additive games") {
    std::vector<double> w{0.5, -1.25, 2.0, 0.0};
    auto phi = exact_shapley(additive_game(w), 4);
    for (size_t i = 0; i < w.size(); ++i) CHECK(phi[i][0] == doctest::Approx(w[i]).epsilon(1e-12));
}

TEST_CASE("exact_shapley: symmetric two-player product splits evenly") {
    const double x = 1.7, y = -2.3;
    auto game = [&](uint64_t mask) {
        const bool has_x = mask & 1, has_y = mask & 2;
        return Tensor::scalar(has_x && has_y ? x * y : 0.0);
    };
    auto phi = exact_shapley(game, 2);
    CHECK(phi[0][0] == doctest::Approx(x * y / 2).epsilon(1e-12));
    CHECK(phi[1][0] == doctest::Approx(x * y / 2).epsilon(1e-12));
}

TEST_CASE("exact_shapley matches the factorial permutation-average oracle") {
    for (uint64_t seed : {1u, 2u, 3u}) {
        for (int players : {2, 3, 4, 5}) {
            Game game = random_game(players, seed * 100 + players);
            auto phi = exact_shapley(game, players);
            auto scalar_game = [&](uint64_t m) { return game(m)[0]; };
            auto expect = oracle::shapley_permutation_average(scalar_game, players);
            for (int g = 0; g < players; ++g)
                CHECK(std::abs(phi[static_cast<size_t>(g)][0] -
                               expect[static_cast<size_t>(g)]) <= 1e-12);
        }
    }
}

TEST_CASE("exact_shapley axioms: efficiency, symmetry, null player") {
    for (uint64_t seed : {7u, 8u, 9u, 10u}) {
        const int n = 4;
        Game game = random_game(n, seed);
        auto phi = exact_shapley(game, n);
        // Efficiency
        double total = 0.0;
        for (const auto& p : phi) total += p[0];
        CHECK(total == doctest::Approx(game((1 << n) - 1)[0] - game(0)[0]).epsilon(1e-12));
    }
    // Symmetry: two interchangeable players get equal shares.
    auto sym_game = [](uint64_t mask) {
        const int a = (mask & 1) ? 1 : 0;
        const int b = (mask & 2) ? 1 : 0;
        const int c = (mask & 4) ? 1 : 0;
        return Tensor::scalar(double(a + b) * 2.0 + double(c * (a + b)) * 0.5);
    };
    auto phi = exact_shapley(sym_game, 3);
    CHECK(phi[0][0] == doctest::Approx(phi[1][0]).epsilon(1e-12));
    // Null player: no marginal contribution anywhere -> phi = 0.
    auto null_game = [](uint64_t mask) {
        return Tensor::scalar((mask & 1) ? 3.0 : 0.0); // player 1 (bit 1) is null
    };
    auto phi0 = exact_shapley(null_game, 2);
    CHECK(phi0[1][0] == 0.0);
}

TEST_CASE("exact_shapley enforces the group cap") {
    auto game = [](uint64_t) { return Tensor::scalar(0.0); };
    CHECK_THROWS_AS(exact_shapley(game, kExactGroupCap + 1), ContractError);
}

// ---------------------------------------------------------------------------
// sampled_shapley

TEST_CASE("sampled_shapley: additive games are exact at m = 1") {
    std::vector<double> w{1.0, -0.5, 0.25};
    auto phi = sampled_shapley(additive_game(w), 3, 1, 4);
    for (size_t i = 0; i < w.size(); ++i) CHECK(phi[i][0] == doctest::Approx(w[i]).epsilon(1e-12));
}

TEST_CASE("sampled_shapley: telescoping efficiency holds for every m") {
    Game game = random_game(5, 77);
    for (size_t m : {size_t{1}, size_t{3}, size_t{50}}) {
        auto phi = sampled_shapley(game, 5, m, 91);
        double total = 0.0;
        for (const auto& p : phi) total += p[0];
        CHECK(std::abs(total - (game(31)[0] - game(0)[0])) <= 1e-12);
    }
}

TEST_CASE("sampled_shapley: deterministic per seed, varies across seeds") {
    Game game = random_game(5, 13);
    auto a = sampled_shapley(game, 5, 20, 5);
    auto b = sampled_shapley(game, 5, 20, 5);
    auto c = sampled_shapley(game, 5, 20, 6);
    for (size_t g = 0; g < 5; ++g) CHECK(a[g][0] == b[g][0]);
    bool differs = false;
    for (size_t g = 0; g < 5; ++g)
        if (a[g][0] != c[g][0]) differs = true;
    CHECK(differs);
}

TEST_CASE("sampled_shapley converges to exact (6 players, m=2000, 20 seeds)") {
    Game game = random_game(6, 123);
    auto exact = exact_shapley(game, 6);
    const double scale_ref = max_abs(exact);
    double total_err = 0.0;
    size_t count = 0;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        auto est = sampled_shapley(game, 6, 2000, seed);
        for (size_t g = 0; g < 6; ++g) {
            total_err += std::abs(est[g][0] - exact[g][0]);
            ++count;
        }
    }
    CHECK(total_err / double(count) <= 0.05 * scale_ref);
}

// ---------------------------------------------------------------------------
// cd_pairwise

TEST_CASE("cd_pairwise equals exact_shapley for two players") {
    Game game = random_game(2, 31);
    auto exact = exact_shapley(game, 2);
    auto cd = cd_attributions(game, 2, true);
    auto cd_raw = cd_attributions(game, 2, false);
    for (size_t g = 0; g < 2; ++g) {
        CHECK(std::abs(cd[g][0] - exact[g][0]) <= 1e-12);
        CHECK(std::abs(cd_raw[g][0] - exact[g][0]) <= 1e-12);
    }
}

TEST_CASE("cd_pairwise: additive games unchanged by normalization") {
    std::vector<double> w{2.0, -1.0, 0.5};
    for (bool norm : {false, true}) {
        auto phi = cd_attributions(additive_game(w), 3, norm);
        for (size_t g = 0; g < 3; ++g) CHECK(phi[g][0] == doctest::Approx(w[g]).epsilon(1e-12));
    }
}

TEST_CASE("cd_pairwise: 3-player nonlinear game against the hand formula") {
    Game game = random_game(3, 59);
    const uint64_t full = 7;
    for (int g = 0; g < 3; ++g) {
        const uint64_t bit = uint64_t{1} << g;
        double expect = 0.5 * ((game(bit)[0] - game(0)[0]) +
                               (game(full)[0] - game(full & ~bit)[0]));
        Tensor raw = cd_pairwise(game, 3, g);
        CHECK(raw[0] == doctest::Approx(expect).epsilon(1e-12));
    }
    auto norm = cd_attributions(game, 3, true);
    double total = 0.0;
    for (const auto& p : norm) total += p[0];
    CHECK(total == doctest::Approx(game(full)[0] - game(0)[0]).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// slot-form rules

TEST_CASE("rule_linear: zero bias is slot-wise matmul; recomposition holds") {
    Rng rng(3);
    DecomposedTensor x;
    for (int s = 0; s < 4; ++s) x.slots.push_back(oracle::random_tensor({2, 3}, rng));
    Tensor w = oracle::random_tensor({3, 5}, rng);
    Tensor b = oracle::random_tensor({5}, rng);

    DecomposedTensor no_bias = rule_linear(x, w, nullptr);
    for (size_t s = 0; s < x.slots.size(); ++s) {
        Tensor expect = matmul(x.slots[s], w);
        for (size_t i = 0; i < expect.size(); ++i)
            CHECK(no_bias.slots[s][i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }

    DecomposedTensor out = rule_linear(x, w, &b);
    Tensor recomposed = out.recompose();
    Tensor direct = add(matmul(x.recompose(), w), b);
    for (size_t i = 0; i < direct.size(); ++i)
        CHECK(std::abs(recomposed[i] - direct[i]) <= 1e-12);

    // Per-slot oracle with an independent slot loop.
    for (size_t s = 0; s + 1 < x.slots.size(); ++s) {
        auto expect = oracle::matmul(x.slots[s].vec(), w.vec(), 2, 3, 5);
        for (size_t i = 0; i < expect.size(); ++i)
            CHECK(std::abs(out.slots[s][i] - expect[i]) <= 1e-12);
    }
}

TEST_CASE("rule_add: zero operand, commutativity, recomposition") {
    Rng rng(5);
    DecomposedTensor a, b, zero;
    for (int s = 0; s < 3; ++s) {
        a.slots.push_back(oracle::random_tensor({2, 2}, rng));
        b.slots.push_back(oracle::random_tensor({2, 2}, rng));
        zero.slots.push_back(Tensor({2, 2}));
    }
    DecomposedTensor a_plus_zero = rule_add(a, zero);
    for (size_t s = 0; s < a.slots.size(); ++s)
        for (size_t i = 0; i < a.slots[s].size(); ++i)
            CHECK(a_plus_zero.slots[s][i] == a.slots[s][i]);

    DecomposedTensor ab = rule_add(a, b);
    DecomposedTensor ba = rule_add(b, a);
    for (size_t s = 0; s < ab.slots.size(); ++s)
        for (size_t i = 0; i < ab.slots[s].size(); ++i) CHECK(ab.slots[s][i] == ba.slots[s][i]);

    Tensor rec = ab.recompose();
    Tensor direct = add(a.recompose(), b.recompose());
    for (size_t i = 0; i < rec.size(); ++i) CHECK(std::abs(rec[i] - direct[i]) <= 1e-12);

    DecomposedTensor mismatched;
    mismatched.slots.assign(2, Tensor({2, 2}));
    CHECK_THROWS_AS(rule_add(a, mismatched), ContractError);
}

TEST_CASE("rule_interaction: identity leaves slots unchanged") {
    Rng rng(7);
    DecomposedTensor x;
    for (int s = 0; s < 4; ++s) x.slots.push_back(oracle::random_tensor({3}, rng));
    const DecomposedTensor in[] = {x};
    DecomposedTensor out = rule_interaction(in, InteractionFn::Identity,
                                            AttributionMethod::exact());
    for (size_t s = 0; s < x.slots.size(); ++s)
        for (size_t i = 0; i < 3; ++i)
            CHECK(out.slots[s][i] == doctest::Approx(x.slots[s][i]).epsilon(1e-12));
}

TEST_CASE("rule_interaction: sigmoid closed form at G=2 with zero bias") {
    const double beta = 0.8, gamma = -1.4;
    DecomposedTensor x;
    x.slots = {Tensor::scalar(beta), Tensor::scalar(gamma), Tensor::scalar(0.0)};
    const DecomposedTensor in[] = {x};
    DecomposedTensor out = rule_interaction(in, InteractionFn::Sigmoid,
                                            AttributionMethod::exact());
    auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    double expect0 = 0.5 * ((sig(beta) - sig(0.0)) + (sig(beta + gamma) - sig(gamma)));
    CHECK(out.slots[0][0] == doctest::Approx(expect0).epsilon(1e-12));
    CHECK(out.bias()[0] == doctest::Approx(sig(0.0)).epsilon(1e-12));
    // Recomposition: slots plus bias reach sigma(beta + gamma).
    CHECK(out.recompose()[0] == doctest::Approx(sig(beta + gamma)).epsilon(1e-12));
}

TEST_CASE("rule_interaction: elementwise product vs subset-enumeration oracle") {
    Rng rng(11);
    DecomposedTensor a, b;
    for (int s = 0; s < 4; ++s) { // 3 groups + bias
        a.slots.push_back(oracle::random_tensor({4}, rng));
        b.slots.push_back(oracle::random_tensor({4}, rng));
    }
    const DecomposedTensor in[] = {a, b};
    DecomposedTensor out = rule_interaction(in, InteractionFn::Multiply,
                                            AttributionMethod::exact());

    // Independent oracle over the 2^3 coalitions, elementwise.
    for (size_t e = 0; e < 4; ++e) {
        auto game = [&](uint64_t mask) {
            double av = a.slots[3][e], bv = b.slots[3][e];
            for (int g = 0; g < 3; ++g) {
                if (!(mask & (uint64_t{1} << g))) continue;
                av += a.slots[static_cast<size_t>(g)][e];
                bv += b.slots[static_cast<size_t>(g)][e];
            }
            return av * bv;
        };
        auto expect = oracle::shapley_permutation_average(game, 3);
        for (int g = 0; g < 3; ++g)
            CHECK(std::abs(out.slots[static_cast<size_t>(g)][e] -
                           expect[static_cast<size_t>(g)]) <= 1e-10);
        CHECK(std::abs(out.bias()[e] - game(0)) <= 1e-12);
    }
}

TEST_CASE("rule_interaction rejects mismatched groups") {
    DecomposedTensor a, b;
    a.slots.assign(3, Tensor({2}));
    b.slots.assign(4, Tensor({2}));
    const DecomposedTensor in[] = {a, b};
    CHECK_THROWS_AS(rule_interaction(in, InteractionFn::Multiply, AttributionMethod::exact()),
                    ContractError);
}

// ---------------------------------------------------------------------------
// decompose_forward

namespace {

struct LstmSetup {
    Vocab vocab;
    std::unique_ptr<LstmLm> model;
    std::vector<int> tokens;

    explicit LstmSetup(size_t layers = 1, size_t dim = 6, uint64_t seed = 404)
        : vocab(build_vocab(Lexicon::builtin())) {
        LstmConfig cfg{.vocab_size = vocab.size(), .embed_dim = dim, .hidden_dim = dim,
                       .layers = layers};
        model = std::make_unique<LstmLm>(cfg, seed);
        model->set_init_phrase_ids(tokenize(vocab, ". <eos>"));
        tokens = tokenize(vocab, "the athletes near John approve");
    }
};

} // namespace

TEST_CASE("decompose_forward: one group equals full minus bias") {
    LstmSetup s;
    PlayerPartition part;
    part.group_of.assign(s.tokens.size(), 0);
    part.num_groups = 1;
    std::vector<int> targets{s.vocab.id("approve")};
    auto attrs = decompose_forward(*s.model, s.tokens, part, AttributionMethod::exact(), targets);
    REQUIRE(attrs.size() == 1);
    CHECK(attrs[0].contributions.size() == 1);
    CHECK(attrs[0].contributions[0] ==
          doctest::Approx(attrs[0].full_logit - attrs[0].bias).epsilon(1e-10));
}

TEST_CASE("decompose_forward: purely linear model, methods coincide with hand values") {
    // logits = ones(1,T) * X * W, X the token embeddings: contribution of
    // token t is exactly emb[x_t] * W, for every method.
    const size_t T = 4, d = 3, V = 6;
    Rng rng(15);
    Tensor emb = oracle::random_tensor({10, d}, rng);
    Tensor w = oracle::random_tensor({d, V}, rng);
    std::vector<int> tokens{2, 7, 1, 9};

    Trace tr;
    tr.graph = std::make_shared<Graph>();
    {
        Recording rec(*tr.graph);
        Tensor x = embed_rows(track(emb), tokens);
        for (size_t t = 0; t < T; ++t) tr.input_rows.emplace_back(x.node(), t);
        Tensor pooled = matmul(Tensor({1, T}, {1, 1, 1, 1}), x);
        Tensor logits = matmul(pooled, track(w));
        tr.logits_node = logits.node();
        tr.readout_row = 0;
    }

    PlayerPartition part = PlayerPartition::per_token(T);
    std::vector<int> targets{0, 3};
    for (auto method : {AttributionMethod::exact(), AttributionMethod::sampling(25, 3),
                        AttributionMethod::cd_pairwise()}) {
        auto attrs = decompose_trace(tr, part, method, targets);
        for (size_t a = 0; a < targets.size(); ++a) {
            CHECK(std::abs(attrs[a].bias) <= 1e-12);
            for (size_t t = 0; t < T; ++t) {
                double expect = 0.0;
                for (size_t k = 0; k < d; ++k)
                    expect += emb.at(static_cast<size_t>(tokens[t]), k) *
                              w.at(k, static_cast<size_t>(targets[a]));
                CHECK(attrs[a].contributions[t] == doctest::Approx(expect).epsilon(1e-9));
            }
        }
    }
}

TEST_CASE("decompose_forward: exact equals the 2^5 occlusion oracle on a toy LSTM") {
    LstmSetup s(2, 8, 2024);
    REQUIRE(s.tokens.size() == 5);
    PlayerPartition part = PlayerPartition::per_token(5);
    std::vector<int> targets{s.vocab.id("approve"), s.vocab.id("approves")};

    DecomposeDebug dbg;
    auto attrs =
        decompose_forward(*s.model, s.tokens, part, AttributionMethod::exact(), targets, &dbg);

    // Fully independent scalar-loop occlusion oracle.
    oracle::ScalarLstm ref;
    ref.embed = s.model->config().embed_dim;
    ref.hidden = s.model->config().hidden_dim;
    ref.layers = s.model->config().layers;
    ref.vocab = s.model->config().vocab_size;
    ref.emb = s.model->embedding().value.vec();
    for (size_t l = 0; l < ref.layers; ++l)
        ref.layer.push_back({s.model->layer(l).wx.value.vec(), s.model->layer(l).wh.value.vec(),
                             s.model->layer(l).b.value.vec()});
    ref.dec_w = s.model->decoder_w().value.vec();
    ref.dec_b = s.model->decoder_b().value.vec();

    for (size_t a = 0; a < targets.size(); ++a) {
        const size_t tv = static_cast<size_t>(targets[a]);
        auto game = [&](uint64_t mask) {
            return ref.occluded_logits(s.tokens, part.group_of, mask,
                                       s.model->init_phrase_ids())[tv];
        };
        auto expect = oracle::shapley_permutation_average(game, 5);
        for (size_t g = 0; g < 5; ++g)
            CHECK(std::abs(attrs[a].contributions[g] - expect[g]) <= 1e-6);
        CHECK(std::abs(attrs[a].bias - game(0)) <= 1e-9);
        CHECK(std::abs(attrs[a].full_logit - game(31)) <= 1e-9);
    }

    // Undecomposed equivalence at every replayed node.
    CHECK(dbg.max_node_recomposition_error <= 1e-8);
}

TEST_CASE("decompose_forward: efficiency for both model types and all methods") {
    Vocab vocab = build_vocab(Lexicon::builtin());
    std::vector<int> tokens = tokenize(vocab, "the athletes near John approve");

    std::vector<std::unique_ptr<ModelInterface>> models;
    {
        LstmConfig lc{.vocab_size = vocab.size(), .embed_dim = 8, .hidden_dim = 8, .layers = 2};
        auto lstm = std::make_unique<LstmLm>(lc, 5);
        lstm->set_init_phrase_ids(tokenize(vocab, ". <eos>"));
        models.push_back(std::move(lstm));
        TransformerConfig tc{.vocab_size = vocab.size(), .model_dim = 16, .layers = 2,
                             .heads = 4, .ffn_dim = 32, .max_len = 16,
                             .mode = TransformerMode::Causal};
        models.push_back(std::make_unique<TransformerLm>(tc, 6));
        tc.mode = TransformerMode::Masked;
        models.push_back(std::make_unique<TransformerLm>(tc, 7));
    }

    std::vector<int> targets{vocab.id("approve")};
    for (const auto& model : models) {
        std::vector<int> input = tokens;
        if (model->is_masked()) input[4] = Vocab::kMask;
        PlayerPartition part = PlayerPartition::per_token(input.size());
        for (auto method : {AttributionMethod::exact(), AttributionMethod::sampling(40, 9),
                            AttributionMethod::cd_pairwise()}) {
            auto attrs = decompose_forward(*model, input, part, method, targets);
            double total = attrs[0].bias;
            for (double c : attrs[0].contributions) total += c;
            const double tol = 1e-6 * std::max(1.0, std::abs(attrs[0].full_logit));
            CHECK(std::abs(total - attrs[0].full_logit) <= tol);
        }
    }
}

TEST_CASE("decompose_forward: CDPairwise equals Exact whenever G = 2") {
    LstmSetup s(2, 8, 88);
    PlayerPartition part;
    part.group_of = {0, 0, 1, 1, 1};
    part.num_groups = 2;
    std::vector<int> targets{s.vocab.id("approve")};
    auto ex = decompose_forward(*s.model, s.tokens, part, AttributionMethod::exact(), targets);
    auto cd =
        decompose_forward(*s.model, s.tokens, part, AttributionMethod::cd_pairwise(), targets);
    for (size_t g = 0; g < 2; ++g)
        CHECK(std::abs(ex[0].contributions[g] - cd[0].contributions[g]) <= 1e-12);
    CHECK(std::abs(ex[0].bias - cd[0].bias) <= 1e-12);
}

TEST_CASE("decompose_forward: sampling determinism and convergence direction") {
    LstmSetup s(1, 6, 3030);
    PlayerPartition part = PlayerPartition::per_token(5);
    std::vector<int> targets{s.vocab.id("approve")};

    auto a = decompose_forward(*s.model, s.tokens, part, AttributionMethod::sampling(30, 4),
                               targets);
    auto b = decompose_forward(*s.model, s.tokens, part, AttributionMethod::sampling(30, 4),
                               targets);
    CHECK(a[0].contributions == b[0].contributions);

    auto exact = decompose_forward(*s.model, s.tokens, part, AttributionMethod::exact(), targets);
    double err_small = 0.0, err_large = 0.0;
    for (uint64_t seed = 0; seed < 6; ++seed) {
        auto small = decompose_forward(*s.model, s.tokens, part,
                                       AttributionMethod::sampling(4, seed), targets);
        auto large = decompose_forward(*s.model, s.tokens, part,
                                       AttributionMethod::sampling(400, seed), targets);
        for (size_t g = 0; g < 5; ++g) {
            err_small += std::abs(small[0].contributions[g] - exact[0].contributions[g]);
            err_large += std::abs(large[0].contributions[g] - exact[0].contributions[g]);
        }
    }
    CHECK(err_large < err_small);
}

TEST_CASE("decompose_forward: contract errors") {
    LstmSetup s;
    PlayerPartition part = PlayerPartition::per_token(5);
    std::vector<int> targets{1};

    PlayerPartition wrong = part;
    wrong.group_of.pop_back();
    CHECK_THROWS_AS(
        decompose_forward(*s.model, s.tokens, wrong, AttributionMethod::exact(), targets),
        ContractError);

    std::vector<int> bad_target{static_cast<int>(s.vocab.size())};
    CHECK_THROWS_AS(
        decompose_forward(*s.model, s.tokens, part, AttributionMethod::exact(), bad_target),
        VocabError);

    PlayerPartition many;
    many.group_of.assign(s.tokens.size(), 0);
    many.num_groups = kExactGroupCap + 1;
    CHECK_THROWS_AS(
        decompose_forward(*s.model, s.tokens, many, AttributionMethod::exact(), targets),
        ContractError);
}

TEST_CASE("decompose_trace: unsupported primitive raises a capability error") {
    Trace tr;
    tr.graph = std::make_shared<Graph>();
    std::vector<int> targets_ce{0, 1};
    {
        Recording rec(*tr.graph);
        Tensor table({4, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
        std::vector<int> ids{0, 1};
        Tensor x = embed_rows(track(table), ids);
        tr.input_rows.emplace_back(x.node(), 0);
        tr.input_rows.emplace_back(x.node(), 1);
        // cross_entropy has no decomposition rule.
        Tensor bad = cross_entropy(x, targets_ce);
        tr.logits_node = bad.node();
        tr.readout_row = 0;
    }
    PlayerPartition part = PlayerPartition::per_token(2);
    std::vector<int> targets{0};
    try {
        decompose_trace(tr, part, AttributionMethod::exact(), targets);
        FAIL("expected CapabilityError");
    } catch (const CapabilityError& e) {
        CHECK(std::string(e.what()).find("cross_entropy") != std::string::npos);
    }
}

TEST_CASE("render_attribution produces the per-token layout") {
    Attribution a;
    a.target = 3;
    a.full_logit = 1.25;
    a.bias = 0.5;
    a.contributions = {0.25, 0.5};
    std::vector<std::string> tokens{"the", "athletes"};
    PlayerPartition part = PlayerPartition::per_token(2);
    std::string text = render_attribution(a, tokens, part, "approve");
    CHECK(text.find("approve") != std::string::npos);
    CHECK(text.find("athletes") != std::string::npos);
    CHECK(text.find("+0.500") != std::string::npos);
    CHECK(text.find("1.2500") != std::string::npos);
}
