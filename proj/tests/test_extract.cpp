#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <thread>

#include "nnlens/extract.hpp"
#include "oracles.hpp"

using namespace nnlens;

namespace {

std::filesystem::path fresh_dir(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "nnlens_extract_test" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

struct Fixture {
    Vocab vocab;
    Corpus corpus;
    std::unique_ptr<LstmLm> model;

    Fixture() : vocab(build_vocab(Lexicon::builtin())) {
        auto tasks = generate_lakretz_tasks(Lexicon::builtin(), vocab, 5, 12);
        corpus = tasks.at("NounPP");
        LstmConfig cfg{.vocab_size = vocab.size(), .embed_dim = 8, .hidden_dim = 8, .layers = 2};
        model = std::make_unique<LstmLm>(cfg, 31);
        model->set_init_phrase_ids(tokenize(vocab, ". <eos>"));
    }
};

std::string file_bytes(const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

bool dirs_identical(const std::filesystem::path& a, const std::filesystem::path& b) {
    std::vector<std::string> names;
    for (const auto& e : std::filesystem::directory_iterator(a))
        names.push_back(e.path().filename().string());
    for (const std::string& n : names)
        if (file_bytes(a / n) != file_bytes(b / n)) return false;
    size_t count_b = 0;
    for ([[maybe_unused]] const auto& e : std::filesystem::directory_iterator(b)) ++count_b;
    return count_b == names.size();
}

} // namespace

TEST_CASE("extract: keep-all rows and verb-only rows") {
    Fixture fx;
    auto dir = fresh_dir("rows");
    ExtractOptions opt;
    opt.keys = {{0, "hx"}, {1, "fx"}};
    opt.selection = Selection::all();
    extract(*fx.model, fx.corpus, opt, dir);

    ActivationStore store = ActivationStore::open(dir);
    CHECK(store.width({0, "hx"}) == 8);
    Tensor rows = store.read_one(0, {0, "hx"});
    CHECK(rows.rows() == fx.corpus.sentences[0].tokens.size());
    CHECK(rows.cols() == 8);

    auto dir2 = fresh_dir("verb");
    opt.selection = Selection::verb();
    extract(*fx.model, fx.corpus, opt, dir2);
    ActivationStore store2 = ActivationStore::open(dir2);
    for (size_t s = 0; s < fx.corpus.size(); ++s) {
        Tensor r = store2.read_one(static_cast<int>(s), {0, "hx"});
        CHECK(r.rows() == 1);
    }
}

TEST_CASE("extract: stored gates equal a standalone forward pass bit-exactly") {
    Fixture fx;
    auto dir = fresh_dir("oracle");
    ExtractOptions opt;
    opt.keys = {{1, "fx"}};
    extract(*fx.model, fx.corpus, opt, dir);
    ActivationStore store = ActivationStore::open(dir);
    for (size_t s = 0; s < 4; ++s) {
        ForwardResult fr = fx.model->forward(fx.corpus.sentences[s].tokens);
        Tensor expect = fr.activations.at("1.fx");
        Tensor got = store.read_one(static_cast<int>(s), {1, "fx"});
        REQUIRE(got.shape() == expect.shape());
        CHECK(std::memcmp(got.data(), expect.data(), got.size() * 8) == 0);
    }
}

TEST_CASE("extract: flush_every does not change the bytes on disk") {
    Fixture fx;
    ExtractOptions opt;
    opt.keys = {{0, "hx"}, {1, "cx"}};

    auto d1 = fresh_dir("flush1");
    opt.flush_every = 1;
    ExtractStats s1 = extract(*fx.model, fx.corpus, opt, d1);

    auto d32 = fresh_dir("flush32");
    opt.flush_every = 32;
    ExtractStats s32 = extract(*fx.model, fx.corpus, opt, d32);

    CHECK(dirs_identical(d1, d32));
    CHECK(s1.rows_written == s32.rows_written);
    // Coarse memory bound: buffering 1 sentence stays well under buffering
    // everything.
    CHECK(s1.peak_buffered_bytes < s32.peak_buffered_bytes);
    CHECK(s1.peak_buffered_bytes <= 2 * 8 * 8 * 8); // 2 keys x <=8 rows x 8 cols

    // Re-running is byte-identical.
    auto d_again = fresh_dir("flush1_again");
    opt.flush_every = 1;
    extract(*fx.model, fx.corpus, opt, d_again);
    CHECK(dirs_identical(d1, d_again));
}

TEST_CASE("extract: unknown key lists advertised names") {
    Fixture fx;
    ExtractOptions opt;
    opt.keys = {{0, "nope"}};
    try {
        extract(*fx.model, fx.corpus, opt, fresh_dir("err"));
        FAIL("expected KeyError");
    } catch (const KeyError& e) {
        std::string msg = e.what();
        CHECK(msg.find("0.nope") != std::string::npos);
        CHECK(msg.find("0.hx") != std::string::npos);
    }
}

TEST_CASE("store: missing entries and unfinalized directories are rejected") {
    Fixture fx;
    auto dir = fresh_dir("reject");
    ExtractOptions opt;
    opt.keys = {{0, "hx"}};
    extract(*fx.model, fx.corpus, opt, dir);

    ActivationStore store = ActivationStore::open(dir);
    CHECK_THROWS_AS(store.read_one(9999, {0, "hx"}), LookupError);
    try {
        store.read_one(3, {1, "cx"});
        FAIL("expected LookupError");
    } catch (const LookupError& e) {
        CHECK(std::string(e.what()).find("1.cx") != std::string::npos);
    }

    std::filesystem::remove(dir / "FINALIZED");
    CHECK(!ActivationStore::is_finalized(dir));
    CHECK_THROWS_AS(ActivationStore::open(dir), IoError);
}

TEST_CASE("extract: transformer hidden states through the same surface") {
    Fixture fx;
    TransformerConfig cfg{.vocab_size = fx.vocab.size(), .model_dim = 12, .layers = 2,
                          .heads = 2, .ffn_dim = 24, .max_len = 16,
                          .mode = TransformerMode::Causal};
    TransformerLm tf(cfg, 77);
    auto dir = fresh_dir("tf");
    ExtractOptions opt;
    opt.keys = {{0, "hidden"}, {1, "hidden"}};
    opt.selection = Selection::verb();
    extract(tf, fx.corpus, opt, dir);
    ActivationStore store = ActivationStore::open(dir);
    CHECK(store.width({1, "hidden"}) == 12);
    ForwardResult fr = tf.forward(fx.corpus.sentences[2].tokens);
    Tensor got = store.read_one(2, {1, "hidden"});
    const size_t verb = static_cast<size_t>(fx.corpus.sentences[2].meta.verb_index);
    for (size_t j = 0; j < 12; ++j)
        CHECK(got.at(0, j) == fr.activations.at("1.hidden").at(verb, j));
}

TEST_CASE("store: subset reads equal slices of full reads, in parallel too") {
    Fixture fx;
    auto dir = fresh_dir("parallel");
    ExtractOptions opt;
    opt.keys = {{0, "hx"}};
    extract(*fx.model, fx.corpus, opt, dir);
    ActivationStore store = ActivationStore::open(dir);

    std::vector<int> all_ids = store.sentence_ids({0, "hx"});
    auto full = store.read(all_ids, {0, "hx"});
    std::vector<int> subset{all_ids[2], all_ids[5], all_ids[7]};
    auto part = store.read(subset, {0, "hx"});
    for (size_t i = 0; i < subset.size(); ++i)
        CHECK(std::memcmp(part[i].data(), full[static_cast<size_t>(subset[i])].data(),
                          part[i].size() * 8) == 0);

    // Concurrent disjoint readers match the serial result.
    std::vector<std::vector<Tensor>> results(4);
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t)
        threads.emplace_back([&, t] {
            std::vector<int> ids{t, t + 4, t + 8};
            results[static_cast<size_t>(t)] = store.read(ids, {0, "hx"});
        });
    for (auto& th : threads) th.join();
    for (int t = 0; t < 4; ++t)
        for (int j = 0; j < 3; ++j) {
            const Tensor& got = results[static_cast<size_t>(t)][static_cast<size_t>(j)];
            const Tensor& want = full[static_cast<size_t>(t + 4 * j)];
            CHECK(std::memcmp(got.data(), want.data(), got.size() * 8) == 0);
        }
}
