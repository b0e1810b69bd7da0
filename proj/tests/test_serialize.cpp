#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "nnlens/serialize.hpp"
#include "oracles.hpp"

using namespace nnlens;

namespace {

std::filesystem::path tmp_file(const char* name) {
    auto dir = std::filesystem::temp_directory_path() / "nnlens_serialize_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

} // namespace

TEST_CASE("named-tensor container round trip is bit-exact") {
    Rng rng(1);
    std::vector<std::pair<std::string, Tensor>> entries;
    entries.emplace_back("emb", oracle::random_tensor({7, 3}, rng));
    entries.emplace_back("l0.wx", oracle::random_tensor({4}, rng));
    entries.emplace_back("dec.b", Tensor({1}, {-0.0}));
    auto path = tmp_file("roundtrip.nnlt");
    save_tensors(path, entries);
    auto loaded = load_tensors(path);
    REQUIRE(loaded.size() == entries.size());
    for (size_t i = 0; i < entries.size(); ++i) {
        CHECK(loaded[i].first == entries[i].first);
        CHECK(loaded[i].second.shape() == entries[i].second.shape());
        CHECK(std::memcmp(loaded[i].second.data(), entries[i].second.data(),
                          entries[i].second.size() * 8) == 0);
    }
}

TEST_CASE("container header layout is byte-exact") {
    auto path = tmp_file("layout.nnlt");
    save_tensors(path, {{"ab", Tensor({1, 2}, {1.0, 2.0})}});
    std::ifstream is(path, std::ios::binary);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    // magic, version u16 LE, count u32 LE
    REQUIRE(bytes.size() == 4 + 2 + 4 + 2 + 2 + 1 + 8 + 16);
    CHECK(std::memcmp(bytes.data(), "NNLT", 4) == 0);
    CHECK(bytes[4] == 1);
    CHECK(bytes[5] == 0);
    CHECK(bytes[6] == 1);
    CHECK(bytes[7] == 0);
    CHECK(bytes[8] == 0);
    CHECK(bytes[9] == 0);
    // name length u16 = 2, name "ab"
    CHECK(bytes[10] == 2);
    CHECK(bytes[11] == 0);
    CHECK(bytes[12] == 'a');
    CHECK(bytes[13] == 'b');
    // rank u8 = 2, dims u32 = 1, 2
    CHECK(bytes[14] == 2);
    CHECK(bytes[15] == 1);
    CHECK(bytes[19] == 2);
    // payload: 1.0 little-endian f64
    uint64_t one_bits;
    double one = 1.0;
    std::memcpy(&one_bits, &one, 8);
    for (int i = 0; i < 8; ++i)
        CHECK(bytes[23 + static_cast<size_t>(i)] == ((one_bits >> (8 * i)) & 0xff));
}

TEST_CASE("container rejects bad magic and truncation") {
    auto path = tmp_file("bad.nnlt");
    {
        std::ofstream os(path, std::ios::binary | std::ios::trunc);
        os << "JUNKJUNKJUNK";
    }
    CHECK_THROWS_AS(load_tensors(path), IoError);

    auto trunc = tmp_file("trunc.nnlt");
    save_tensors(trunc, {{"w", Tensor({4}, {1, 2, 3, 4})}});
    auto size = std::filesystem::file_size(trunc);
    std::filesystem::resize_file(trunc, size - 9);
    CHECK_THROWS_AS(load_tensors(trunc), IoError);
}
