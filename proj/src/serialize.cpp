#include "nnlens/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "nnlens/errors.hpp"

namespace nnlens {

namespace {

static_assert(sizeof(double) == 8);

void put_bytes(std::ostream& os, const void* p, size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class T>
void put_le(std::ostream& os, T v) {
    unsigned char buf[sizeof(T)];
    for (size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(os, buf, sizeof(T));
}

void put_f64_le(std::ostream& os, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_le<uint64_t>(os, bits);
}

template <class T>
T get_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw IoError("container truncated");
    T v = 0;
    for (size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
    return v;
}

double get_f64_le(std::istream& is) {
    uint64_t bits = get_le<uint64_t>(is);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

} // namespace

void save_tensors(const std::filesystem::path& path,
                  const std::vector<std::pair<std::string, Tensor>>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write("NNLT", 4);
    put_le<uint16_t>(os, kContainerVersion);
    put_le<uint32_t>(os, static_cast<uint32_t>(entries.size()));
    for (const auto& [name, t] : entries) {
        if (name.size() > 0xffff) throw IoError("tensor name too long: " + name);
        put_le<uint16_t>(os, static_cast<uint16_t>(name.size()));
        put_bytes(os, name.data(), name.size());
        if (t.rank() > 0xff) throw IoError("tensor rank too large for container");
        unsigned char rank = static_cast<unsigned char>(t.rank());
        put_bytes(os, &rank, 1);
        for (size_t d : t.shape()) put_le<uint32_t>(os, static_cast<uint32_t>(d));
        for (size_t i = 0; i < t.size(); ++i) put_f64_le(os, t[i]);
    }
    os.flush();
    if (!os) throw IoError("write failed for " + path.string());
}

std::vector<std::pair<std::string, Tensor>> load_tensors(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "NNLT", 4) != 0)
        throw IoError(path.string() + ": not a named-tensor container (bad magic)");
    uint16_t version = get_le<uint16_t>(is);
    if (version != kContainerVersion)
        throw IoError(path.string() + ": unsupported container version " + std::to_string(version));
    uint32_t count = get_le<uint32_t>(is);
    std::vector<std::pair<std::string, Tensor>> out;
    out.reserve(count);
    for (uint32_t e = 0; e < count; ++e) {
        uint16_t name_len = get_le<uint16_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw IoError("container truncated in entry name");
        unsigned char rank;
        is.read(reinterpret_cast<char*>(&rank), 1);
        if (!is) throw IoError("container truncated");
        std::vector<size_t> shape(rank);
        size_t n = 1;
        for (size_t i = 0; i < rank; ++i) {
            shape[i] = get_le<uint32_t>(is);
            n *= shape[i];
        }
        std::vector<double> data(n);
        for (size_t i = 0; i < n; ++i) data[i] = get_f64_le(is);
        out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

} // namespace nnlens
