#include "nnlens/extract.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "nnlens/errors.hpp"

namespace nnlens {

using ordered_json = nlohmann::ordered_json;

Selection Selection::all() {
    return Selection("all", [](const SentenceMeta&, size_t) { return true; });
}

Selection Selection::verb() {
    return Selection("verb", [](const SentenceMeta& m, size_t pos) {
        return static_cast<int>(pos) == m.verb_index;
    });
}

Selection Selection::subject() {
    return Selection("subject", [](const SentenceMeta& m, size_t pos) {
        return static_cast<int>(pos) == m.subject_index;
    });
}

Selection Selection::custom(std::string name, Fn fn) {
    return Selection(std::move(name), std::move(fn));
}

Selection Selection::named(const std::string& name) {
    if (name == "all") return all();
    if (name == "verb") return verb();
    if (name == "subject") return subject();
    throw ContractError("unknown selection '" + name + "' (expected all, verb, or subject)");
}

namespace {

std::string key_file_name(const ActivationKey& k) {
    return "l" + std::to_string(k.layer) + "_" + k.name + ".bin";
}

void write_f64_le(std::ofstream& os, const double* p, size_t n) {
    // Little-endian hosts can dump the buffer directly.
    static_assert(std::endian::native == std::endian::little);
    os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n * 8));
}

} // namespace

ExtractStats extract(const ModelInterface& model, const Corpus& corpus,
                     const ExtractOptions& options, const std::filesystem::path& out_dir) {
    if (options.keys.empty()) throw ContractError("extract: no activation keys requested");
    const auto advertised = model.activation_names();
    for (const ActivationKey& k : options.keys) {
        if (std::find(advertised.begin(), advertised.end(), k) == advertised.end()) {
            std::ostringstream os;
            os << "extract: key '" << k.str() << "' is not advertised by the model; available:";
            for (const ActivationKey& a : advertised) os << " " << a.str();
            throw KeyError(os.str());
        }
    }
    const size_t flush_every = std::max<size_t>(1, options.flush_every);

    std::error_code ec;
    std::filesystem::remove(out_dir / "FINALIZED", ec);
    std::filesystem::create_directories(out_dir);

    struct PendingRows {
        int sentence_id;
        Tensor rows; // [n x width], possibly n == 0
    };
    struct KeyState {
        std::ofstream file;
        uint64_t offset = 0;
        size_t width = 0;
        std::vector<PendingRows> pending;
        ordered_json entries = ordered_json::array();
    };
    std::map<std::string, KeyState> states;
    for (const ActivationKey& k : options.keys) {
        KeyState st;
        st.file.open(out_dir / key_file_name(k), std::ios::binary | std::ios::trunc);
        if (!st.file) throw IoError("extract: cannot open " + (out_dir / key_file_name(k)).string());
        states.emplace(k.str(), std::move(st));
    }

    ExtractStats stats;
    size_t buffered_bytes = 0;

    auto flush = [&]() {
        for (auto& [key, st] : states) {
            for (PendingRows& p : st.pending) {
                const size_t nbytes = p.rows.size() * 8;
                if (p.rows.size() > 0) write_f64_le(st.file, p.rows.data(), p.rows.size());
                if (!st.file) throw IoError("extract: write failed for key " + key);
                st.entries.push_back({{"sentence_id", p.sentence_id},
                                      {"offset", st.offset},
                                      {"rows", p.rows.size() / std::max<size_t>(1, st.width)}});
                st.offset += nbytes;
            }
            st.pending.clear();
        }
        buffered_bytes = 0;
    };

    for (size_t s = 0; s < corpus.sentences.size(); ++s) {
        const Sentence& sent = corpus.sentences[s];
        ForwardResult fr = model.forward(sent.tokens);
        std::vector<size_t> positions;
        for (size_t p = 0; p < sent.tokens.size(); ++p)
            if (options.selection.keep(sent.meta, p)) positions.push_back(p);

        for (const ActivationKey& k : options.keys) {
            const Tensor& act = fr.activations.at(k.str());
            const size_t width = act.cols();
            KeyState& st = states.at(k.str());
            if (st.width == 0)
                st.width = width;
            else if (st.width != width)
                throw IoError("extract: width changed for key " + k.str());
            // An empty selection yields a zero-row entry with no payload.
            PendingRows p{static_cast<int>(s), Tensor()};
            if (!positions.empty()) {
                Tensor rows({positions.size(), width});
                for (size_t i = 0; i < positions.size(); ++i)
                    std::memcpy(rows.data() + i * width, act.data() + positions[i] * width,
                                width * 8);
                p.rows = std::move(rows);
            }
            buffered_bytes += p.rows.size() * 8;
            stats.rows_written += positions.size();
            st.pending.push_back(std::move(p));
        }
        ++stats.sentences;
        stats.peak_buffered_bytes = std::max(stats.peak_buffered_bytes, buffered_bytes);
        if ((s + 1) % flush_every == 0) flush();
    }
    flush();

    ordered_json index;
    for (const ActivationKey& k : options.keys) {
        KeyState& st = states.at(k.str());
        st.file.flush();
        if (!st.file) throw IoError("extract: flush failed for key " + k.str());
        ordered_json jk;
        jk["file"] = key_file_name(k);
        jk["width"] = st.width;
        jk["entries"] = std::move(st.entries);
        index[k.str()] = std::move(jk);
    }
    {
        std::ofstream os(out_dir / "index.json", std::ios::trunc);
        if (!os) throw IoError("extract: cannot write index.json");
        os << index.dump(2) << "\n";
        os.flush();
        if (!os) throw IoError("extract: cannot write index.json");
    }
    {
        std::ofstream os(out_dir / "FINALIZED", std::ios::trunc);
        os << "ok\n";
        if (!os) throw IoError("extract: cannot write FINALIZED marker");
    }
    return stats;
}

// ---------------------------------------------------------------------------
// Reader

bool ActivationStore::is_finalized(const std::filesystem::path& dir) {
    return std::filesystem::exists(dir / "FINALIZED");
}

ActivationStore ActivationStore::open(const std::filesystem::path& dir) {
    if (!is_finalized(dir))
        throw IoError("activation store " + dir.string() +
                      " is not finalized (incomplete extraction?)");
    std::ifstream is(dir / "index.json");
    if (!is) throw IoError("cannot open " + (dir / "index.json").string());
    ordered_json index;
    try {
        is >> index;
    } catch (const std::exception& e) {
        throw ParseError((dir / "index.json").string() + ": " + e.what());
    }
    ActivationStore store;
    store.dir_ = dir;
    for (auto it = index.begin(); it != index.end(); ++it) {
        KeyIndex ki;
        ki.file = it.value().at("file").get<std::string>();
        ki.width = it.value().at("width").get<size_t>();
        for (const auto& e : it.value().at("entries"))
            ki.entries[e.at("sentence_id").get<int>()] = {e.at("offset").get<uint64_t>(),
                                                          e.at("rows").get<size_t>()};
        store.index_.emplace(it.key(), std::move(ki));
    }
    return store;
}

std::vector<std::string> ActivationStore::keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : index_) out.push_back(k);
    return out;
}

const ActivationStore::KeyIndex& ActivationStore::key_index(const ActivationKey& key) const {
    auto it = index_.find(key.str());
    if (it == index_.end())
        throw LookupError("store has no key '" + key.str() + "'");
    return it->second;
}

size_t ActivationStore::width(const ActivationKey& key) const { return key_index(key).width; }

bool ActivationStore::has(int sentence_id, const ActivationKey& key) const {
    auto it = index_.find(key.str());
    return it != index_.end() && it->second.entries.count(sentence_id) != 0;
}

Tensor ActivationStore::read_one(int sentence_id, const ActivationKey& key) const {
    const KeyIndex& ki = key_index(key);
    auto it = ki.entries.find(sentence_id);
    if (it == ki.entries.end())
        throw LookupError("store has no entry for (sentence " + std::to_string(sentence_id) +
                          ", key " + key.str() + ")");
    const Entry& e = it->second;
    if (e.rows == 0) return Tensor(); // empty selection for this sentence
    Tensor out({e.rows, ki.width});
    std::ifstream is(dir_ / ki.file, std::ios::binary);
    if (!is) throw IoError("cannot open " + (dir_ / ki.file).string());
    is.seekg(static_cast<std::streamoff>(e.offset));
    is.read(reinterpret_cast<char*>(out.data()),
            static_cast<std::streamsize>(e.rows * ki.width * 8));
    if (!is) throw IoError("short read from " + (dir_ / ki.file).string());
    return out;
}

std::vector<Tensor> ActivationStore::read(std::span<const int> sentence_ids,
                                          const ActivationKey& key) const {
    std::vector<Tensor> out;
    out.reserve(sentence_ids.size());
    for (int id : sentence_ids) out.push_back(read_one(id, key));
    return out;
}

std::vector<int> ActivationStore::sentence_ids(const ActivationKey& key) const {
    const KeyIndex& ki = key_index(key);
    std::vector<int> out;
    out.reserve(ki.entries.size());
    for (const auto& [id, e] : ki.entries) out.push_back(id);
    return out;
}

} // namespace nnlens
