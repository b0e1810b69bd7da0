#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "nnlens/corpus.hpp"
#include "nnlens/model.hpp"

namespace nnlens {

// Pure, deterministic position filter applied during extraction.
class Selection {
public:
    using Fn = std::function<bool(const SentenceMeta&, size_t)>;

    static Selection all();
    static Selection verb();    // only the verb position
    static Selection subject(); // only the subject position
    static Selection custom(std::string name, Fn fn);
    static Selection named(const std::string& name); // "all" | "verb" | "subject"

    bool keep(const SentenceMeta& meta, size_t position) const { return fn_(meta, position); }
    const std::string& name() const { return name_; }

private:
    Selection(std::string name, Fn fn) : name_(std::move(name)), fn_(std::move(fn)) {}
    std::string name_;
    Fn fn_;
};

struct ExtractOptions {
    std::vector<ActivationKey> keys;
    Selection selection = Selection::all();
    size_t flush_every = 8; // sentences buffered between disk flushes
};

struct ExtractStats {
    size_t sentences = 0;
    size_t rows_written = 0;
    size_t peak_buffered_bytes = 0; // coarse memory-bound accounting
};

// Runs the model over the corpus and streams the selected activation rows
// to `out_dir`. Rewrites the directory from scratch; a FINALIZED marker is
// written only after the index, so interrupted stores stay invalid.
ExtractStats extract(const ModelInterface& model, const Corpus& corpus,
                     const ExtractOptions& options, const std::filesystem::path& out_dir);

// Read-only view of a finalized store. Safe for concurrent readers.
class ActivationStore {
public:
    static ActivationStore open(const std::filesystem::path& dir);
    static bool is_finalized(const std::filesystem::path& dir);

    std::vector<std::string> keys() const;
    size_t width(const ActivationKey& key) const;
    bool has(int sentence_id, const ActivationKey& key) const;
    // Rows stored for one sentence, shape [rows x width].
    Tensor read_one(int sentence_id, const ActivationKey& key) const;
    // Per-sentence tensors in the order of `sentence_ids`.
    std::vector<Tensor> read(std::span<const int> sentence_ids, const ActivationKey& key) const;
    std::vector<int> sentence_ids(const ActivationKey& key) const;

    const std::filesystem::path& dir() const { return dir_; }

private:
    struct Entry {
        uint64_t offset; // bytes into the key's data file
        size_t rows;
    };
    struct KeyIndex {
        std::string file;
        size_t width = 0;
        std::map<int, Entry> entries;
    };
    std::filesystem::path dir_;
    std::map<std::string, KeyIndex> index_;

    const KeyIndex& key_index(const ActivationKey& key) const;
};

} // namespace nnlens
