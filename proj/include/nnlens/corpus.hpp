#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace nnlens {

// Word-level vocabulary with fixed special tokens at ids 0..3.
class Vocab {
public:
    static constexpr int kUnk = 0;
    static constexpr int kPad = 1;
    static constexpr int kMask = 2;
    static constexpr int kEos = 3;

    Vocab();

    // Idempotent insert; returns the token's id.
    int add(const std::string& token);
    // Exact lookup, -1 if absent.
    int id(const std::string& token) const;
    // Word lookup used by tokenize: verbatim match first (keeps proper
    // names cased), then lowercased, else <unk>.
    int lookup_word(const std::string& word) const;
    const std::string& token(int id) const;
    bool contains(const std::string& token) const { return id(token) >= 0; }
    size_t size() const { return tokens_.size(); }

    // FNV-1a over all tokens in id order; stored in checkpoint sidecars.
    uint64_t hash() const;

    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

// Whitespace split + per-word vocabulary lookup.
std::vector<int> tokenize(const Vocab& vocab, const std::string& text);

struct SentenceMeta {
    std::string task;
    std::string condition;       // e.g. "S", "P", "SS", "SP", ...
    int subject_index = -1;
    int verb_index = -1;
    int verb_correct = -1;       // token id agreeing with the subject
    int verb_wrong = -1;         // the opposite-number form
    std::vector<int> attractor_indices;
};

struct Sentence {
    std::vector<int> tokens;
    SentenceMeta meta;
};

struct Corpus {
    std::string task;
    std::vector<Sentence> sentences;

    size_t size() const { return sentences.size(); }
};

// Word lists backing the template generators. Noun and verb entries are
// (singular, plural) pairs; every surface form must be a single token.
struct Lexicon {
    std::vector<std::pair<std::string, std::string>> nouns;
    std::vector<std::pair<std::string, std::string>> verbs; // (3sg, plural)
    std::vector<std::string> names;
    std::vector<std::string> prepositions;
    std::vector<std::string> adverbs;
    std::vector<std::string> conjunctions;

    static Lexicon builtin();
    static Lexicon load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    void validate() const;
};

// Vocabulary covering the lexicon plus "the", ".", and the specials.
Vocab build_vocab(const Lexicon& lex);

const std::vector<std::string>& lakretz_task_names();

// Deterministic generation of the seven agreement-template tasks.
// Each task's sentences are distinct and split evenly (at most 1 apart) over its
// conditions; throws GenerationError when `per_task_count` exceeds the
// number of distinct fillings, reporting the maximum.
std::map<std::string, Corpus> generate_lakretz_tasks(const Lexicon& lex, const Vocab& vocab,
                                                     uint64_t seed, size_t per_task_count);

// JSON-lines persistence: one sentence per line, surface tokens + meta.
void save_corpus(const Corpus& corpus, const Vocab& vocab, const std::filesystem::path& path);
Corpus load_corpus(const std::filesystem::path& path, const Vocab& vocab);

} // namespace nnlens
