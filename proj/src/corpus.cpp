#include "nnlens/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "nnlens/errors.hpp"
#include "nnlens/rng.hpp"

namespace nnlens {

using ordered_json = nlohmann::ordered_json;

namespace {

std::string to_lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

} // namespace

Vocab::Vocab() {
    add("<unk>");
    add("<pad>");
    add("<mask>");
    add("<eos>");
}

int Vocab::add(const std::string& token) {
    auto it = ids_.find(token);
    if (it != ids_.end()) return it->second;
    int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    ids_.emplace(token, id);
    return id;
}

int Vocab::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? -1 : it->second;
}

int Vocab::lookup_word(const std::string& word) const {
    int i = id(word);
    if (i >= 0) return i;
    i = id(to_lower(word));
    return i >= 0 ? i : kUnk;
}

const std::string& Vocab::token(int id) const {
    if (id < 0 || static_cast<size_t>(id) >= tokens_.size())
        throw VocabError("token id " + std::to_string(id) + " out of range [0, " +
                         std::to_string(tokens_.size()) + ")");
    return tokens_[static_cast<size_t>(id)];
}

uint64_t Vocab::hash() const {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const std::string& t : tokens_) {
        for (char c : t) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ULL;
        }
        h ^= 0xff;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void Vocab::save(const std::filesystem::path& path) const {
    ordered_json j = ordered_json::array();
    for (const std::string& t : tokens_) j.push_back(t);
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << j.dump() << "\n";
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    ordered_json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    Vocab v;
    if (!j.is_array() || j.size() < 4)
        throw ParseError(path.string() + ": expected a token array with the 4 specials");
    for (size_t i = 0; i < 4; ++i)
        if (j[i].get<std::string>() != v.tokens_[i])
            throw ParseError(path.string() + ": special token mismatch at id " + std::to_string(i));
    for (size_t i = 4; i < j.size(); ++i) v.add(j[i].get<std::string>());
    return v;
}

std::vector<int> tokenize(const Vocab& vocab, const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string word;
    while (is >> word) out.push_back(vocab.lookup_word(word));
    return out;
}

// ---------------------------------------------------------------------------
// Lexicon

Lexicon Lexicon::builtin() {
    Lexicon lex;
    lex.nouns = {
        {"athlete", "athletes"},   {"farmer", "farmers"},     {"woman", "women"},
        {"uncle", "uncles"},       {"aunt", "aunts"},         {"table", "tables"},
        {"chair", "chairs"},       {"bike", "bikes"},         {"car", "cars"},
        {"dog", "dogs"},           {"cat", "cats"},           {"bird", "birds"},
        {"teacher", "teachers"},   {"student", "students"},   {"doctor", "doctors"},
        {"lawyer", "lawyers"},     {"friend", "friends"},     {"neighbor", "neighbors"},
        {"sister", "sisters"},     {"brother", "brothers"},   {"king", "kings"},
        {"queen", "queens"},
    };
    lex.verbs = {
        {"approves", "approve"},       {"avoids", "avoid"},     {"understands", "understand"},
        {"knows", "know"},             {"remembers", "remember"}, {"sees", "see"},
        {"likes", "like"},             {"admires", "admire"},   {"confuses", "confuse"},
        {"greets", "greet"},           {"observes", "observe"}, {"respects", "respect"},
        {"supports", "support"},       {"watches", "watch"},    {"welcomes", "welcome"},
    };
    lex.names = {"John", "Mary", "Paul", "Anna", "Peter", "Sarah", "James", "Laura", "David", "Emma"};
    lex.prepositions = {"near", "beside", "behind", "above", "below", "across"};
    lex.adverbs = {"probably", "certainly", "overtly", "deliberately",
                   "clearly", "obviously", "really", "definitely"};
    lex.conjunctions = {"and"};
    return lex;
}

void Lexicon::validate() const {
    auto single_token = [](const std::string& s) {
        return !s.empty() && s.find_first_of(" \t\n") == std::string::npos;
    };
    if (nouns.empty() || verbs.empty() || names.empty() || prepositions.empty() ||
        adverbs.empty() || conjunctions.empty())
        throw ContractError("lexicon: every category must be non-empty");
    for (const auto& [s, p] : nouns)
        if (!single_token(s) || !single_token(p))
            throw ContractError("lexicon: noun forms must be single tokens: '" + s + "'/'" + p + "'");
    for (const auto& [s, p] : verbs)
        if (!single_token(s) || !single_token(p))
            throw ContractError("lexicon: verb forms must be single tokens: '" + s + "'/'" + p + "'");
    for (const auto& list : {names, prepositions, adverbs, conjunctions})
        for (const std::string& w : list)
            if (!single_token(w)) throw ContractError("lexicon: '" + w + "' is not a single token");
}

void Lexicon::save(const std::filesystem::path& path) const {
    ordered_json j;
    j["nouns"] = ordered_json::array();
    for (const auto& [s, p] : nouns) j["nouns"].push_back({s, p});
    j["verbs"] = ordered_json::array();
    for (const auto& [s, p] : verbs) j["verbs"].push_back({s, p});
    j["names"] = names;
    j["prepositions"] = prepositions;
    j["adverbs"] = adverbs;
    j["conjunctions"] = conjunctions;
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << "\n";
}

Lexicon Lexicon::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    ordered_json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    Lexicon lex;
    try {
        for (const auto& pair : j.at("nouns"))
            lex.nouns.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
        for (const auto& pair : j.at("verbs"))
            lex.verbs.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
        lex.names = j.at("names").get<std::vector<std::string>>();
        lex.prepositions = j.at("prepositions").get<std::vector<std::string>>();
        lex.adverbs = j.at("adverbs").get<std::vector<std::string>>();
        lex.conjunctions = j.at("conjunctions").get<std::vector<std::string>>();
    } catch (const ordered_json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    lex.validate();
    return lex;
}

Vocab build_vocab(const Lexicon& lex) {
    Vocab v;
    v.add("the");
    v.add(".");
    for (const auto& [s, p] : lex.nouns) {
        v.add(s);
        v.add(p);
    }
    for (const auto& [s, p] : lex.verbs) {
        v.add(s);
        v.add(p);
    }
    for (const std::string& w : lex.names) v.add(w);
    for (const std::string& w : lex.prepositions) v.add(w);
    for (const std::string& w : lex.adverbs) v.add(w);
    for (const std::string& w : lex.conjunctions) v.add(w);
    return v;
}

// ---------------------------------------------------------------------------
// Template generation

const std::vector<std::string>& lakretz_task_names() {
    static const std::vector<std::string> names = {"Simple",  "Adv",    "2Adv",      "CoAdv",
                                                   "NamePP",  "NounPP", "NounPPAdv"};
    return names;
}

namespace {

// One template filling: indices into the lexicon categories used by a task.
struct Filling {
    size_t noun, verb;
    size_t prep = 0, name = 0, noun2 = 0, adv = 0, adv2 = 0;
};

struct TaskSpec {
    std::string name;
    std::vector<std::string> conditions;
    // Count of distinct fillings per condition.
    size_t (*space)(const Lexicon&);
    // Decode a flat index in [0, space) into a filling.
    Filling (*decode)(const Lexicon&, size_t);
    // Render tokens + meta for a filling under a condition.
    Sentence (*render)(const Lexicon&, const Vocab&, const Filling&, const std::string&);
};

bool subject_plural(const std::string& condition) { return condition[0] == 'P'; }

// Verb ids for a condition: (correct, wrong) under the subject's number.
std::pair<int, int> verb_ids(const Lexicon& lex, const Vocab& v, size_t verb,
                             const std::string& condition) {
    const auto& [sg, pl] = lex.verbs[verb];
    int sg_id = v.id(sg), pl_id = v.id(pl);
    return subject_plural(condition) ? std::make_pair(pl_id, sg_id) : std::make_pair(sg_id, pl_id);
}

const std::string& noun_form(const Lexicon& lex, size_t noun, bool plural) {
    return plural ? lex.nouns[noun].second : lex.nouns[noun].first;
}

Sentence finish(const Vocab& v, std::vector<std::string> words, const std::string& task,
                const std::string& condition, int subject_index, int verb_index,
                std::pair<int, int> verbs, std::vector<int> attractors) {
    Sentence s;
    s.tokens.reserve(words.size());
    for (const std::string& w : words) s.tokens.push_back(v.lookup_word(w));
    s.meta.task = task;
    s.meta.condition = condition;
    s.meta.subject_index = subject_index;
    s.meta.verb_index = verb_index;
    s.meta.verb_correct = verbs.first;
    s.meta.verb_wrong = verbs.second;
    s.meta.attractor_indices = std::move(attractors);
    return s;
}

// Simple: "the N V"
size_t simple_space(const Lexicon& l) { return l.nouns.size() * l.verbs.size(); }
Filling simple_decode(const Lexicon& l, size_t i) {
    return {.noun = i / l.verbs.size(), .verb = i % l.verbs.size()};
}
Sentence simple_render(const Lexicon& l, const Vocab& v, const Filling& f,
                       const std::string& cond) {
    auto verbs = verb_ids(l, v, f.verb, cond);
    return finish(v, {"the", noun_form(l, f.noun, subject_plural(cond)), v.token(verbs.first)},
                  "Simple", cond, 1, 2, verbs, {});
}

// Adv: "the N ADV V"
size_t adv_space(const Lexicon& l) { return l.nouns.size() * l.adverbs.size() * l.verbs.size(); }
Filling adv_decode(const Lexicon& l, size_t i) {
    Filling f;
    f.verb = i % l.verbs.size();
    i /= l.verbs.size();
    f.adv = i % l.adverbs.size();
    f.noun = i / l.adverbs.size();
    return f;
}
Sentence adv_render(const Lexicon& l, const Vocab& v, const Filling& f, const std::string& cond) {
    auto verbs = verb_ids(l, v, f.verb, cond);
    return finish(v,
                  {"the", noun_form(l, f.noun, subject_plural(cond)), l.adverbs[f.adv],
                   v.token(verbs.first)},
                  "Adv", cond, 1, 3, verbs, {});
}

// Ordered pairs of distinct adverbs, used by 2Adv and CoAdv.
std::pair<size_t, size_t> decode_distinct_pair(size_t i, size_t n) {
    size_t a = i / (n - 1);
    size_t b = i % (n - 1);
    if (b >= a) ++b;
    return {a, b};
}

// 2Adv: "the N ADV1 ADV2 V"
size_t twoadv_space(const Lexicon& l) {
    return l.nouns.size() * l.adverbs.size() * (l.adverbs.size() - 1) * l.verbs.size();
}
Filling twoadv_decode(const Lexicon& l, size_t i) {
    Filling f;
    f.verb = i % l.verbs.size();
    i /= l.verbs.size();
    const size_t pairs = l.adverbs.size() * (l.adverbs.size() - 1);
    auto [a, b] = decode_distinct_pair(i % pairs, l.adverbs.size());
    f.adv = a;
    f.adv2 = b;
    f.noun = i / pairs;
    return f;
}
Sentence twoadv_render(const Lexicon& l, const Vocab& v, const Filling& f,
                       const std::string& cond) {
    auto verbs = verb_ids(l, v, f.verb, cond);
    return finish(v,
                  {"the", noun_form(l, f.noun, subject_plural(cond)), l.adverbs[f.adv],
                   l.adverbs[f.adv2], v.token(verbs.first)},
                  "2Adv", cond, 1, 4, verbs, {});
}

// CoAdv: "the N ADV1 and ADV2 V"
Sentence coadv_render(const Lexicon& l, const Vocab& v, const Filling& f,
                      const std::string& cond) {
    auto verbs = verb_ids(l, v, f.verb, cond);
    Sentence s = finish(v,
                        {"the", noun_form(l, f.noun, subject_plural(cond)), l.adverbs[f.adv],
                         l.conjunctions[0], l.adverbs[f.adv2], v.token(verbs.first)},
                        "CoAdv", cond, 1, 5, verbs, {});
    return s;
}

// NamePP: "the N PREP NAME V"; the name attractor is always singular,
// so only conditions SS and PS exist.
size_t namepp_space(const Lexicon& l) {
    return l.nouns.size() * l.prepositions.size() * l.names.size() * l.verbs.size();
}
Filling namepp_decode(const Lexicon& l, size_t i) {
    Filling f;
    f.verb = i % l.verbs.size();
    i /= l.verbs.size();
    f.name = i % l.names.size();
    i /= l.names.size();
    f.prep = i % l.prepositions.size();
    f.noun = i / l.prepositions.size();
    return f;
}
Sentence namepp_render(const Lexicon& l, const Vocab& v, const Filling& f,
                       const std::string& cond) {
    auto verbs = verb_ids(l, v, f.verb, cond);
    return finish(v,
                  {"the", noun_form(l, f.noun, subject_plural(cond)), l.prepositions[f.prep],
                   l.names[f.name], v.token(verbs.first)},
                  "NamePP", cond, 1, 4, verbs, {3});
}

// NounPP: "the N1 PREP the N2 V"
size_t nounpp_space(const Lexicon& l) {
    return l.nouns.size() * l.prepositions.size() * (l.nouns.size() - 1) * l.verbs.size();
}
Filling nounpp_decode(const Lexicon& l, size_t i) {
    Filling f;
    f.verb = i % l.verbs.size();
    i /= l.verbs.size();
    size_t n2 = i % (l.nouns.size() - 1);
    i /= l.nouns.size() - 1;
    f.prep = i % l.prepositions.size();
    f.noun = i / l.prepositions.size();
    f.noun2 = n2 >= f.noun ? n2 + 1 : n2;
    return f;
}
Sentence nounpp_render(const Lexicon& l, const Vocab& v, const Filling& f,
                       const std::string& cond) {
    auto verbs = verb_ids(l, v, f.verb, cond);
    const bool attractor_plural = cond[1] == 'P';
    return finish(v,
                  {"the", noun_form(l, f.noun, subject_plural(cond)), l.prepositions[f.prep],
                   "the", noun_form(l, f.noun2, attractor_plural), v.token(verbs.first)},
                  "NounPP", cond, 1, 5, verbs, {4});
}

// NounPPAdv: "the N1 PREP the N2 ADV V"
size_t nounppadv_space(const Lexicon& l) { return nounpp_space(l) * l.adverbs.size(); }
Filling nounppadv_decode(const Lexicon& l, size_t i) {
    Filling f = nounpp_decode(l, i / l.adverbs.size());
    f.adv = i % l.adverbs.size();
    return f;
}
Sentence nounppadv_render(const Lexicon& l, const Vocab& v, const Filling& f,
                          const std::string& cond) {
    auto verbs = verb_ids(l, v, f.verb, cond);
    const bool attractor_plural = cond[1] == 'P';
    return finish(v,
                  {"the", noun_form(l, f.noun, subject_plural(cond)), l.prepositions[f.prep],
                   "the", noun_form(l, f.noun2, attractor_plural), l.adverbs[f.adv],
                   v.token(verbs.first)},
                  "NounPPAdv", cond, 1, 6, verbs, {4});
}

const std::vector<TaskSpec>& task_specs() {
    static const std::vector<TaskSpec> specs = {
        {"Simple", {"S", "P"}, simple_space, simple_decode, simple_render},
        {"Adv", {"S", "P"}, adv_space, adv_decode, adv_render},
        {"2Adv", {"S", "P"}, twoadv_space, twoadv_decode, twoadv_render},
        {"CoAdv", {"S", "P"}, twoadv_space, twoadv_decode, coadv_render},
        {"NamePP", {"SS", "PS"}, namepp_space, namepp_decode, namepp_render},
        {"NounPP", {"SS", "SP", "PS", "PP"}, nounpp_space, nounpp_decode, nounpp_render},
        {"NounPPAdv", {"SS", "SP", "PS", "PP"}, nounppadv_space, nounppadv_decode,
         nounppadv_render},
    };
    return specs;
}

} // namespace

std::map<std::string, Corpus> generate_lakretz_tasks(const Lexicon& lex, const Vocab& vocab,
                                                     uint64_t seed, size_t per_task_count) {
    lex.validate();
    if (per_task_count < 1) throw ContractError("per_task_count must be >= 1");

    std::map<std::string, Corpus> out;
    for (const TaskSpec& spec : task_specs()) {
        const size_t conds = spec.conditions.size();
        const size_t space = spec.space(lex);
        const size_t max_total = space * conds;
        if (per_task_count > max_total)
            throw GenerationError("task " + spec.name + ": requested " +
                                  std::to_string(per_task_count) + " sentences but only " +
                                  std::to_string(max_total) + " distinct fillings exist");

        Corpus corpus;
        corpus.task = spec.name;
        // Per-task stream so tasks are independent of each other's draws.
        Rng rng(seed ^ (0x9e3779b97f4a7c15ULL * (1 + (&spec - task_specs().data()))));
        for (size_t c = 0; c < conds; ++c) {
            // Even split with the remainder spread over the first conditions.
            size_t want = per_task_count / conds + (c < per_task_count % conds ? 1 : 0);
            std::vector<uint32_t> idx(space);
            for (size_t i = 0; i < space; ++i) idx[i] = static_cast<uint32_t>(i);
            // Partial Fisher-Yates: only the first `want` slots are needed.
            for (size_t i = 0; i < want; ++i) {
                size_t j = i + static_cast<size_t>(rng.below(space - i));
                std::swap(idx[i], idx[j]);
            }
            for (size_t i = 0; i < want; ++i) {
                Filling f = spec.decode(lex, idx[i]);
                corpus.sentences.push_back(spec.render(lex, vocab, f, spec.conditions[c]));
            }
        }
        out.emplace(spec.name, std::move(corpus));
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON-lines persistence

void save_corpus(const Corpus& corpus, const Vocab& vocab, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    for (const Sentence& s : corpus.sentences) {
        ordered_json j;
        j["tokens"] = ordered_json::array();
        for (int id : s.tokens) j["tokens"].push_back(vocab.token(id));
        j["task"] = s.meta.task;
        j["condition"] = s.meta.condition;
        j["subject_index"] = s.meta.subject_index;
        j["verb_index"] = s.meta.verb_index;
        j["verb_correct"] = vocab.token(s.meta.verb_correct);
        j["verb_wrong"] = vocab.token(s.meta.verb_wrong);
        j["attractor_indices"] = s.meta.attractor_indices;
        os << j.dump() << "\n";
    }
    if (!os) throw IoError("write failed for " + path.string());
}

Corpus load_corpus(const std::filesystem::path& path, const Vocab& vocab) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    Corpus corpus;
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        auto require = [&](const char* field) -> const ordered_json& {
            auto it = j.find(field);
            if (it == j.end())
                throw ParseError(path.string() + ":" + std::to_string(line_no) +
                                 ": missing field '" + std::string(field) + "'");
            return *it;
        };
        Sentence s;
        try {
            for (const auto& w : require("tokens"))
                s.tokens.push_back(vocab.lookup_word(w.get<std::string>()));
            s.meta.task = require("task").get<std::string>();
            s.meta.condition = require("condition").get<std::string>();
            s.meta.subject_index = require("subject_index").get<int>();
            s.meta.verb_index = require("verb_index").get<int>();
            s.meta.verb_correct = vocab.lookup_word(require("verb_correct").get<std::string>());
            s.meta.verb_wrong = vocab.lookup_word(require("verb_wrong").get<std::string>());
            s.meta.attractor_indices = require("attractor_indices").get<std::vector<int>>();
        } catch (const ordered_json::exception& e) {
            throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
        if (s.meta.verb_index < 0 || static_cast<size_t>(s.meta.verb_index) >= s.tokens.size())
            throw ParseError(path.string() + ":" + std::to_string(line_no) +
                             ": verb_index out of range");
        if (corpus.task.empty()) corpus.task = s.meta.task;
        corpus.sentences.push_back(std::move(s));
    }
    return corpus;
}

} // namespace nnlens
