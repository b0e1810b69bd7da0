#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>

#include <json.hpp>

namespace nnlens {

// Experiment description. Every field has a default, can be set from a
// JSON file, and can be overridden from the command line with dotted
// `key=value` pairs; precedence cli > file > default, tracked per field.
struct Config {
    std::string workspace = "workspace";

    struct ModelSection {
        std::string type = "lstm";     // lstm | transformer
        std::string mode = "causal";   // transformer only: causal | masked
        uint64_t dim = 64;
        uint64_t layers = 2;
        uint64_t heads = 4;
        uint64_t ffn = 256;
        uint64_t max_len = 64;
        uint64_t seed = 1;
        std::string init_phrase = ". <eos>";
    } model;

    struct CorpusSection {
        std::string tasks = "Simple,NounPP";
        uint64_t per_task = 600;
        uint64_t seed = 11;
        std::string lexicon; // empty = built-in
    } corpus;

    struct TrainSection {
        double lr = 0.5;
        uint64_t batch = 16;
        uint64_t epochs = 10;
        uint64_t seed = 7;
        double clip = 5.0;
        double mask_rate = 0.15;
    } train;

    struct ExtractSection {
        std::string keys = "all"; // "all" or comma list like "0.hx,1.hx"
        std::string selection = "all"; // all | verb | subject
        uint64_t flush_every = 8;
    } extract;

    struct ProbeSection {
        std::string key = "1.hx";
        double lr = 0.5;
        double l2 = 1e-4;
        uint64_t epochs = 200;
        uint64_t seed = 3;
        uint64_t control_seed = 5;
    } probe;

    struct SyntaxSection {
        std::string tasks = "all"; // "all" = the generated tasks
    } syntax;

    struct AttributeSection {
        std::string method = "exact"; // exact | sampling | cd
        uint64_t samples = 100;
        uint64_t seed = 17;
        std::string task = "NounPP";
        uint64_t count = 2;
    } attribute;

    enum class Source { Default, File, Cli };
    std::map<std::string, Source> provenance;

    Source source(const std::string& dotted_key) const;
};

const char* source_name(Config::Source s);

// Loads `file` (optional) then applies `key=value` overrides. Unknown keys
// are rejected with the nearest valid key named; type mismatches name the
// expected type.
Config load_config(const std::optional<std::filesystem::path>& file,
                   std::span<const std::string> overrides);

// Effective values as nested JSON; re-parsing it yields an equal Config.
nlohmann::ordered_json config_json(const Config& cfg);

bool config_equal(const Config& a, const Config& b);

} // namespace nnlens
