#include "nnlens/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <vector>

#include "nnlens/errors.hpp"

namespace nnlens {

using ordered_json = nlohmann::ordered_json;

namespace {

enum class FieldType { Str, U64, F64 };

const char* type_name(FieldType t) {
    switch (t) {
        case FieldType::Str: return "string";
        case FieldType::U64: return "non-negative integer";
        case FieldType::F64: return "number";
    }
    return "?";
}

struct FieldDef {
    std::string key;
    FieldType type;
    std::function<void(Config&, const ordered_json&)> set;
    std::function<ordered_json(const Config&)> get;
};

// Field table builder. Member access goes through accessor lambdas so the
// table stays a flat list.
std::vector<FieldDef> build_fields() {
    std::vector<FieldDef> fs;
    auto add_str = [&](const char* key, std::function<std::string&(Config&)> ref) {
        FieldDef f;
        f.key = key;
        f.type = FieldType::Str;
        f.set = [ref, key = std::string(key)](Config& c, const ordered_json& v) {
            if (!v.is_string())
                throw ConfigError("config key '" + key + "' expects a string");
            ref(c) = v.get<std::string>();
        };
        f.get = [ref](const Config& c) { return ordered_json(ref(const_cast<Config&>(c))); };
        fs.push_back(std::move(f));
    };
    auto add_u64 = [&](const char* key, std::function<uint64_t&(Config&)> ref) {
        FieldDef f;
        f.key = key;
        f.type = FieldType::U64;
        f.set = [ref, key = std::string(key)](Config& c, const ordered_json& v) {
            if (!v.is_number_integer() && !v.is_number_unsigned())
                throw ConfigError("config key '" + key + "' expects a non-negative integer");
            if (v.is_number_integer() && v.get<int64_t>() < 0)
                throw ConfigError("config key '" + key + "' expects a non-negative integer");
            ref(c) = v.get<uint64_t>();
        };
        f.get = [ref](const Config& c) { return ordered_json(ref(const_cast<Config&>(c))); };
        fs.push_back(std::move(f));
    };
    auto add_f64 = [&](const char* key, std::function<double&(Config&)> ref) {
        FieldDef f;
        f.key = key;
        f.type = FieldType::F64;
        f.set = [ref, key = std::string(key)](Config& c, const ordered_json& v) {
            if (!v.is_number())
                throw ConfigError("config key '" + key + "' expects a number");
            ref(c) = v.get<double>();
        };
        f.get = [ref](const Config& c) { return ordered_json(ref(const_cast<Config&>(c))); };
        fs.push_back(std::move(f));
    };

    add_str("workspace", [](Config& c) -> std::string& { return c.workspace; });
    add_str("model.type", [](Config& c) -> std::string& { return c.model.type; });
    add_str("model.mode", [](Config& c) -> std::string& { return c.model.mode; });
    add_u64("model.dim", [](Config& c) -> uint64_t& { return c.model.dim; });
    add_u64("model.layers", [](Config& c) -> uint64_t& { return c.model.layers; });
    add_u64("model.heads", [](Config& c) -> uint64_t& { return c.model.heads; });
    add_u64("model.ffn", [](Config& c) -> uint64_t& { return c.model.ffn; });
    add_u64("model.max_len", [](Config& c) -> uint64_t& { return c.model.max_len; });
    add_u64("model.seed", [](Config& c) -> uint64_t& { return c.model.seed; });
    add_str("model.init_phrase", [](Config& c) -> std::string& { return c.model.init_phrase; });
    add_str("corpus.tasks", [](Config& c) -> std::string& { return c.corpus.tasks; });
    add_u64("corpus.per_task", [](Config& c) -> uint64_t& { return c.corpus.per_task; });
    add_u64("corpus.seed", [](Config& c) -> uint64_t& { return c.corpus.seed; });
    add_str("corpus.lexicon", [](Config& c) -> std::string& { return c.corpus.lexicon; });
    add_f64("train.lr", [](Config& c) -> double& { return c.train.lr; });
    add_u64("train.batch", [](Config& c) -> uint64_t& { return c.train.batch; });
    add_u64("train.epochs", [](Config& c) -> uint64_t& { return c.train.epochs; });
    add_u64("train.seed", [](Config& c) -> uint64_t& { return c.train.seed; });
    add_f64("train.clip", [](Config& c) -> double& { return c.train.clip; });
    add_f64("train.mask_rate", [](Config& c) -> double& { return c.train.mask_rate; });
    add_str("extract.keys", [](Config& c) -> std::string& { return c.extract.keys; });
    add_str("extract.selection", [](Config& c) -> std::string& { return c.extract.selection; });
    add_u64("extract.flush_every", [](Config& c) -> uint64_t& { return c.extract.flush_every; });
    add_str("probe.key", [](Config& c) -> std::string& { return c.probe.key; });
    add_f64("probe.lr", [](Config& c) -> double& { return c.probe.lr; });
    add_f64("probe.l2", [](Config& c) -> double& { return c.probe.l2; });
    add_u64("probe.epochs", [](Config& c) -> uint64_t& { return c.probe.epochs; });
    add_u64("probe.seed", [](Config& c) -> uint64_t& { return c.probe.seed; });
    add_u64("probe.control_seed", [](Config& c) -> uint64_t& { return c.probe.control_seed; });
    add_str("syntax.tasks", [](Config& c) -> std::string& { return c.syntax.tasks; });
    add_str("attribute.method", [](Config& c) -> std::string& { return c.attribute.method; });
    add_u64("attribute.samples", [](Config& c) -> uint64_t& { return c.attribute.samples; });
    add_u64("attribute.seed", [](Config& c) -> uint64_t& { return c.attribute.seed; });
    add_str("attribute.task", [](Config& c) -> std::string& { return c.attribute.task; });
    add_u64("attribute.count", [](Config& c) -> uint64_t& { return c.attribute.count; });
    return fs;
}

const std::vector<FieldDef>& fields() {
    static const std::vector<FieldDef> fs = build_fields();
    return fs;
}

size_t levenshtein(const std::string& a, const std::string& b) {
    std::vector<size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (size_t j = 1; j <= b.size(); ++j) {
            size_t cost = a[i - 1] == b[j - 1] ? 0 : 1;
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost});
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

const FieldDef* find_field(const std::string& key) {
    for (const FieldDef& f : fields())
        if (f.key == key) return &f;
    return nullptr;
}

[[noreturn]] void unknown_key(const std::string& key) {
    const FieldDef* best = nullptr;
    size_t best_d = SIZE_MAX;
    for (const FieldDef& f : fields()) {
        size_t d = levenshtein(key, f.key);
        if (d < best_d) {
            best_d = d;
            best = &f;
        }
    }
    throw ConfigError("unknown config key '" + key + "' (nearest valid key: '" + best->key +
                      "')");
}

void flatten(const ordered_json& j, const std::string& prefix,
             std::vector<std::pair<std::string, ordered_json>>& out) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
        if (it.value().is_object())
            flatten(it.value(), key, out);
        else
            out.emplace_back(std::move(key), it.value());
    }
}

ordered_json parse_override_value(const FieldDef& f, const std::string& raw) {
    switch (f.type) {
        case FieldType::Str:
            return ordered_json(raw);
        case FieldType::U64: {
            uint64_t v = 0;
            auto res = std::from_chars(raw.data(), raw.data() + raw.size(), v);
            if (res.ec != std::errc() || res.ptr != raw.data() + raw.size())
                throw ConfigError("config key '" + f.key + "' expects a " + type_name(f.type) +
                                  ", got '" + raw + "'");
            return ordered_json(v);
        }
        case FieldType::F64: {
            char* end = nullptr;
            double v = std::strtod(raw.c_str(), &end);
            if (end != raw.c_str() + raw.size() || raw.empty())
                throw ConfigError("config key '" + f.key + "' expects a " + type_name(f.type) +
                                  ", got '" + raw + "'");
            return ordered_json(v);
        }
    }
    throw ConfigError("unreachable");
}

} // namespace

Config::Source Config::source(const std::string& dotted_key) const {
    auto it = provenance.find(dotted_key);
    return it == provenance.end() ? Source::Default : it->second;
}

const char* source_name(Config::Source s) {
    switch (s) {
        case Config::Source::Default: return "default";
        case Config::Source::File: return "file";
        case Config::Source::Cli: return "cli";
    }
    return "?";
}

Config load_config(const std::optional<std::filesystem::path>& file,
                   std::span<const std::string> overrides) {
    Config cfg;
    for (const FieldDef& f : fields()) cfg.provenance[f.key] = Config::Source::Default;

    if (file) {
        std::ifstream is(*file);
        if (!is) throw IoError("cannot open config file " + file->string());
        ordered_json j;
        // An empty file means "all defaults".
        std::string content((std::istreambuf_iterator<char>(is)),
                            std::istreambuf_iterator<char>());
        bool blank = content.find_first_not_of(" \t\r\n") == std::string::npos;
        if (!blank) {
            try {
                j = ordered_json::parse(content);
            } catch (const std::exception& e) {
                throw ConfigError(file->string() + ": " + e.what());
            }
            if (!j.is_object())
                throw ConfigError(file->string() + ": top level must be a JSON object");
            std::vector<std::pair<std::string, ordered_json>> flat;
            flatten(j, "", flat);
            for (const auto& [key, value] : flat) {
                const FieldDef* f = find_field(key);
                if (!f) unknown_key(key);
                f->set(cfg, value);
                cfg.provenance[key] = Config::Source::File;
            }
        }
    }

    for (const std::string& ov : overrides) {
        auto eq = ov.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("override '" + ov + "' is not of the form key=value");
        std::string key = ov.substr(0, eq);
        std::string raw = ov.substr(eq + 1);
        const FieldDef* f = find_field(key);
        if (!f) unknown_key(key);
        f->set(cfg, parse_override_value(*f, raw));
        cfg.provenance[key] = Config::Source::Cli;
    }
    return cfg;
}

ordered_json config_json(const Config& cfg) {
    ordered_json out = ordered_json::object();
    for (const FieldDef& f : fields()) {
        ordered_json* cur = &out;
        std::string rest = f.key;
        size_t dot;
        while ((dot = rest.find('.')) != std::string::npos) {
            cur = &(*cur)[rest.substr(0, dot)];
            rest = rest.substr(dot + 1);
        }
        (*cur)[rest] = f.get(cfg);
    }
    return out;
}

bool config_equal(const Config& a, const Config& b) {
    return config_json(a) == config_json(b);
}

} // namespace nnlens
