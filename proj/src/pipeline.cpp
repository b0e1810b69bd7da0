#include "nnlens/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "nnlens/attribute.hpp"
#include "nnlens/corpus.hpp"
#include "nnlens/errors.hpp"
#include "nnlens/extract.hpp"
#include "nnlens/model.hpp"
#include "nnlens/probe.hpp"
#include "nnlens/syntax.hpp"

namespace nnlens {

using ordered_json = nlohmann::ordered_json;

namespace {

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

class WorkspaceLock {
public:
    explicit WorkspaceLock(const Workspace& ws) : path_(ws.lock_file()) {
        std::filesystem::create_directories(ws.root);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw ContractError("workspace " + ws.root.string() +
                                " is locked by another run (remove " + path_.string() +
                                " if stale)");
        std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] ssize_t n = ::write(fd_, pid.data(), pid.size());
    }
    ~WorkspaceLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            std::filesystem::remove(path_, ec);
        }
    }
    WorkspaceLock(const WorkspaceLock&) = delete;
    WorkspaceLock& operator=(const WorkspaceLock&) = delete;

private:
    std::filesystem::path path_;
    int fd_ = -1;
};

Lexicon config_lexicon(const Config& cfg) {
    if (cfg.corpus.lexicon.empty()) return Lexicon::builtin();
    return Lexicon::load(cfg.corpus.lexicon);
}

Vocab require_vocab(const Workspace& ws) {
    auto path = ws.corpus_dir() / "vocab.json";
    if (!std::filesystem::exists(path))
        throw ContractError("no vocabulary found in the workspace (run 'nnlens generate' first)");
    return Vocab::load(path);
}

Corpus require_task(const Workspace& ws, const Vocab& vocab, const std::string& task) {
    auto path = ws.corpus_dir() / (task + ".jsonl");
    if (!std::filesystem::exists(path))
        throw ContractError("task corpus '" + task +
                            "' not found in the workspace (run 'nnlens generate' first)");
    return load_corpus(path, vocab);
}

std::unique_ptr<ModelInterface> require_model(const Workspace& ws, const Config& cfg,
                                              const Vocab& vocab) {
    auto base = ws.models_dir() / model_name(cfg);
    std::filesystem::path sidecar = base;
    sidecar += ".json";
    if (!std::filesystem::exists(sidecar))
        throw ContractError("model checkpoint '" + model_name(cfg) +
                            "' not found (run 'nnlens train-lm' first)");
    return load_model(base, vocab);
}

// The combined corpus seen by extract/probe: requested tasks concatenated
// in order, sentence ids global across the concatenation.
Corpus combined_corpus(const Workspace& ws, const Config& cfg, const Vocab& vocab) {
    Corpus all;
    all.task = "combined";
    for (const std::string& t : task_list(cfg.corpus.tasks, cfg)) {
        Corpus c = require_task(ws, vocab, t);
        for (Sentence& s : c.sentences) all.sentences.push_back(std::move(s));
    }
    return all;
}

std::unique_ptr<ModelInterface> build_model(const Config& cfg, const Vocab& vocab) {
    if (cfg.model.type == "lstm") {
        LstmConfig mc;
        mc.vocab_size = vocab.size();
        mc.embed_dim = cfg.model.dim;
        mc.hidden_dim = cfg.model.dim;
        mc.layers = cfg.model.layers;
        mc.init_phrase = cfg.model.init_phrase;
        auto m = std::make_unique<LstmLm>(mc, cfg.model.seed);
        m->set_init_phrase_ids(tokenize(vocab, mc.init_phrase));
        return m;
    }
    if (cfg.model.type == "transformer") {
        TransformerConfig mc;
        mc.vocab_size = vocab.size();
        mc.model_dim = cfg.model.dim;
        mc.layers = cfg.model.layers;
        mc.heads = cfg.model.heads;
        mc.ffn_dim = cfg.model.ffn;
        mc.max_len = cfg.model.max_len;
        if (cfg.model.mode == "masked")
            mc.mode = TransformerMode::Masked;
        else if (cfg.model.mode == "causal")
            mc.mode = TransformerMode::Causal;
        else
            throw ConfigError("model.mode must be 'causal' or 'masked', got '" + cfg.model.mode +
                              "'");
        return std::make_unique<TransformerLm>(mc, cfg.model.seed);
    }
    throw ConfigError("model.type must be 'lstm' or 'transformer', got '" + cfg.model.type + "'");
}

void stage_generate(const Workspace& ws, const Config& cfg) {
    const auto tasks = task_list(cfg.corpus.tasks, cfg);
    bool have_all = std::filesystem::exists(ws.corpus_dir() / "vocab.json");
    for (const std::string& t : tasks)
        have_all = have_all && std::filesystem::exists(ws.corpus_dir() / (t + ".jsonl"));
    if (have_all) {
        std::cout << "[generate] reusing existing corpus in " << ws.corpus_dir() << "\n";
        return;
    }
    Lexicon lex = config_lexicon(cfg);
    Vocab vocab = build_vocab(lex);
    std::filesystem::create_directories(ws.corpus_dir());
    vocab.save(ws.corpus_dir() / "vocab.json");
    auto generated = generate_lakretz_tasks(lex, vocab, cfg.corpus.seed, cfg.corpus.per_task);
    for (const std::string& t : tasks) {
        auto it = generated.find(t);
        if (it == generated.end())
            throw ConfigError("unknown task '" + t + "' in corpus.tasks");
        save_corpus(it->second, vocab, ws.corpus_dir() / (t + ".jsonl"));
        std::cout << "[generate] " << t << ": " << it->second.size() << " sentences\n";
    }
}

void stage_train(const Workspace& ws, const Config& cfg) {
    Vocab vocab = require_vocab(ws);
    auto base = ws.models_dir() / model_name(cfg);
    std::filesystem::path sidecar = base;
    sidecar += ".json";
    if (std::filesystem::exists(sidecar)) {
        std::cout << "[train-lm] reusing existing checkpoint " << sidecar << "\n";
        return;
    }
    std::vector<Corpus> corpora;
    for (const std::string& t : task_list(cfg.corpus.tasks, cfg))
        corpora.push_back(require_task(ws, vocab, t));

    auto model = build_model(cfg, vocab);
    TrainHyper hyper;
    hyper.lr = cfg.train.lr;
    hyper.batch = cfg.train.batch;
    hyper.epochs = cfg.train.epochs;
    hyper.seed = cfg.train.seed;
    hyper.clip = cfg.train.clip;
    hyper.mask_rate = cfg.train.mask_rate;
    TrainStats stats = train_lm(*model, corpora, vocab, hyper);

    std::filesystem::create_directories(ws.models_dir());
    model->save(base, vocab);
    std::cout << "[train-lm] " << model_name(cfg) << ": final loss "
              << (stats.epoch_loss.empty() ? 0.0 : stats.epoch_loss.back()) << " over "
              << stats.epoch_loss.size() << " epochs\n";
}

void stage_extract(const Workspace& ws, const Config& cfg) {
    Vocab vocab = require_vocab(ws);
    auto store_dir = ws.activations_dir() / model_name(cfg);
    if (ActivationStore::is_finalized(store_dir)) {
        std::cout << "[extract] reusing finalized store " << store_dir << "\n";
        return;
    }
    auto model = require_model(ws, cfg, vocab);
    Corpus corpus = combined_corpus(ws, cfg, vocab);

    ExtractOptions opt;
    if (cfg.extract.keys == "all") {
        opt.keys = model->activation_names();
    } else {
        for (const std::string& k : split_commas(cfg.extract.keys))
            opt.keys.push_back(ActivationKey::parse(k));
    }
    opt.selection = Selection::named(cfg.extract.selection);
    opt.flush_every = cfg.extract.flush_every;

    ExtractStats stats = extract(*model, corpus, opt, store_dir);
    std::cout << "[extract] " << stats.sentences << " sentences, " << stats.rows_written
              << " rows -> " << store_dir << "\n";
}

void stage_syntax(const Workspace& ws, const Config& cfg) {
    Vocab vocab = require_vocab(ws);
    auto model = require_model(ws, cfg, vocab);
    std::map<std::string, TaskResult> results;
    for (const std::string& t : task_list(cfg.syntax.tasks, cfg)) {
        Corpus corpus = require_task(ws, vocab, t);
        results[t] = evaluate(*model, corpus);
    }
    std::vector<std::pair<std::string, std::map<std::string, TaskResult>>> per_model{
        {model_name(cfg), std::move(results)}};
    std::cout << condition_table(per_model);
    std::filesystem::create_directories(ws.results_dir());
    std::ofstream os(ws.results_dir() / "syntax_results.json", std::ios::trunc);
    os << syntax_results_json(per_model).dump(2) << "\n";
    if (!os) throw IoError("cannot write syntax_results.json");
}

void stage_probe(const Workspace& ws, const Config& cfg) {
    Vocab vocab = require_vocab(ws);
    auto store_dir = ws.activations_dir() / model_name(cfg);
    if (!ActivationStore::is_finalized(store_dir))
        throw ContractError("no finalized activation store for '" + model_name(cfg) +
                            "' (run 'nnlens extract' first)");
    ActivationStore store = ActivationStore::open(store_dir);
    Corpus corpus = combined_corpus(ws, cfg, vocab);
    Selection selection = Selection::named(cfg.extract.selection);

    ActivationKey key = ActivationKey::parse(cfg.probe.key);
    std::vector<int> row_sentences = selected_sentence_ids(corpus, selection);
    std::vector<int> labels = number_labels(corpus, selection);

    const size_t width = store.width(key);
    Tensor rows({std::max<size_t>(1, row_sentences.size()), width});
    {
        size_t r = 0;
        int prev = -1;
        Tensor cur;
        size_t cur_row = 0;
        for (int sid : row_sentences) {
            if (sid != prev) {
                cur = store.read_one(sid, key);
                cur_row = 0;
                prev = sid;
            }
            std::copy_n(cur.data() + cur_row * width, width, rows.data() + r * width);
            ++cur_row;
            ++r;
        }
    }

    ProbeData data;
    data.rows = std::move(rows);
    data.labels = labels;
    data.sentence_of = row_sentences;
    data.label_names = {"singular", "plural"};

    ProbeHyper hyper;
    hyper.lr = cfg.probe.lr;
    hyper.l2 = cfg.probe.l2;
    hyper.epochs = cfg.probe.epochs;
    hyper.seed = cfg.probe.seed;

    std::vector<int> control = make_control_labels(corpus, selection, 2, cfg.probe.control_seed);
    ProbeReport report = probe_with_control(data, control, 2, hyper);

    std::filesystem::create_directories(ws.results_dir());
    std::filesystem::create_directories(ws.models_dir());
    ordered_json j;
    j["activation_key"] = key.str();
    j["selection"] = selection.name();
    j["labels"] = report.label_names;
    j["task_accuracy"] = {{"train", report.task.train},
                          {"dev", report.task.dev},
                          {"test", report.task.test}};
    j["control_accuracy"] = {{"train", report.control.train},
                             {"dev", report.control.dev},
                             {"test", report.control.test}};
    j["selectivity"] = report.selectivity;
    j["confusion"] = report.confusion;
    std::ofstream os(ws.results_dir() / "probe_report.json", std::ios::trunc);
    os << j.dump(2) << "\n";
    if (!os) throw IoError("cannot write probe_report.json");

    // Persist the trained probe itself alongside the model checkpoints.
    ProbeResult task_probe = train_probe(data, hyper);
    save_probe(ws.models_dir() / ("probe_" + std::to_string(key.layer) + "_" + key.name),
               task_probe.model, key.str(), hyper);

    std::cout << "[probe] " << key.str() << " task test acc " << report.task.test
              << ", control " << report.control.test << ", selectivity " << report.selectivity
              << "\n";
}

void stage_attribute(const Workspace& ws, const Config& cfg) {
    Vocab vocab = require_vocab(ws);
    auto model = require_model(ws, cfg, vocab);
    Corpus corpus = require_task(ws, vocab, cfg.attribute.task);
    const size_t count = std::min<size_t>(cfg.attribute.count, corpus.size());

    AttributionMethod method;
    if (cfg.attribute.method == "exact")
        method = AttributionMethod::exact();
    else if (cfg.attribute.method == "sampling")
        method = AttributionMethod::sampling(cfg.attribute.samples, cfg.attribute.seed);
    else if (cfg.attribute.method == "cd")
        method = AttributionMethod::cd_pairwise();
    else
        throw ConfigError("attribute.method must be exact, sampling, or cd; got '" +
                          cfg.attribute.method + "'");

    ordered_json results = ordered_json::array();
    for (size_t i = 0; i < count; ++i) {
        const Sentence& s = corpus.sentences[i];
        // Masked models see the full sentence with <mask> at the verb;
        // recurrent models see the sub-sentence up to the verb and are
        // explained at its final position.
        std::vector<int> tokens;
        if (model->is_masked()) {
            tokens = s.tokens;
            tokens[static_cast<size_t>(s.meta.verb_index)] = Vocab::kMask;
        } else {
            tokens.assign(s.tokens.begin(), s.tokens.begin() + s.meta.verb_index);
        }
        PlayerPartition partition = PlayerPartition::per_token(tokens.size());
        std::vector<int> targets{s.meta.verb_correct, s.meta.verb_wrong};
        auto attrs = decompose_forward(*model, tokens, partition, method, targets);

        std::vector<std::string> words;
        for (int id : tokens) words.push_back(vocab.token(id));
        for (const Attribution& a : attrs) {
            ordered_json ja;
            ja["sentence"] = words;
            ja["condition"] = s.meta.condition;
            ja["method"] = method.name();
            ja["target"] = vocab.token(a.target);
            ja["full_logit"] = a.full_logit;
            ja["contributions"] = a.contributions;
            ja["bias"] = a.bias;
            results.push_back(std::move(ja));
            std::cout << render_attribution(a, words, partition, vocab.token(a.target)) << "\n";
        }
    }
    std::filesystem::create_directories(ws.results_dir());
    std::ofstream os(ws.results_dir() / "attributions.json", std::ios::trunc);
    os << results.dump(2) << "\n";
    if (!os) throw IoError("cannot write attributions.json");
}

} // namespace

std::string model_name(const Config& cfg) {
    if (cfg.model.type == "transformer") return "transformer_" + cfg.model.mode;
    return cfg.model.type;
}

std::vector<std::string> task_list(const std::string& spec, const Config& cfg) {
    if (spec == "all") {
        if (cfg.corpus.tasks == "all") return lakretz_task_names();
        return split_commas(cfg.corpus.tasks);
    }
    return split_commas(spec);
}

const std::vector<std::string>& subcommand_names() {
    static const std::vector<std::string> names = {"generate", "train-lm", "extract", "syntax",
                                                   "probe",    "attribute", "all"};
    return names;
}

void run_subcommand(const std::string& command, const Config& cfg) {
    Workspace ws{cfg.workspace};
    WorkspaceLock lock(ws);
    if (command == "generate") {
        stage_generate(ws, cfg);
    } else if (command == "train-lm") {
        stage_train(ws, cfg);
    } else if (command == "extract") {
        stage_extract(ws, cfg);
    } else if (command == "syntax") {
        stage_syntax(ws, cfg);
    } else if (command == "probe") {
        stage_probe(ws, cfg);
    } else if (command == "attribute") {
        stage_attribute(ws, cfg);
    } else if (command == "all") {
        stage_generate(ws, cfg);
        stage_train(ws, cfg);
        stage_extract(ws, cfg);
        stage_syntax(ws, cfg);
        stage_probe(ws, cfg);
        stage_attribute(ws, cfg);
    } else {
        throw ConfigError("unknown subcommand '" + command + "'");
    }
}

} // namespace nnlens
