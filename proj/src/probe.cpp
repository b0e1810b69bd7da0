#include "nnlens/probe.hpp"

#include <algorithm>
#include <set>
#include <fstream>

#include <json.hpp>

#include "nnlens/errors.hpp"
#include "nnlens/rng.hpp"
#include "nnlens/serialize.hpp"

namespace nnlens {

using ordered_json = nlohmann::ordered_json;

std::vector<int> ProbeModel::predict(const Tensor& rows) const {
    Tensor logits = add(matmul(rows, w), b);
    const size_t n = logits.shape()[0], c = logits.shape()[1];
    std::vector<int> out(n);
    for (size_t r = 0; r < n; ++r) {
        const double* row = logits.data() + r * c;
        size_t best = 0;
        for (size_t j = 1; j < c; ++j)
            if (row[j] > row[best]) best = j;
        out[r] = static_cast<int>(best);
    }
    return out;
}

namespace {

Tensor gather_rows(const Tensor& rows, const std::vector<size_t>& idx) {
    const size_t d = rows.cols();
    Tensor out({std::max<size_t>(1, idx.size()), d});
    for (size_t i = 0; i < idx.size(); ++i)
        std::copy_n(rows.data() + idx[i] * d, d, out.data() + i * d);
    return out;
}

double accuracy_on(const ProbeModel& m, const Tensor& rows, const std::vector<size_t>& idx,
                   const std::vector<int>& labels) {
    if (idx.empty()) return 0.0;
    Tensor x = gather_rows(rows, idx);
    std::vector<int> pred = m.predict(x);
    size_t correct = 0;
    for (size_t i = 0; i < idx.size(); ++i)
        if (pred[i] == labels[idx[i]]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

} // namespace

ProbeResult train_probe(const ProbeData& data, const ProbeHyper& hyper) {
    const size_t n = data.rows.rows();
    if (data.labels.size() != n)
        throw ContractError("train_probe: " + std::to_string(data.labels.size()) +
                            " labels for " + std::to_string(n) + " rows");
    if (data.sentence_of.size() != n)
        throw ContractError("train_probe: sentence_of must align with rows");
    int max_label = 0;
    std::set<int> distinct;
    for (int l : data.labels) {
        if (l < 0) throw ContractError("train_probe: negative label");
        distinct.insert(l);
        max_label = std::max(max_label, l);
    }
    if (distinct.size() < 2)
        throw ContractError("train_probe: labels contain a single class, nothing to separate");
    const size_t classes =
        std::max<size_t>(static_cast<size_t>(max_label) + 1, data.label_names.size());
    const size_t d = data.rows.cols();

    // Sentence-level 80/10/10 split keeps rows of one sentence together.
    std::vector<int> sentences(data.sentence_of);
    std::sort(sentences.begin(), sentences.end());
    sentences.erase(std::unique(sentences.begin(), sentences.end()), sentences.end());
    Rng rng(hyper.seed);
    rng.shuffle(sentences);
    const size_t n_sent = sentences.size();
    const size_t n_train = static_cast<size_t>(hyper.splits[0] * static_cast<double>(n_sent));
    const size_t n_dev = static_cast<size_t>(hyper.splits[1] * static_cast<double>(n_sent));
    std::set<int> train_set(sentences.begin(), sentences.begin() + static_cast<long>(n_train));
    std::set<int> dev_set(sentences.begin() + static_cast<long>(n_train),
                          sentences.begin() + static_cast<long>(n_train + n_dev));

    std::vector<size_t> train_idx, dev_idx, test_idx;
    for (size_t i = 0; i < n; ++i) {
        if (train_set.count(data.sentence_of[i]))
            train_idx.push_back(i);
        else if (dev_set.count(data.sentence_of[i]))
            dev_idx.push_back(i);
        else
            test_idx.push_back(i);
    }
    if (train_idx.empty()) throw ContractError("train_probe: empty training split");

    Tensor x_train = gather_rows(data.rows, train_idx);
    std::vector<int> y_train;
    y_train.reserve(train_idx.size());
    for (size_t i : train_idx) y_train.push_back(data.labels[i]);

    ProbeModel model;
    model.w = Tensor({d, classes});
    model.b = Tensor({classes});
    model.label_names = data.label_names;

    for (size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        Graph g;
        Tensor loss;
        Tensor w_t, b_t;
        {
            Recording rec(g);
            w_t = track(model.w);
            b_t = track(model.b);
            Tensor logits = add(matmul(track(x_train), w_t), b_t);
            loss = cross_entropy(logits, y_train);
            if (hyper.l2 > 0.0) loss = add(loss, scale(sum(mul(w_t, w_t)), hyper.l2));
        }
        g.backward(loss);
        const Tensor& gw = g.grad(w_t);
        for (size_t i = 0; i < model.w.size(); ++i) model.w[i] -= hyper.lr * gw[i];
        if (g.has_grad(b_t.node())) {
            const Tensor& gb = g.grad(b_t);
            for (size_t i = 0; i < model.b.size(); ++i) model.b[i] -= hyper.lr * gb[i];
        }
    }

    ProbeResult res;
    res.accuracy.train = accuracy_on(model, data.rows, train_idx, data.labels);
    res.accuracy.dev = accuracy_on(model, data.rows, dev_idx, data.labels);
    res.accuracy.test = accuracy_on(model, data.rows, test_idx, data.labels);

    res.confusion.assign(classes, std::vector<size_t>(classes, 0));
    if (!test_idx.empty()) {
        Tensor x_test = gather_rows(data.rows, test_idx);
        std::vector<int> pred = model.predict(x_test);
        for (size_t i = 0; i < test_idx.size(); ++i)
            res.confusion[static_cast<size_t>(data.labels[test_idx[i]])]
                         [static_cast<size_t>(pred[i])]++;
    }
    res.model = std::move(model);
    return res;
}

ProbeReport probe_with_control(const ProbeData& task, const std::vector<int>& control_labels,
                               size_t control_classes, const ProbeHyper& hyper) {
    ProbeResult task_res = train_probe(task, hyper);

    ProbeData control = task;
    control.labels = control_labels;
    control.label_names.clear();
    for (size_t c = 0; c < control_classes; ++c)
        control.label_names.push_back("control_" + std::to_string(c));
    ProbeResult control_res = train_probe(control, hyper);

    ProbeReport rep;
    rep.task = task_res.accuracy;
    rep.control = control_res.accuracy;
    rep.selectivity = rep.task.test - rep.control.test;
    rep.confusion = std::move(task_res.confusion);
    rep.label_names = task.label_names;
    return rep;
}

std::vector<int> make_control_labels(const Corpus& corpus, const Selection& selection,
                                     size_t num_classes, uint64_t seed) {
    if (num_classes < 2) throw ContractError("make_control_labels: num_classes must be >= 2");
    // First pass: the set of word types seen at probed positions, in token
    // id order so the assignment is independent of corpus order.
    std::set<int> types;
    for (const Sentence& s : corpus.sentences)
        for (size_t p = 0; p < s.tokens.size(); ++p)
            if (selection.keep(s.meta, p)) types.insert(s.tokens[p]);
    Rng rng(seed);
    std::map<int, int> label_of;
    for (int t : types) label_of[t] = static_cast<int>(rng.below(num_classes));

    std::vector<int> labels;
    for (const Sentence& s : corpus.sentences)
        for (size_t p = 0; p < s.tokens.size(); ++p)
            if (selection.keep(s.meta, p)) labels.push_back(label_of.at(s.tokens[p]));
    return labels;
}

std::vector<int> number_labels(const Corpus& corpus, const Selection& selection) {
    std::vector<int> labels;
    for (const Sentence& s : corpus.sentences) {
        for (size_t p = 0; p < s.tokens.size(); ++p) {
            if (!selection.keep(s.meta, p)) continue;
            if (s.meta.condition.empty())
                throw ContractError("number_labels: sentence lacks condition metadata");
            labels.push_back(s.meta.condition[0] == 'P' ? 1 : 0);
        }
    }
    return labels;
}

std::vector<int> selected_sentence_ids(const Corpus& corpus, const Selection& selection) {
    std::vector<int> ids;
    for (size_t i = 0; i < corpus.sentences.size(); ++i) {
        const Sentence& s = corpus.sentences[i];
        for (size_t p = 0; p < s.tokens.size(); ++p)
            if (selection.keep(s.meta, p)) ids.push_back(static_cast<int>(i));
    }
    return ids;
}

void save_probe(const std::filesystem::path& base, const ProbeModel& model,
                const std::string& activation_key, const ProbeHyper& hyper) {
    std::filesystem::path weights = base;
    weights += ".nnlt";
    save_tensors(weights, {{"w", model.w}, {"b", model.b}});
    ordered_json j;
    j["labels"] = model.label_names;
    j["activation_key"] = activation_key;
    j["hyper"] = {{"lr", hyper.lr},
                  {"l2", hyper.l2},
                  {"epochs", hyper.epochs},
                  {"seed", hyper.seed},
                  {"splits", hyper.splits}};
    std::filesystem::path sidecar = base;
    sidecar += ".json";
    std::ofstream os(sidecar, std::ios::trunc);
    if (!os) throw IoError("cannot open " + sidecar.string() + " for writing");
    os << j.dump(2) << "\n";
}

} // namespace nnlens
