#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "nnlens/corpus.hpp"
#include "nnlens/extract.hpp"
#include "nnlens/tensor.hpp"

namespace nnlens {

struct ProbeHyper {
    double lr = 0.5;
    double l2 = 1e-4;
    size_t epochs = 200;
    uint64_t seed = 0;
    std::array<double, 3> splits = {0.8, 0.1, 0.1}; // train/dev/test by sentence
};

// Multinomial logistic-regression diagnostic classifier.
struct ProbeModel {
    Tensor w; // [d x C]
    Tensor b; // [C]
    std::vector<std::string> label_names;

    std::vector<int> predict(const Tensor& rows) const;
};

struct SplitAccuracy {
    double train = 0.0, dev = 0.0, test = 0.0;
};

struct ProbeData {
    Tensor rows;                  // [n x d]
    std::vector<int> labels;      // per row, in [0, C)
    std::vector<int> sentence_of; // per row; drives sentence-level splits
    std::vector<std::string> label_names;
};

struct ProbeResult {
    ProbeModel model;
    SplitAccuracy accuracy;
    std::vector<std::vector<size_t>> confusion; // test split, [true][predicted]
};

// Full report as produced by a task probe plus its control twin.
struct ProbeReport {
    SplitAccuracy task;
    SplitAccuracy control;
    double selectivity = 0.0; // task.test - control.test
    std::vector<std::vector<size_t>> confusion;
    std::vector<std::string> label_names;
};

// Full-batch gradient descent on cross-entropy + l2 * |W|^2; deterministic
// per seed. Throws ContractError when labels contain a single class.
ProbeResult train_probe(const ProbeData& data, const ProbeHyper& hyper);

ProbeReport probe_with_control(const ProbeData& task, const std::vector<int>& control_labels,
                               size_t control_classes, const ProbeHyper& hyper);

// Type-consistent random labels: every distinct token id observed at the
// selected positions maps to one uniform-random class.
std::vector<int> make_control_labels(const Corpus& corpus, const Selection& selection,
                                     size_t num_classes, uint64_t seed);

// Subject-number labels (0 = singular, 1 = plural) per selected position.
std::vector<int> number_labels(const Corpus& corpus, const Selection& selection);

// Row-aligned sentence ids for the same traversal order as extraction.
std::vector<int> selected_sentence_ids(const Corpus& corpus, const Selection& selection);

void save_probe(const std::filesystem::path& base, const ProbeModel& model,
                const std::string& activation_key, const ProbeHyper& hyper);

} // namespace nnlens
