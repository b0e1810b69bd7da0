#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "nnlens/errors.hpp"

namespace nnlens {

std::string shape_str(std::span<const size_t> shape);

// Dense row-major tensor of f64. Tensors are immutable values once built
// and safe to share across threads. An optional (graph id, node id) pair
// ties a tensor to the recording graph that produced it; the pair is
// ignored by any graph other than its own.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<size_t> shape);
    Tensor(std::vector<size_t> shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor full(std::vector<size_t> shape, double v);

    const std::vector<size_t>& shape() const { return shape_; }
    size_t rank() const { return shape_.size(); }
    size_t size() const { return data_.size(); }
    size_t dim(size_t i) const { return shape_[i]; }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double operator[](size_t i) const { return data_[i]; }
    double& operator[](size_t i) { return data_[i]; }
    double at(size_t r, size_t c) const;
    double& at(size_t r, size_t c);

    // Value of a single-element tensor.
    double item() const;

    // Number of rows when viewed as a matrix [rows x cols] where cols is
    // the last dimension; rank-1 tensors are a single row.
    size_t rows() const;
    size_t cols() const;

    int64_t node() const { return node_; }
    uint64_t graph_uid() const { return graph_uid_; }

private:
    std::vector<size_t> shape_;
    std::vector<double> data_;
    int64_t node_ = -1;
    uint64_t graph_uid_ = 0;

    friend class Graph;
};

enum class OpKind {
    Leaf,
    EmbedRows,
    MatMul,
    Add,
    Mul,
    Scale,
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    LayerNorm,
    SliceCols,
    ConcatCols,
    Transpose,
    Sum,
    CrossEntropy,
};

const char* op_name(OpKind k);

// One recorded operation. `value` is the forward result; `int_args` and
// `scalar_arg` hold op-specific attributes (gather ids, slice bounds,
// softmax axis, scale factor, layer-norm epsilon, CE targets).
struct Node {
    OpKind kind;
    std::vector<int64_t> inputs;
    Tensor value;
    std::vector<int64_t> int_args;
    double scalar_arg = 0.0;
};

// Append-only recording of a forward pass plus reverse-mode gradients.
// Confined to one thread of execution.
class Graph {
public:
    Graph();

    int64_t add_node(Node n, Tensor* out);
    int64_t leaf(const Tensor& t, Tensor* tracked);

    const Node& node(int64_t id) const { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }
    uint64_t uid() const { return uid_; }

    // Reverse sweep from a scalar root; gradients afterwards available for
    // every node reachable from the root.
    void backward(int64_t root);
    void backward(const Tensor& root);

    bool has_grad(int64_t id) const { return grads_.count(id) != 0; }
    const Tensor& grad(int64_t id) const;
    const Tensor& grad(const Tensor& t) const;

private:
    uint64_t uid_;
    std::vector<Node> nodes_;
    std::unordered_map<int64_t, Tensor> grads_;

    void accumulate(int64_t id, Tensor g);
};

// RAII recording scope: installs `g` as the thread's active graph.
class Recording {
public:
    explicit Recording(Graph& g);
    ~Recording();
    Recording(const Recording&) = delete;
    Recording& operator=(const Recording&) = delete;

private:
    Graph* prev_;
};

Graph* current_graph();

// Registers `t` as a leaf on the active graph (no-op without a recording).
Tensor track(const Tensor& t);

// Primitive operations. Each computes its value identically with or
// without an active recording.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double s);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor embed_rows(const Tensor& table, std::span<const int> ids);
Tensor slice_cols(const Tensor& x, size_t start, size_t len);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor transpose(const Tensor& x);
Tensor sum(const Tensor& x);
// Mean negative log-likelihood over rows of logits [N x V]; targets of -1
// are excluded from the mean.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets);

// Re-evaluates a recorded node's operation on substituted input values
// (same attributes, no recording). Used by the attribution engine.
Tensor reapply(const Node& n, std::span<const Tensor> inputs);

} // namespace nnlens
