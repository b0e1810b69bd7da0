#include "nnlens/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

#include "nnlens/kernels.hpp"

namespace nnlens {

std::string shape_str(std::span<const size_t> shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

size_t shape_product(const std::vector<size_t>& shape) {
    size_t n = 1;
    for (size_t d : shape) n *= d;
    return n;
}

void check_shape(const std::vector<size_t>& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (size_t d : shape)
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
}

} // namespace

Tensor::Tensor(std::vector<size_t> shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(std::vector<size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (shape_product(shape_) != data_.size())
        throw ShapeError("data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_str(shape_));
}

Tensor Tensor::full(std::vector<size_t> shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
}

double Tensor::at(size_t r, size_t c) const { return data_[r * cols() + c]; }
double& Tensor::at(size_t r, size_t c) { return data_[r * cols() + c]; }

double Tensor::item() const {
    if (size() != 1)
        throw ContractError("item() requires a single-element tensor, got " + shape_str(shape_));
    return data_[0];
}

size_t Tensor::rows() const { return size() / cols(); }
size_t Tensor::cols() const { return shape_.back(); }

const char* op_name(OpKind k) {
    switch (k) {
        case OpKind::Leaf: return "leaf";
        case OpKind::EmbedRows: return "embed_rows";
        case OpKind::MatMul: return "matmul";
        case OpKind::Add: return "add";
        case OpKind::Mul: return "mul";
        case OpKind::Scale: return "scale";
        case OpKind::Sigmoid: return "sigmoid";
        case OpKind::Tanh: return "tanh";
        case OpKind::Relu: return "relu";
        case OpKind::Softmax: return "softmax";
        case OpKind::LayerNorm: return "layer_norm";
        case OpKind::SliceCols: return "slice_cols";
        case OpKind::ConcatCols: return "concat_cols";
        case OpKind::Transpose: return "transpose";
        case OpKind::Sum: return "sum";
        case OpKind::CrossEntropy: return "cross_entropy";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Graph & recording scope

namespace {
std::atomic<uint64_t> g_graph_uid{1};

Graph*& tl_graph() {
    thread_local Graph* g = nullptr;
    return g;
}
} // namespace

Graph::Graph() : uid_(g_graph_uid.fetch_add(1)) {}

int64_t Graph::add_node(Node n, Tensor* out) {
    int64_t id = static_cast<int64_t>(nodes_.size());
    if (out) {
        out->node_ = id;
        out->graph_uid_ = uid_;
        n.value = *out;
    }
    nodes_.push_back(std::move(n));
    return id;
}

int64_t Graph::leaf(const Tensor& t, Tensor* tracked) {
    Node n;
    n.kind = OpKind::Leaf;
    n.value = t;
    int64_t id = static_cast<int64_t>(nodes_.size());
    n.value.node_ = id;
    n.value.graph_uid_ = uid_;
    if (tracked) *tracked = n.value;
    nodes_.push_back(std::move(n));
    return id;
}

Recording::Recording(Graph& g) : prev_(tl_graph()) { tl_graph() = &g; }
Recording::~Recording() { tl_graph() = prev_; }

Graph* current_graph() { return tl_graph(); }

Tensor track(const Tensor& t) {
    Graph* g = tl_graph();
    if (!g) return t;
    Tensor out;
    g->leaf(t, &out);
    return out;
}

namespace {

// Resolves the node id of `t` in graph `g`, auto-registering plain tensors
// as leaves. A tensor tagged by a different graph is treated as plain.
int64_t ensure_node(Graph& g, const Tensor& t) {
    if (t.graph_uid() == g.uid() && t.node() >= 0) return t.node();
    return g.leaf(t, nullptr);
}

Tensor record_unary(OpKind kind, const Tensor& in, Tensor value,
                    std::vector<int64_t> int_args = {}, double scalar_arg = 0.0) {
    Graph* g = tl_graph();
    if (!g) return value;
    Node n;
    n.kind = kind;
    n.inputs = {ensure_node(*g, in)};
    n.int_args = std::move(int_args);
    n.scalar_arg = scalar_arg;
    g->add_node(std::move(n), &value);
    return value;
}

Tensor record_nary(OpKind kind, std::span<const Tensor> ins, Tensor value,
                   std::vector<int64_t> int_args = {}, double scalar_arg = 0.0) {
    Graph* g = tl_graph();
    if (!g) return value;
    Node n;
    n.kind = kind;
    for (const Tensor& t : ins) n.inputs.push_back(ensure_node(*g, t));
    n.int_args = std::move(int_args);
    n.scalar_arg = scalar_arg;
    g->add_node(std::move(n), &value);
    return value;
}

// ---------------------------------------------------------------------------
// Broadcast handling. Supported forms for binary elementwise ops:
//   - identical shapes
//   - second operand is a single element (scalar broadcast)
//   - second operand's shape is a suffix of the first's (trailing/bias form)
// The larger operand may appear on either side.

enum class Bcast { Same, ScalarB, TrailB };

bool is_suffix(const std::vector<size_t>& big, const std::vector<size_t>& small) {
    if (small.size() > big.size()) return false;
    for (size_t i = 0; i < small.size(); ++i)
        if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
    return true;
}

Bcast bcast_kind(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.size() == 1) return Bcast::ScalarB;
    if (b.size() <= a.size() && is_suffix(a.shape(), b.shape())) return Bcast::TrailB;
    throw ShapeError(std::string(what) + ": shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are not broadcast-compatible");
}

template <class F>
Tensor eval_binary(const Tensor& a0, const Tensor& b0, F f, const char* what) {
    // Canonical order: the higher-rank (or larger) operand first.
    const bool swapped =
        b0.rank() > a0.rank() || (b0.rank() == a0.rank() && b0.size() > a0.size());
    const Tensor& a = swapped ? b0 : a0;
    const Tensor& b = swapped ? a0 : b0;
    Bcast k = bcast_kind(a, b, what);
    Tensor out(a.shape());
    const size_t n = a.size();
    auto g = [&](double x, double y) { return swapped ? f(y, x) : f(x, y); };
    switch (k) {
        case Bcast::Same:
            kernels::zip(out.data(), a.data(), b.data(), n, g);
            break;
        case Bcast::ScalarB: {
            const double bv = b[0];
            kernels::map(out.data(), a.data(), n, [&](double x) { return g(x, bv); });
            break;
        }
        case Bcast::TrailB: {
            const size_t bs = b.size();
            const double* ap = a.data();
            const double* bp = b.data();
            double* op = out.data();
            for (size_t i = 0; i < n; i += bs)
                for (size_t j = 0; j < bs; ++j) op[i + j] = g(ap[i + j], bp[j]);
            break;
        }
    }
    return out;
}

// Reduce-sums `g` (shaped like the op output) down to `shape` by summing
// the leading block dimension; used for broadcast gradients.
Tensor reduce_to_shape(const Tensor& g, const std::vector<size_t>& shape) {
    size_t target = 1;
    for (size_t d : shape) target *= d;
    if (g.size() == target && g.shape() == shape) return g;
    Tensor out(shape);
    const size_t n = g.size();
    for (size_t i = 0; i < n; ++i) out[i % target] += g[i];
    return out;
}

struct AxisView {
    size_t outer, len, inner;
};

AxisView axis_view(const Tensor& x, int axis) {
    int r = static_cast<int>(x.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(x.shape()));
    AxisView v{1, x.shape()[static_cast<size_t>(axis)], 1};
    for (int i = 0; i < axis; ++i) v.outer *= x.shape()[static_cast<size_t>(i)];
    for (int i = axis + 1; i < r; ++i) v.inner *= x.shape()[static_cast<size_t>(i)];
    return v;
}

Tensor eval_softmax(const Tensor& x, int axis) {
    AxisView v = axis_view(x, axis);
    Tensor out(x.shape());
    const double* xp = x.data();
    double* op = out.data();
    const int64_t lanes = static_cast<int64_t>(v.outer * v.inner);
#pragma omp parallel for schedule(static) if (lanes * (int64_t)v.len > (int64_t)kernels::kMapParallelElems)
    for (int64_t lane = 0; lane < lanes; ++lane) {
        const size_t o = static_cast<size_t>(lane) / v.inner;
        const size_t in = static_cast<size_t>(lane) % v.inner;
        const size_t base = o * v.len * v.inner + in;
        double mx = xp[base];
        for (size_t i = 1; i < v.len; ++i) mx = std::max(mx, xp[base + i * v.inner]);
        double s = 0.0;
        for (size_t i = 0; i < v.len; ++i) {
            double e = std::exp(xp[base + i * v.inner] - mx);
            op[base + i * v.inner] = e;
            s += e;
        }
        const double inv = 1.0 / s;
        for (size_t i = 0; i < v.len; ++i) op[base + i * v.inner] *= inv;
    }
    return out;
}

Tensor eval_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const size_t d = x.cols();
    if (gamma.size() != d || beta.size() != d)
        throw ShapeError("layer_norm: gamma/beta size must equal last dim " + std::to_string(d));
    Tensor out(x.shape());
    const size_t rows = x.rows();
    for (size_t r = 0; r < rows; ++r) {
        const double* xr = x.data() + r * d;
        double* orow = out.data() + r * d;
        double mean = 0.0;
        for (size_t j = 0; j < d; ++j) mean += xr[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (size_t j = 0; j < d; ++j) {
            double c = xr[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (size_t j = 0; j < d; ++j)
            orow[j] = (xr[j] - mean) * inv * gamma[j] + beta[j];
    }
    return out;
}

Tensor eval_matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    if (a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    Tensor out({a.shape()[0], b.shape()[1]});
    kernels::matmul(a.data(), b.data(), out.data(), a.shape()[0], a.shape()[1], b.shape()[1]);
    return out;
}

Tensor eval_embed_rows(const Tensor& table, std::span<const int> ids) {
    if (table.rank() != 2) throw ShapeError("embed_rows: table must be rank 2");
    const size_t v = table.shape()[0];
    const size_t d = table.shape()[1];
    if (ids.empty()) throw ContractError("embed_rows: empty id list");
    Tensor out({ids.size(), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        int id = ids[i];
        if (id < 0 || static_cast<size_t>(id) >= v)
            throw VocabError("token id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
        std::memcpy(out.data() + i * d, table.data() + static_cast<size_t>(id) * d,
                    d * sizeof(double));
    }
    return out;
}

Tensor eval_slice_cols(const Tensor& x, size_t start, size_t len) {
    const size_t c = x.cols();
    if (start + len > c || len == 0)
        throw ShapeError("slice_cols: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") invalid for width " + std::to_string(c));
    std::vector<size_t> shape = x.shape();
    shape.back() = len;
    Tensor out(std::move(shape));
    const size_t rows = x.rows();
    for (size_t r = 0; r < rows; ++r)
        std::memcpy(out.data() + r * len, x.data() + r * c + start, len * sizeof(double));
    return out;
}

Tensor eval_concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    size_t total = 0;
    const size_t rows = parts[0].rows();
    for (const Tensor& p : parts) {
        if (p.rows() != rows)
            throw ShapeError("concat_cols: row counts differ");
        total += p.cols();
    }
    std::vector<size_t> shape = parts[0].shape();
    shape.back() = total;
    Tensor out(std::move(shape));
    size_t off = 0;
    for (const Tensor& p : parts) {
        const size_t c = p.cols();
        for (size_t r = 0; r < rows; ++r)
            std::memcpy(out.data() + r * total + off, p.data() + r * c, c * sizeof(double));
        off += c;
    }
    return out;
}

Tensor eval_transpose(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_str(x.shape()));
    const size_t m = x.shape()[0], n = x.shape()[1];
    Tensor out({n, m});
    for (size_t i = 0; i < m; ++i)
        for (size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    return out;
}

Tensor eval_sum(const Tensor& x) {
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i];
    return Tensor::scalar(s);
}

Tensor eval_cross_entropy(const Tensor& logits, std::span<const int> targets) {
    if (logits.rank() != 2)
        throw ShapeError("cross_entropy: logits must be [N x V], got " + shape_str(logits.shape()));
    const size_t n = logits.shape()[0], v = logits.shape()[1];
    if (targets.size() != n)
        throw ContractError("cross_entropy: " + std::to_string(targets.size()) +
                            " targets for " + std::to_string(n) + " rows");
    double total = 0.0;
    size_t counted = 0;
    for (size_t r = 0; r < n; ++r) {
        int t = targets[r];
        if (t < 0) continue;
        if (static_cast<size_t>(t) >= v)
            throw VocabError("cross_entropy: target " + std::to_string(t) + " out of range");
        const double* row = logits.data() + r * v;
        double mx = row[0];
        for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
        double lse = 0.0;
        for (size_t j = 0; j < v; ++j) lse += std::exp(row[j] - mx);
        total += mx + std::log(lse) - row[static_cast<size_t>(t)];
        ++counted;
    }
    if (counted == 0) throw ContractError("cross_entropy: all targets ignored");
    return Tensor::scalar(total / static_cast<double>(counted));
}

} // namespace

// ---------------------------------------------------------------------------
// Public ops

Tensor matmul(const Tensor& a, const Tensor& b) {
    Tensor v = eval_matmul(a, b);
    const Tensor ins[] = {a, b};
    return record_nary(OpKind::MatMul, ins, std::move(v));
}

Tensor add(const Tensor& a, const Tensor& b) {
    Tensor v = eval_binary(a, b, [](double x, double y) { return x + y; }, "add");
    const Tensor ins[] = {a, b};
    return record_nary(OpKind::Add, ins, std::move(v));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Tensor v = eval_binary(a, b, [](double x, double y) { return x * y; }, "mul");
    const Tensor ins[] = {a, b};
    return record_nary(OpKind::Mul, ins, std::move(v));
}

Tensor scale(const Tensor& x, double s) {
    Tensor v(x.shape());
    kernels::map(v.data(), x.data(), x.size(), [s](double a) { return a * s; });
    return record_unary(OpKind::Scale, x, std::move(v), {}, s);
}

Tensor sigmoid(const Tensor& x) {
    Tensor v(x.shape());
    kernels::map(v.data(), x.data(), x.size(),
                 [](double a) { return 1.0 / (1.0 + std::exp(-a)); });
    return record_unary(OpKind::Sigmoid, x, std::move(v));
}

Tensor tanh(const Tensor& x) {
    Tensor v(x.shape());
    kernels::map(v.data(), x.data(), x.size(), [](double a) { return std::tanh(a); });
    return record_unary(OpKind::Tanh, x, std::move(v));
}

Tensor relu(const Tensor& x) {
    Tensor v(x.shape());
    kernels::map(v.data(), x.data(), x.size(), [](double a) { return a > 0.0 ? a : 0.0; });
    return record_unary(OpKind::Relu, x, std::move(v));
}

Tensor softmax(const Tensor& x, int axis) {
    int r = static_cast<int>(x.rank());
    int ax = axis < 0 ? axis + r : axis;
    Tensor v = eval_softmax(x, axis);
    return record_unary(OpKind::Softmax, x, std::move(v), {ax});
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    Tensor v = eval_layer_norm(x, gamma, beta, eps);
    const Tensor ins[] = {x, gamma, beta};
    return record_nary(OpKind::LayerNorm, ins, std::move(v), {}, eps);
}

Tensor embed_rows(const Tensor& table, std::span<const int> ids) {
    Tensor v = eval_embed_rows(table, ids);
    std::vector<int64_t> args(ids.begin(), ids.end());
    return record_unary(OpKind::EmbedRows, table, std::move(v), std::move(args));
}

Tensor slice_cols(const Tensor& x, size_t start, size_t len) {
    Tensor v = eval_slice_cols(x, start, len);
    return record_unary(OpKind::SliceCols, x, std::move(v),
                        {static_cast<int64_t>(start), static_cast<int64_t>(len)});
}

Tensor concat_cols(std::span<const Tensor> parts) {
    Tensor v = eval_concat_cols(parts);
    return record_nary(OpKind::ConcatCols, parts, std::move(v));
}

Tensor transpose(const Tensor& x) {
    Tensor v = eval_transpose(x);
    return record_unary(OpKind::Transpose, x, std::move(v));
}

Tensor sum(const Tensor& x) {
    Tensor v = eval_sum(x);
    return record_unary(OpKind::Sum, x, std::move(v));
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets) {
    Tensor v = eval_cross_entropy(logits, targets);
    std::vector<int64_t> args(targets.begin(), targets.end());
    return record_unary(OpKind::CrossEntropy, logits, std::move(v), std::move(args));
}

Tensor reapply(const Node& n, std::span<const Tensor> inputs) {
    switch (n.kind) {
        case OpKind::Leaf:
            return n.value;
        case OpKind::EmbedRows: {
            std::vector<int> ids(n.int_args.begin(), n.int_args.end());
            return eval_embed_rows(inputs[0], ids);
        }
        case OpKind::MatMul:
            return eval_matmul(inputs[0], inputs[1]);
        case OpKind::Add:
            return eval_binary(inputs[0], inputs[1],
                               [](double x, double y) { return x + y; }, "add");
        case OpKind::Mul:
            return eval_binary(inputs[0], inputs[1],
                               [](double x, double y) { return x * y; }, "mul");
        case OpKind::Scale: {
            Tensor v(inputs[0].shape());
            const double s = n.scalar_arg;
            kernels::map(v.data(), inputs[0].data(), inputs[0].size(),
                         [s](double a) { return a * s; });
            return v;
        }
        case OpKind::Sigmoid: {
            Tensor v(inputs[0].shape());
            kernels::map(v.data(), inputs[0].data(), inputs[0].size(),
                         [](double a) { return 1.0 / (1.0 + std::exp(-a)); });
            return v;
        }
        case OpKind::Tanh: {
            Tensor v(inputs[0].shape());
            kernels::map(v.data(), inputs[0].data(), inputs[0].size(),
                         [](double a) { return std::tanh(a); });
            return v;
        }
        case OpKind::Relu: {
            Tensor v(inputs[0].shape());
            kernels::map(v.data(), inputs[0].data(), inputs[0].size(),
                         [](double a) { return a > 0.0 ? a : 0.0; });
            return v;
        }
        case OpKind::Softmax:
            return eval_softmax(inputs[0], static_cast<int>(n.int_args[0]));
        case OpKind::LayerNorm:
            return eval_layer_norm(inputs[0], inputs[1], inputs[2], n.scalar_arg);
        case OpKind::SliceCols:
            return eval_slice_cols(inputs[0], static_cast<size_t>(n.int_args[0]),
                                   static_cast<size_t>(n.int_args[1]));
        case OpKind::ConcatCols:
            return eval_concat_cols(inputs);
        case OpKind::Transpose:
            return eval_transpose(inputs[0]);
        case OpKind::Sum:
            return eval_sum(inputs[0]);
        case OpKind::CrossEntropy:
            break;
    }
    throw CapabilityError(std::string("no decomposition rule for operation '") +
                          op_name(n.kind) + "'");
}

// ---------------------------------------------------------------------------
// Backward

void Graph::accumulate(int64_t id, Tensor g) {
    auto it = grads_.find(id);
    if (it == grads_.end()) {
        grads_.emplace(id, std::move(g));
        return;
    }
    Tensor& acc = it->second;
    for (size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

const Tensor& Graph::grad(int64_t id) const {
    auto it = grads_.find(id);
    if (it == grads_.end())
        throw ContractError("no gradient recorded for node " + std::to_string(id));
    return it->second;
}

const Tensor& Graph::grad(const Tensor& t) const {
    if (t.graph_uid() != uid_ || t.node() < 0)
        throw ContractError("tensor is not tracked by this graph");
    return grad(t.node());
}

void Graph::backward(const Tensor& root) {
    if (root.graph_uid() != uid_ || root.node() < 0)
        throw ContractError("backward: root tensor is not tracked by this graph");
    backward(root.node());
}

void Graph::backward(int64_t root) {
    if (root < 0 || static_cast<size_t>(root) >= nodes_.size())
        throw ContractError("backward: invalid root node");
    if (nodes_[static_cast<size_t>(root)].value.size() != 1)
        throw ContractError("backward: root must be scalar, got " +
                            shape_str(nodes_[static_cast<size_t>(root)].value.shape()));

    // Mark ancestors of the root.
    std::vector<char> reach(nodes_.size(), 0);
    std::vector<int64_t> stack{root};
    reach[static_cast<size_t>(root)] = 1;
    while (!stack.empty()) {
        int64_t id = stack.back();
        stack.pop_back();
        for (int64_t in : nodes_[static_cast<size_t>(id)].inputs) {
            if (!reach[static_cast<size_t>(in)]) {
                reach[static_cast<size_t>(in)] = 1;
                stack.push_back(in);
            }
        }
    }

    grads_.clear();
    grads_.emplace(root, Tensor::scalar(1.0));

    for (int64_t id = root; id >= 0; --id) {
        if (!reach[static_cast<size_t>(id)]) continue;
        auto git = grads_.find(id);
        if (git == grads_.end()) continue;
        const Node& n = nodes_[static_cast<size_t>(id)];
        const Tensor g = git->second; // copy: map may rehash below
        switch (n.kind) {
            case OpKind::Leaf:
                break;
            case OpKind::EmbedRows: {
                const Tensor& table = nodes_[static_cast<size_t>(n.inputs[0])].value;
                Tensor gt(table.shape());
                const size_t d = table.shape()[1];
                for (size_t i = 0; i < n.int_args.size(); ++i) {
                    const size_t row = static_cast<size_t>(n.int_args[i]);
                    for (size_t j = 0; j < d; ++j) gt[row * d + j] += g[i * d + j];
                }
                accumulate(n.inputs[0], std::move(gt));
                break;
            }
            case OpKind::MatMul: {
                const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
                // ga = g * b^T ; gb = a^T * g
                Tensor bt = eval_transpose(b);
                Tensor at = eval_transpose(a);
                accumulate(n.inputs[0], eval_matmul(g, bt));
                accumulate(n.inputs[1], eval_matmul(at, g));
                break;
            }
            case OpKind::Add: {
                const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
                accumulate(n.inputs[0], reduce_to_shape(g, a.shape()));
                accumulate(n.inputs[1], reduce_to_shape(g, b.shape()));
                break;
            }
            case OpKind::Mul: {
                const Tensor& a = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& b = nodes_[static_cast<size_t>(n.inputs[1])].value;
                Tensor gb_term = eval_binary(g, a, [](double x, double y) { return x * y; }, "mul");
                Tensor ga_term = eval_binary(g, b, [](double x, double y) { return x * y; }, "mul");
                accumulate(n.inputs[0], reduce_to_shape(ga_term, a.shape()));
                accumulate(n.inputs[1], reduce_to_shape(gb_term, b.shape()));
                break;
            }
            case OpKind::Scale: {
                Tensor gi(g.shape());
                const double s = n.scalar_arg;
                kernels::map(gi.data(), g.data(), g.size(), [s](double x) { return x * s; });
                accumulate(n.inputs[0], std::move(gi));
                break;
            }
            case OpKind::Sigmoid: {
                const Tensor& y = n.value;
                Tensor gi(g.shape());
                kernels::zip(gi.data(), g.data(), y.data(), g.size(),
                             [](double gv, double yv) { return gv * yv * (1.0 - yv); });
                accumulate(n.inputs[0], std::move(gi));
                break;
            }
            case OpKind::Tanh: {
                const Tensor& y = n.value;
                Tensor gi(g.shape());
                kernels::zip(gi.data(), g.data(), y.data(), g.size(),
                             [](double gv, double yv) { return gv * (1.0 - yv * yv); });
                accumulate(n.inputs[0], std::move(gi));
                break;
            }
            case OpKind::Relu: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                Tensor gi(g.shape());
                kernels::zip(gi.data(), g.data(), x.data(), g.size(),
                             [](double gv, double xv) { return xv > 0.0 ? gv : 0.0; });
                accumulate(n.inputs[0], std::move(gi));
                break;
            }
            case OpKind::Softmax: {
                const Tensor& y = n.value;
                AxisView v = axis_view(y, static_cast<int>(n.int_args[0]));
                Tensor gi(g.shape());
                for (size_t o = 0; o < v.outer; ++o) {
                    for (size_t in = 0; in < v.inner; ++in) {
                        const size_t base = o * v.len * v.inner + in;
                        double dot = 0.0;
                        for (size_t i = 0; i < v.len; ++i) {
                            const size_t idx = base + i * v.inner;
                            dot += g[idx] * y[idx];
                        }
                        for (size_t i = 0; i < v.len; ++i) {
                            const size_t idx = base + i * v.inner;
                            gi[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                accumulate(n.inputs[0], std::move(gi));
                break;
            }
            case OpKind::LayerNorm: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const Tensor& gamma = nodes_[static_cast<size_t>(n.inputs[1])].value;
                const double eps = n.scalar_arg;
                const size_t d = x.cols();
                const size_t rows = x.rows();
                Tensor gx(x.shape());
                Tensor ggamma(gamma.shape());
                Tensor gbeta(gamma.shape());
                for (size_t r = 0; r < rows; ++r) {
                    const double* xr = x.data() + r * d;
                    const double* gr = g.data() + r * d;
                    double mean = 0.0;
                    for (size_t j = 0; j < d; ++j) mean += xr[j];
                    mean /= static_cast<double>(d);
                    double var = 0.0;
                    for (size_t j = 0; j < d; ++j) {
                        double c = xr[j] - mean;
                        var += c * c;
                    }
                    var /= static_cast<double>(d);
                    const double inv = 1.0 / std::sqrt(var + eps);
                    double sum_gg = 0.0, sum_ggx = 0.0;
                    for (size_t j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mean) * inv;
                        const double gg = gr[j] * gamma[j];
                        sum_gg += gg;
                        sum_ggx += gg * xhat;
                        ggamma[j] += gr[j] * xhat;
                        gbeta[j] += gr[j];
                    }
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (size_t j = 0; j < d; ++j) {
                        const double xhat = (xr[j] - mean) * inv;
                        const double gg = gr[j] * gamma[j];
                        gx[r * d + j] = inv * (gg - inv_d * sum_gg - xhat * inv_d * sum_ggx);
                    }
                }
                accumulate(n.inputs[0], std::move(gx));
                accumulate(n.inputs[1], std::move(ggamma));
                accumulate(n.inputs[2], std::move(gbeta));
                break;
            }
            case OpKind::SliceCols: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const size_t start = static_cast<size_t>(n.int_args[0]);
                const size_t len = static_cast<size_t>(n.int_args[1]);
                Tensor gi(x.shape());
                const size_t c = x.cols();
                const size_t rows = x.rows();
                for (size_t r = 0; r < rows; ++r)
                    for (size_t j = 0; j < len; ++j) gi[r * c + start + j] = g[r * len + j];
                accumulate(n.inputs[0], std::move(gi));
                break;
            }
            case OpKind::ConcatCols: {
                const size_t total = n.value.cols();
                const size_t rows = n.value.rows();
                size_t off = 0;
                for (int64_t in_id : n.inputs) {
                    const Tensor& part = nodes_[static_cast<size_t>(in_id)].value;
                    const size_t c = part.cols();
                    Tensor gi(part.shape());
                    for (size_t r = 0; r < rows; ++r)
                        for (size_t j = 0; j < c; ++j) gi[r * c + j] = g[r * total + off + j];
                    accumulate(in_id, std::move(gi));
                    off += c;
                }
                break;
            }
            case OpKind::Transpose: {
                accumulate(n.inputs[0], eval_transpose(g));
                break;
            }
            case OpKind::Sum: {
                const Tensor& x = nodes_[static_cast<size_t>(n.inputs[0])].value;
                accumulate(n.inputs[0], Tensor::full(x.shape(), g[0]));
                break;
            }
            case OpKind::CrossEntropy: {
                const Tensor& logits = nodes_[static_cast<size_t>(n.inputs[0])].value;
                const size_t rows = logits.shape()[0], v = logits.shape()[1];
                size_t counted = 0;
                for (int64_t t : n.int_args)
                    if (t >= 0) ++counted;
                Tensor gi(logits.shape());
                const double w = g[0] / static_cast<double>(counted);
                for (size_t r = 0; r < rows; ++r) {
                    const int64_t t = n.int_args[r];
                    if (t < 0) continue;
                    const double* row = logits.data() + r * v;
                    double mx = row[0];
                    for (size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                    double lse = 0.0;
                    for (size_t j = 0; j < v; ++j) lse += std::exp(row[j] - mx);
                    for (size_t j = 0; j < v; ++j)
                        gi[r * v + j] = w * (std::exp(row[j] - mx) / lse -
                                             (static_cast<int64_t>(j) == t ? 1.0 : 0.0));
                }
                accumulate(n.inputs[0], std::move(gi));
                break;
            }
        }
    }
}

} // namespace nnlens
