#include "nnlens/attribute.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <exception>
#include <optional>
#include <sstream>
#include <unordered_map>

#include "nnlens/errors.hpp"
#include "nnlens/rng.hpp"

namespace nnlens {

PlayerPartition PlayerPartition::per_token(size_t positions) {
    PlayerPartition p;
    p.group_of.resize(positions);
    for (size_t i = 0; i < positions; ++i) p.group_of[i] = static_cast<int>(i);
    p.num_groups = static_cast<int>(positions);
    return p;
}

void PlayerPartition::validate(size_t positions) const {
    if (num_groups < 1) throw ContractError("partition: need at least one group");
    if (group_of.size() != positions)
        throw ContractError("partition covers " + std::to_string(group_of.size()) +
                            " positions, input has " + std::to_string(positions));
    for (int g : group_of)
        if (g < 0 || g >= num_groups)
            throw ContractError("partition: group index " + std::to_string(g) +
                                " outside [0, " + std::to_string(num_groups) + ")");
}

std::string AttributionMethod::name() const {
    switch (kind) {
        case Kind::Exact: return "exact";
        case Kind::Sampling: return "sampling";
        case Kind::CDPairwise: return "cd";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Shapley operators on explicit games

namespace {

void check_players(int n, int cap) {
    if (n < 1) throw ContractError("shapley: need at least one player");
    if (n > cap)
        throw ContractError("shapley: " + std::to_string(n) + " players exceeds the cap of " +
                            std::to_string(cap));
}

} // namespace

std::vector<Tensor> exact_shapley(const Game& game, int num_players) {
    check_players(num_players, kExactGroupCap);
    const int n = num_players;
    const uint64_t full = (uint64_t{1} << n) - 1;

    std::vector<Tensor> values(full + 1);
    for (uint64_t m = 0; m <= full; ++m) values[m] = game(m);

    // w[s] = s! (n-s-1)! / n!
    std::vector<double> fact(static_cast<size_t>(n) + 1, 1.0);
    for (size_t i = 1; i < fact.size(); ++i) fact[i] = fact[i - 1] * static_cast<double>(i);
    std::vector<double> w(static_cast<size_t>(n), 0.0);
    for (int s = 0; s < n; ++s) w[static_cast<size_t>(s)] = fact[static_cast<size_t>(s)] *
                                                            fact[static_cast<size_t>(n - s - 1)] /
                                                            fact[static_cast<size_t>(n)];

    std::vector<Tensor> phi(static_cast<size_t>(n));
    for (uint64_t m = 0; m <= full; ++m) {
        const int size = std::popcount(m);
        for (int g = 0; g < n; ++g) {
            const uint64_t bit = uint64_t{1} << g;
            if (m & bit) continue;
            const double weight = w[static_cast<size_t>(size)];
            Tensor& acc = phi[static_cast<size_t>(g)];
            const Tensor& with = values[m | bit];
            const Tensor& without = values[m];
            if (acc.empty()) acc = Tensor(with.shape());
            for (size_t i = 0; i < acc.size(); ++i)
                acc[i] += weight * (with[i] - without[i]);
        }
    }
    return phi;
}

std::vector<Tensor> sampled_shapley(const Game& game, int num_players, size_t m, uint64_t seed) {
    if (num_players < 1) throw ContractError("shapley: need at least one player");
    if (num_players > 63) throw ContractError("shapley: more than 63 players not supported");
    if (m < 1) throw ContractError("sampled_shapley: need at least one permutation");
    const int n = num_players;

    std::unordered_map<uint64_t, Tensor> memo;
    auto value = [&](uint64_t mask) -> const Tensor& {
        auto it = memo.find(mask);
        if (it != memo.end()) return it->second;
        return memo.emplace(mask, game(mask)).first->second;
    };

    Rng rng(seed);
    std::vector<Tensor> phi(static_cast<size_t>(n));
    for (size_t s = 0; s < m; ++s) {
        std::vector<size_t> perm = rng.permutation(static_cast<size_t>(n));
        uint64_t mask = 0;
        Tensor prev = value(0);
        for (size_t g : perm) {
            mask |= uint64_t{1} << g;
            const Tensor& cur = value(mask);
            Tensor& acc = phi[g];
            if (acc.empty()) acc = Tensor(cur.shape());
            for (size_t i = 0; i < acc.size(); ++i) acc[i] += cur[i] - prev[i];
            prev = cur;
        }
    }
    const double inv = 1.0 / static_cast<double>(m);
    for (Tensor& t : phi)
        for (size_t i = 0; i < t.size(); ++i) t[i] *= inv;
    return phi;
}

Tensor cd_pairwise(const Game& game, int num_players, int group) {
    if (group < 0 || group >= num_players)
        throw ContractError("cd_pairwise: group out of range");
    if (num_players > 63) throw ContractError("cd_pairwise: more than 63 players not supported");
    const uint64_t full = num_players == 64 ? ~uint64_t{0}
                                            : (uint64_t{1} << num_players) - 1;
    const uint64_t bit = uint64_t{1} << group;
    Tensor v_empty = game(0);
    Tensor v_g = game(bit);
    Tensor v_rest = game(full & ~bit);
    Tensor v_full = game(full);
    Tensor phi(v_full.shape());
    for (size_t i = 0; i < phi.size(); ++i)
        phi[i] = 0.5 * ((v_g[i] - v_empty[i]) + (v_full[i] - v_rest[i]));
    return phi;
}

std::vector<Tensor> cd_attributions(const Game& game, int num_players, bool normalize) {
    std::vector<Tensor> phi;
    phi.reserve(static_cast<size_t>(num_players));
    for (int g = 0; g < num_players; ++g) phi.push_back(cd_pairwise(game, num_players, g));
    if (!normalize || num_players == 0) return phi;

    const uint64_t full = (uint64_t{1} << num_players) - 1;
    Tensor v_empty = game(0);
    Tensor v_full = game(full);
    const size_t n = v_full.size();
    for (size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (const Tensor& p : phi) total += p[i];
        const double target = v_full[i] - v_empty[i];
        // A zero pairwise sum cannot be rescaled; leave those elements raw.
        if (total == 0.0) continue;
        const double factor = target / total;
        for (Tensor& p : phi) p[i] *= factor;
    }
    return phi;
}

// ---------------------------------------------------------------------------
// Slot-form rules

Tensor DecomposedTensor::recompose() const {
    if (slots.empty()) throw ContractError("recompose: empty decomposition");
    Tensor out = slots[0];
    for (size_t s = 1; s < slots.size(); ++s)
        for (size_t i = 0; i < out.size(); ++i) out[i] += slots[s][i];
    return out;
}

DecomposedTensor DecomposedTensor::zeros(size_t groups, const std::vector<size_t>& shape) {
    DecomposedTensor d;
    d.slots.assign(groups + 1, Tensor(shape));
    return d;
}

DecomposedTensor rule_linear(const DecomposedTensor& x, const Tensor& w, const Tensor* b) {
    DecomposedTensor out;
    out.slots.reserve(x.slots.size());
    for (const Tensor& s : x.slots) out.slots.push_back(matmul(s, w));
    if (b) out.slots.back() = add(out.slots.back(), *b);
    return out;
}

DecomposedTensor rule_add(const DecomposedTensor& a, const DecomposedTensor& b) {
    if (a.groups() != b.groups())
        throw ContractError("rule_add: group counts differ (" + std::to_string(a.groups()) +
                            " vs " + std::to_string(b.groups()) + ")");
    DecomposedTensor out;
    out.slots.reserve(a.slots.size());
    for (size_t s = 0; s < a.slots.size(); ++s) out.slots.push_back(add(a.slots[s], b.slots[s]));
    return out;
}

namespace {

Tensor apply_interaction(InteractionFn f, std::span<const Tensor> args) {
    switch (f) {
        case InteractionFn::Identity:
            return args[0];
        case InteractionFn::Sigmoid:
            return sigmoid(args[0]);
        case InteractionFn::Tanh:
            return tanh(args[0]);
        case InteractionFn::Relu:
            return relu(args[0]);
        case InteractionFn::Multiply: {
            Tensor out = args[0];
            for (size_t i = 1; i < args.size(); ++i) out = mul(out, args[i]);
            return out;
        }
        case InteractionFn::Softmax:
            return softmax(args[0], -1);
    }
    throw CapabilityError("rule_interaction: function outside the primitive set");
}

std::vector<Tensor> shapley_by_method(const Game& game, int groups,
                                      const AttributionMethod& method) {
    switch (method.kind) {
        case AttributionMethod::Kind::Exact:
            return exact_shapley(game, groups);
        case AttributionMethod::Kind::Sampling:
            return sampled_shapley(game, groups, method.samples, method.seed);
        case AttributionMethod::Kind::CDPairwise:
            return cd_attributions(game, groups, method.cd_normalize);
    }
    throw ContractError("unknown attribution method");
}

} // namespace

DecomposedTensor rule_interaction(std::span<const DecomposedTensor> inputs, InteractionFn f,
                                  const AttributionMethod& method) {
    if (inputs.empty()) throw ContractError("rule_interaction: no inputs");
    const size_t groups = inputs[0].groups();
    for (const DecomposedTensor& in : inputs)
        if (in.groups() != groups)
            throw ContractError("rule_interaction: inputs disagree on group count");

    // The local coalition game: every input is summed over bias + the
    // coalition's slots, then f is applied.
    Game game = [&](uint64_t mask) {
        std::vector<Tensor> args;
        args.reserve(inputs.size());
        for (const DecomposedTensor& in : inputs) {
            Tensor v = in.bias();
            for (size_t g = 0; g < groups; ++g) {
                if (!(mask & (uint64_t{1} << g))) continue;
                for (size_t i = 0; i < v.size(); ++i) v[i] += in.slots[g][i];
            }
            args.push_back(std::move(v));
        }
        return apply_interaction(f, args);
    };

    std::vector<Tensor> phi = shapley_by_method(game, static_cast<int>(groups), method);
    DecomposedTensor out;
    out.slots = std::move(phi);
    out.slots.push_back(game(0)); // bias slot = G(empty) = f(bias slots)
    return out;
}

// ---------------------------------------------------------------------------
// Decomposed forward pass over a recorded graph.
//
// Exact coalition columns propagate through every recorded operation: the
// column for coalition C equals the node's value when the model runs with
// all non-member tokens zero-embedded. Static leaves (weights, biases,
// initial states, position embeddings) are identical across columns and
// stay in "uniform" form until an input-dependent operand touches them.

namespace {

struct CoalitionPlan {
    int groups = 0;
    std::vector<uint64_t> masks; // masks[0] == 0; contains the full mask
    std::unordered_map<uint64_t, size_t> index;
    size_t full_index = 0;

    static CoalitionPlan build(const AttributionMethod& method, int groups);
    size_t at(uint64_t mask) const {
        auto it = index.find(mask);
        if (it == index.end()) throw ContractError("internal: coalition missing from plan");
        return it->second;
    }
};

CoalitionPlan CoalitionPlan::build(const AttributionMethod& method, int groups) {
    if (groups < 1) throw ContractError("partition: need at least one group");
    if (groups > 63) throw ContractError("attribution supports at most 63 groups");
    CoalitionPlan plan;
    plan.groups = groups;
    const uint64_t full = (uint64_t{1} << groups) - 1;
    auto push = [&](uint64_t m) {
        if (plan.index.emplace(m, plan.masks.size()).second) plan.masks.push_back(m);
    };
    switch (method.kind) {
        case AttributionMethod::Kind::Exact: {
            if (groups > kExactGroupCap)
                throw ContractError("exact attribution capped at " +
                                    std::to_string(kExactGroupCap) + " groups, got " +
                                    std::to_string(groups));
            for (uint64_t m = 0; m <= full; ++m) push(m);
            break;
        }
        case AttributionMethod::Kind::Sampling: {
            push(0);
            push(full);
            Rng rng(method.seed);
            for (size_t s = 0; s < std::max<size_t>(1, method.samples); ++s) {
                std::vector<size_t> perm = rng.permutation(static_cast<size_t>(groups));
                uint64_t m = 0;
                for (size_t g : perm) {
                    m |= uint64_t{1} << g;
                    push(m);
                }
            }
            break;
        }
        case AttributionMethod::Kind::CDPairwise: {
            push(0);
            push(full);
            for (int g = 0; g < groups; ++g) {
                push(uint64_t{1} << g);
                push(full & ~(uint64_t{1} << g));
            }
            break;
        }
    }
    plan.full_index = plan.at(full);
    return plan;
}

// Per-node column values: either one tensor shared by all coalitions
// (static subgraphs) or one tensor per plan mask.
struct ColumnSet {
    bool uniform = true;
    std::vector<Tensor> cols; // size 1 when uniform, else plan.masks.size()

    const Tensor& at(size_t b) const { return uniform ? cols[0] : cols[b]; }
};

} // namespace

std::vector<Attribution> decompose_trace(const Trace& trace, const PlayerPartition& partition,
                                         const AttributionMethod& method,
                                         std::span<const int> targets, DecomposeDebug* debug) {
    if (!trace.graph || trace.logits_node < 0)
        throw ContractError("decompose_trace: trace has no recorded logits");
    const Graph& graph = *trace.graph;
    partition.validate(trace.input_rows.size());
    const int groups = partition.num_groups;
    CoalitionPlan plan = CoalitionPlan::build(method, groups);
    const size_t B = plan.masks.size();

    // Input-embedding nodes: node id -> list of (row, group).
    std::unordered_map<int64_t, std::vector<std::pair<size_t, int>>> input_map;
    for (size_t p = 0; p < trace.input_rows.size(); ++p) {
        auto [node, row] = trace.input_rows[p];
        input_map[node].emplace_back(row, partition.group_of[p]);
    }

    // Reachable subgraph and per-node consumer counts.
    const size_t n_nodes = graph.size();
    std::vector<char> reach(n_nodes, 0);
    std::vector<int64_t> stack{trace.logits_node};
    reach[static_cast<size_t>(trace.logits_node)] = 1;
    while (!stack.empty()) {
        int64_t id = stack.back();
        stack.pop_back();
        for (int64_t in : graph.node(id).inputs) {
            if (!reach[static_cast<size_t>(in)]) {
                reach[static_cast<size_t>(in)] = 1;
                stack.push_back(in);
            }
        }
    }
    std::vector<int> consumers(n_nodes, 0);
    for (size_t id = 0; id < n_nodes; ++id) {
        if (!reach[id]) continue;
        for (int64_t in : graph.node(static_cast<int64_t>(id)).inputs)
            consumers[static_cast<size_t>(in)]++;
    }

    std::vector<std::optional<ColumnSet>> values(n_nodes);
    auto release_inputs = [&](int64_t id) {
        for (int64_t in : graph.node(id).inputs) {
            if (--consumers[static_cast<size_t>(in)] == 0 &&
                in != trace.logits_node)
                values[static_cast<size_t>(in)].reset();
        }
    };

    for (size_t id = 0; id < n_nodes; ++id) {
        if (!reach[id]) continue;
        const Node& node = graph.node(static_cast<int64_t>(id));

        auto seed_it = input_map.find(static_cast<int64_t>(id));
        if (seed_it != input_map.end()) {
            // Token-embedding node: zero out the rows of absent groups.
            const Tensor& base = node.value;
            const size_t width = base.cols();
            ColumnSet cs;
            cs.uniform = false;
            cs.cols.resize(B);
            for (size_t b = 0; b < B; ++b) {
                Tensor col = base;
                for (const auto& [row, grp] : seed_it->second) {
                    if (plan.masks[b] & (uint64_t{1} << grp)) continue;
                    std::memset(col.data() + row * width, 0, width * sizeof(double));
                }
                cs.cols[b] = std::move(col);
            }
            values[id] = std::move(cs);
            release_inputs(static_cast<int64_t>(id));
            continue;
        }

        if (node.kind == OpKind::Leaf) {
            ColumnSet cs;
            cs.cols = {node.value};
            values[id] = std::move(cs);
            continue;
        }

        bool all_uniform = true;
        for (int64_t in : node.inputs)
            if (!values[static_cast<size_t>(in)]->uniform) all_uniform = false;

        if (all_uniform) {
            // A static subgraph: every coalition sees the recorded value.
            ColumnSet cs;
            cs.cols = {node.value};
            values[id] = std::move(cs);
            release_inputs(static_cast<int64_t>(id));
            continue;
        }

        ColumnSet cs;
        cs.uniform = false;
        cs.cols.resize(B);
        const int64_t work = static_cast<int64_t>(B) * static_cast<int64_t>(node.value.size());
        std::exception_ptr err;
#pragma omp parallel for schedule(static) if (work > 16384)
        for (size_t b = 0; b < B; ++b) {
            try {
                std::vector<Tensor> ins;
                ins.reserve(node.inputs.size());
                for (int64_t in : node.inputs)
                    ins.push_back(values[static_cast<size_t>(in)]->at(b));
                cs.cols[b] = reapply(node, ins);
            } catch (...) {
#pragma omp critical
                if (!err) err = std::current_exception();
            }
        }
        if (err) std::rethrow_exception(err);
        values[id] = std::move(cs);
        release_inputs(static_cast<int64_t>(id));

        if (debug) {
            // Recomposition check: derive the slot view at this node and
            // compare its sum against the recorded activation.
            const ColumnSet& cur = *values[id];
            Game g = [&](uint64_t mask) { return cur.at(plan.at(mask)); };
            std::vector<Tensor> phi = shapley_by_method(g, groups, method);
            Tensor total = g(0);
            for (const Tensor& p : phi)
                for (size_t i = 0; i < total.size(); ++i) total[i] += p[i];
            for (size_t i = 0; i < total.size(); ++i)
                debug->max_node_recomposition_error =
                    std::max(debug->max_node_recomposition_error,
                             std::abs(total[i] - node.value[i]));
        }
    }

    const ColumnSet& logits = *values[static_cast<size_t>(trace.logits_node)];
    const Tensor& recorded = graph.node(trace.logits_node).value;
    const size_t v = recorded.cols();
    if (trace.readout_row >= recorded.rows())
        throw ContractError("decompose_trace: readout row out of range");

    // The logit-row game shared by all targets.
    auto row_of = [&](const Tensor& t) {
        Tensor row({v});
        std::memcpy(row.data(), t.data() + trace.readout_row * v, v * sizeof(double));
        return row;
    };
    Game game = [&](uint64_t mask) { return row_of(logits.at(plan.at(mask))); };

    std::vector<Tensor> phi = shapley_by_method(game, groups, method);
    Tensor bias_row = game(0);
    Tensor full_row = row_of(logits.at(plan.full_index));

    std::vector<Attribution> out;
    out.reserve(targets.size());
    for (int target : targets) {
        if (target < 0 || static_cast<size_t>(target) >= v)
            throw VocabError("attribution target id " + std::to_string(target) +
                             " out of range [0, " + std::to_string(v) + ")");
        Attribution a;
        a.target = target;
        a.full_logit = full_row[static_cast<size_t>(target)];
        a.bias = bias_row[static_cast<size_t>(target)];
        a.contributions.resize(static_cast<size_t>(groups));
        for (int g = 0; g < groups; ++g)
            a.contributions[static_cast<size_t>(g)] = phi[static_cast<size_t>(g)][static_cast<size_t>(target)];
        out.push_back(std::move(a));
    }
    return out;
}

std::vector<Attribution> decompose_forward(const ModelInterface& model,
                                           std::span<const int> tokens,
                                           const PlayerPartition& partition,
                                           const AttributionMethod& method,
                                           std::span<const int> targets, DecomposeDebug* debug) {
    partition.validate(tokens.size());
    for (int t : targets)
        if (t < 0 || static_cast<size_t>(t) >= model.vocab_size())
            throw VocabError("attribution target id " + std::to_string(t) +
                             " outside the vocabulary");
    Trace trace = model.trace(tokens);
    return decompose_trace(trace, partition, method, targets, debug);
}

std::string render_attribution(const Attribution& attr, std::span<const std::string> tokens,
                               const PlayerPartition& partition, const std::string& target_name) {
    std::ostringstream os;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", attr.full_logit);
    os << "full logit  " << target_name << " = " << buf;
    std::snprintf(buf, sizeof(buf), "%.4f", attr.bias);
    os << "   (bias " << buf << ")\n";

    std::ostringstream toks, contribs;
    for (size_t p = 0; p < tokens.size(); ++p) {
        std::snprintf(buf, sizeof(buf), "%+.3f",
                      attr.contributions[static_cast<size_t>(partition.group_of[p])]);
        const size_t w = std::max(tokens[p].size(), std::strlen(buf)) + 2;
        toks << tokens[p] << std::string(w - tokens[p].size(), ' ');
        contribs << buf << std::string(w - std::strlen(buf), ' ');
    }
    os << "  " << toks.str() << "\n  " << contribs.str() << "\n";
    return os.str();
}

} // namespace nnlens
