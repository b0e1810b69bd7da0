#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nnlens/model.hpp"
#include "nnlens/tensor.hpp"

namespace nnlens {

// Assignment of input positions to attribution groups ("players").
struct PlayerPartition {
    std::vector<int> group_of; // per input position, in [0, num_groups)
    int num_groups = 0;

    static PlayerPartition per_token(size_t positions);
    void validate(size_t positions) const;
};

// Exact mode enumerates 2^G coalitions per interaction; the cap keeps that
// at 4096.
inline constexpr int kExactGroupCap = 12;

struct AttributionMethod {
    enum class Kind { Exact, Sampling, CDPairwise };
    Kind kind = Kind::Exact;
    size_t samples = 100;     // Sampling: permutation count
    uint64_t seed = 0;        // Sampling: permutation stream
    bool cd_normalize = true; // CDPairwise: rescale so contributions recompose

    static AttributionMethod exact() { return {Kind::Exact, 0, 0, true}; }
    static AttributionMethod sampling(size_t m, uint64_t seed) {
        return {Kind::Sampling, m, seed, true};
    }
    static AttributionMethod cd_pairwise(bool normalize = true) {
        return {Kind::CDPairwise, 0, 0, normalize};
    }
    std::string name() const;
};

struct Attribution {
    int target = -1;     // explained output token id
    double full_logit = 0.0;
    std::vector<double> contributions; // per group
    double bias = 0.0;   // statically-present information (weights, initial states)
};

// ---------------------------------------------------------------------------
// Coalition games and Shapley operators. A game maps a coalition bitmask
// over `num_players` players to a value vector.

using Game = std::function<Tensor(uint64_t mask)>;

// phi_g = sum over coalitions C without g of |C|!(G-|C|-1)!/G! *
// (v(C|{g}) - v(C)). Throws ContractError above kExactGroupCap.
std::vector<Tensor> exact_shapley(const Game& game, int num_players);

// Castro-style permutation sampling; deterministic per seed. The per-
// permutation marginals telescope, so the estimates sum to v(N) - v(empty)
// for every m.
std::vector<Tensor> sampled_shapley(const Game& game, int num_players, size_t m, uint64_t seed);

// Two-player collapse: group g versus everyone else (pre-normalization).
Tensor cd_pairwise(const Game& game, int num_players, int group);

// All pairwise values; when `normalize`, rescaled per element so they sum
// to v(N) - v(empty).
std::vector<Tensor> cd_attributions(const Game& game, int num_players, bool normalize);

// ---------------------------------------------------------------------------
// Slot-form decomposed tensors and propagation rules.

// G group slots followed by one bias slot; the slot sum recomposes the
// undecomposed activation.
struct DecomposedTensor {
    std::vector<Tensor> slots;

    size_t groups() const { return slots.size() - 1; }
    const Tensor& bias() const { return slots.back(); }
    Tensor recompose() const;

    static DecomposedTensor zeros(size_t groups, const std::vector<size_t>& shape);
};

enum class InteractionFn { Identity, Sigmoid, Tanh, Relu, Multiply, Softmax };

// Slots mapped through W; b (optional) lands in the bias slot only.
DecomposedTensor rule_linear(const DecomposedTensor& x, const Tensor& w, const Tensor* b);

// Slot-wise addition; throws ContractError on group-count mismatch.
DecomposedTensor rule_add(const DecomposedTensor& a, const DecomposedTensor& b);

// Shapley-decomposes the elementwise game G(C) = f(bias + sum of slots in
// C) built from the inputs' slots; output bias slot is G(empty).
DecomposedTensor rule_interaction(std::span<const DecomposedTensor> inputs, InteractionFn f,
                                  const AttributionMethod& method);

// ---------------------------------------------------------------------------
// Decomposed forward pass.

struct DecomposeDebug {
    // max |slot sum - recorded activation| over materialized graph nodes
    double max_node_recomposition_error = 0.0;
};

// Replays a recorded forward pass with per-coalition input occlusion:
// token embeddings contribute to their partition group, everything else
// (weights, biases, initial states, position embeddings) to the bias slot.
// Returns the decomposition of the readout-row logit for each target.
std::vector<Attribution> decompose_trace(const Trace& trace, const PlayerPartition& partition,
                                         const AttributionMethod& method,
                                         std::span<const int> targets,
                                         DecomposeDebug* debug = nullptr);

std::vector<Attribution> decompose_forward(const ModelInterface& model,
                                           std::span<const int> tokens,
                                           const PlayerPartition& partition,
                                           const AttributionMethod& method,
                                           std::span<const int> targets,
                                           DecomposeDebug* debug = nullptr);

// Fig-3-style text rendering: the full logit on top, per-token (group)
// contributions underneath.
std::string render_attribution(const Attribution& attr, std::span<const std::string> tokens,
                               const PlayerPartition& partition, const std::string& target_name);

} // namespace nnlens
