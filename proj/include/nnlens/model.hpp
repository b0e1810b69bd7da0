#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "nnlens/corpus.hpp"
#include "nnlens/rng.hpp"
#include "nnlens/tensor.hpp"

namespace nnlens {

// Identifies one extractable activation stream, e.g. (0, "hx").
struct ActivationKey {
    int layer = 0;
    std::string name;

    std::string str() const { return std::to_string(layer) + "." + name; }
    static ActivationKey parse(const std::string& s);
    bool operator==(const ActivationKey& o) const = default;
    bool operator<(const ActivationKey& o) const {
        return layer != o.layer ? layer < o.layer : name < o.name;
    }
};

struct ForwardResult {
    Tensor logits;                            // [T x V]
    std::map<std::string, Tensor> activations; // ActivationKey::str() -> [T x width]
};

// Recorded forward pass handed to the attribution engine.
struct Trace {
    std::shared_ptr<Graph> graph;
    int64_t logits_node = -1; // producing [rows x V]
    size_t readout_row = 0;   // logits row to explain
    // Embedding source of each input position: (graph node, row within it).
    std::vector<std::pair<int64_t, size_t>> input_rows;
};

// Named trainable tensor. `bound` holds the leaf node id from the most
// recent recorded forward so the trainer can fetch gradients.
struct Param {
    std::string name;
    Tensor value;
    int64_t bound = -1;
};

class ModelInterface {
public:
    virtual ~ModelInterface() = default;

    virtual std::string type() const = 0;
    virtual size_t vocab_size() const = 0;
    virtual size_t num_layers() const = 0;
    virtual bool is_masked() const { return false; }
    virtual std::vector<ActivationKey> activation_names() const = 0;

    // Per-position logits plus every advertised activation stream.
    virtual ForwardResult forward(std::span<const int> tokens) const = 0;

    // Records the forward pass up to the logits used for attribution:
    // final position for causal models, mask position for masked ones.
    virtual Trace trace(std::span<const int> tokens) const = 0;

    // Scalar training loss for a batch of same-length sequences, built
    // under the active recording. `rng` drives mask sampling.
    virtual Tensor batch_loss(std::span<const std::vector<int>> seqs, Rng& rng) = 0;
    virtual std::vector<Param*> parameters() = 0;
    // Masking rate used by masked-mode losses; ignored elsewhere.
    virtual void set_mask_rate(double) {}

    // Writes <base>.nnlt (weights) and <base>.json (sidecar).
    virtual void save(const std::filesystem::path& base, const Vocab& vocab) const = 0;
};

// ---------------------------------------------------------------------------
// LSTM language model

struct LstmConfig {
    size_t vocab_size = 0;
    size_t embed_dim = 64;
    size_t hidden_dim = 64;
    size_t layers = 2;
    std::string init_phrase = ". <eos>"; // per-sentence initial-state phrase
};

struct LstmState {
    std::vector<Tensor> h, c; // per layer, [B x hidden]
};

struct LstmGates {
    Tensor i, f, g, o;
};

// One cell update. Stacked weight columns are ordered [i, f, g, o].
// wx: [in x 4h], wh: [h x 4h], b: [4h]; x: [B x in]; h, c: [B x h].
std::pair<LstmState, LstmGates> lstm_step(const Tensor& x, const Tensor& h, const Tensor& c,
                                          const Tensor& wx, const Tensor& wh, const Tensor& b);

class LstmLm : public ModelInterface {
public:
    LstmLm(LstmConfig cfg, uint64_t seed);

    std::string type() const override { return "lstm"; }
    size_t vocab_size() const override { return cfg_.vocab_size; }
    size_t num_layers() const override { return cfg_.layers; }
    std::vector<ActivationKey> activation_names() const override;
    ForwardResult forward(std::span<const int> tokens) const override;
    Trace trace(std::span<const int> tokens) const override;
    Tensor batch_loss(std::span<const std::vector<int>> seqs, Rng& rng) override;
    std::vector<Param*> parameters() override;
    void save(const std::filesystem::path& base, const Vocab& vocab) const override;

    // Final states after running `phrase` from zero states; empty phrase
    // yields zero states.
    LstmState init_states_from_phrase(std::span<const int> phrase) const;

    const LstmConfig& config() const { return cfg_; }
    void set_init_phrase_ids(std::vector<int> ids) { init_phrase_ids_ = std::move(ids); }
    const std::vector<int>& init_phrase_ids() const { return init_phrase_ids_; }

    struct LayerWeights {
        Param wx, wh, b;
    };
    const Param& embedding() const { return emb_; }
    const LayerWeights& layer(size_t l) const { return layers_[l]; }
    const Param& decoder_w() const { return dec_w_; }
    const Param& decoder_b() const { return dec_b_; }

    static std::unique_ptr<LstmLm> load(const std::filesystem::path& base);

    // Weights as plain (or tracked, under a recording) tensors.
    struct Bound {
        Tensor emb;
        struct L {
            Tensor wx, wh, b;
        };
        std::vector<L> layers;
        Tensor dec_w, dec_b;
    };

private:
    LstmConfig cfg_;
    Param emb_;
    std::vector<LayerWeights> layers_;
    Param dec_w_, dec_b_;
    std::vector<int> init_phrase_ids_;

    Bound bind() const;
};

// ---------------------------------------------------------------------------
// Transformer language model

enum class TransformerMode { Causal, Masked };

struct TransformerConfig {
    size_t vocab_size = 0;
    size_t model_dim = 64;
    size_t layers = 2;
    size_t heads = 4;
    size_t ffn_dim = 256;
    size_t max_len = 64;
    TransformerMode mode = TransformerMode::Causal;
};

class TransformerLm : public ModelInterface {
public:
    TransformerLm(TransformerConfig cfg, uint64_t seed);

    std::string type() const override { return "transformer"; }
    size_t vocab_size() const override { return cfg_.vocab_size; }
    size_t num_layers() const override { return cfg_.layers; }
    bool is_masked() const override { return cfg_.mode == TransformerMode::Masked; }
    std::vector<ActivationKey> activation_names() const override;
    ForwardResult forward(std::span<const int> tokens) const override;
    Trace trace(std::span<const int> tokens) const override;
    Tensor batch_loss(std::span<const std::vector<int>> seqs, Rng& rng) override;
    std::vector<Param*> parameters() override;
    void set_mask_rate(double rate) override { mask_rate_ = rate; }
    void save(const std::filesystem::path& base, const Vocab& vocab) const override;

    const TransformerConfig& config() const { return cfg_; }

    static std::unique_ptr<TransformerLm> load(const std::filesystem::path& base);

private:
    TransformerConfig cfg_;
    double mask_rate_ = 0.15;
    struct Block {
        Param wq, bq, wk, bk, wv, bv, wo, bo;
        Param ln1_g, ln1_b, ln2_g, ln2_b;
        Param w1, b1, w2, b2;
    };
    Param emb_, pos_;
    std::vector<Block> blocks_;
    Param lnf_g_, lnf_b_;
    Param dec_w_, dec_b_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainHyper {
    double lr = 0.5;
    size_t batch = 16;
    size_t epochs = 10;
    uint64_t seed = 0;
    double clip = 5.0;       // global-norm gradient clip
    double mask_rate = 0.15; // masked-mode token masking rate
};

struct TrainStats {
    std::vector<double> epoch_loss;
};

// Minimizes mean token-level cross-entropy (next-token for causal models,
// masked-position for masked mode). Deterministic given the seed. Appends
// ". <eos>" to each sentence so the initial-state phrase matches training.
TrainStats train_lm(ModelInterface& model, const Corpus& corpus, const Vocab& vocab,
                    const TrainHyper& hyper);
TrainStats train_lm(ModelInterface& model, std::span<const Corpus> corpora, const Vocab& vocab,
                    const TrainHyper& hyper);

// Loads either model type from <base>.json + <base>.nnlt, verifying the
// vocabulary hash recorded in the sidecar.
std::unique_ptr<ModelInterface> load_model(const std::filesystem::path& base, const Vocab& vocab);

} // namespace nnlens
