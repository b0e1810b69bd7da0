#include "nnlens/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "nnlens/errors.hpp"
#include "nnlens/serialize.hpp"

namespace nnlens {

using ordered_json = nlohmann::ordered_json;

ActivationKey ActivationKey::parse(const std::string& s) {
    auto dot = s.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 == s.size())
        throw ContractError("activation key must look like '<layer>.<name>', got '" + s + "'");
    ActivationKey k;
    try {
        k.layer = std::stoi(s.substr(0, dot));
    } catch (const std::exception&) {
        throw ContractError("activation key layer is not a number: '" + s + "'");
    }
    k.name = s.substr(dot + 1);
    return k;
}

namespace {

Tensor use(const Param& p) { return track(p.value); }

Tensor use_train(Param& p) {
    Tensor t = track(p.value);
    p.bound = t.node();
    return t;
}

void fill_uniform(Tensor& t, Rng& rng, double a) {
    for (size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-a, a);
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_sidecar(const std::filesystem::path& path, const ordered_json& j) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << j.dump(2) << "\n";
}

ordered_json read_sidecar(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    ordered_json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return j;
}

std::map<std::string, Tensor> tensor_map(const std::filesystem::path& path) {
    std::map<std::string, Tensor> m;
    for (auto& [name, t] : load_tensors(path)) m.emplace(std::move(name), std::move(t));
    return m;
}

const Tensor& named(const std::map<std::string, Tensor>& m, const std::string& name,
                    const std::filesystem::path& path) {
    auto it = m.find(name);
    if (it == m.end()) throw IoError(path.string() + ": missing tensor '" + name + "'");
    return it->second;
}

} // namespace

// ---------------------------------------------------------------------------
// LSTM

std::pair<LstmState, LstmGates> lstm_step(const Tensor& x, const Tensor& h, const Tensor& c,
                                          const Tensor& wx, const Tensor& wh, const Tensor& b) {
    if (wx.rank() != 2 || wh.rank() != 2 || wh.shape()[1] != wx.shape()[1] ||
        wh.shape()[1] != 4 * wh.shape()[0])
        throw ShapeError("lstm_step: weight shapes inconsistent, wx " + shape_str(wx.shape()) +
                         ", wh " + shape_str(wh.shape()));
    const size_t hd = wh.shape()[0];
    Tensor pre = add(add(matmul(x, wx), matmul(h, wh)), b);
    LstmGates gates;
    gates.i = sigmoid(slice_cols(pre, 0, hd));
    gates.f = sigmoid(slice_cols(pre, hd, hd));
    gates.g = tanh(slice_cols(pre, 2 * hd, hd));
    gates.o = sigmoid(slice_cols(pre, 3 * hd, hd));
    Tensor c_next = add(mul(gates.f, c), mul(gates.i, gates.g));
    Tensor h_next = mul(gates.o, tanh(c_next));
    LstmState st;
    st.h = {std::move(h_next)};
    st.c = {std::move(c_next)};
    return {std::move(st), std::move(gates)};
}

LstmLm::LstmLm(LstmConfig cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg_.vocab_size == 0) throw ContractError("LstmLm: vocab_size must be positive");
    Rng rng(seed);
    const size_t d = cfg_.embed_dim, h = cfg_.hidden_dim;
    emb_ = {"emb", Tensor({cfg_.vocab_size, d}), -1};
    fill_uniform(emb_.value, rng, 0.1);
    const double a = 1.0 / std::sqrt(static_cast<double>(h));
    for (size_t l = 0; l < cfg_.layers; ++l) {
        const size_t in = l == 0 ? d : h;
        LayerWeights lw;
        lw.wx = {"l" + std::to_string(l) + ".wx", Tensor({in, 4 * h}), -1};
        lw.wh = {"l" + std::to_string(l) + ".wh", Tensor({h, 4 * h}), -1};
        lw.b = {"l" + std::to_string(l) + ".b", Tensor({4 * h}), -1};
        fill_uniform(lw.wx.value, rng, a);
        fill_uniform(lw.wh.value, rng, a);
        // Forget-gate bias starts open (columns [h, 2h) in [i,f,g,o] order).
        for (size_t j = h; j < 2 * h; ++j) lw.b.value[j] = 1.0;
        layers_.push_back(std::move(lw));
    }
    dec_w_ = {"dec.w", Tensor({h, cfg_.vocab_size}), -1};
    dec_b_ = {"dec.b", Tensor({cfg_.vocab_size}), -1};
    fill_uniform(dec_w_.value, rng, a);
}

std::vector<ActivationKey> LstmLm::activation_names() const {
    std::vector<ActivationKey> keys;
    for (size_t l = 0; l < cfg_.layers; ++l)
        for (const char* n : {"hx", "cx", "ix", "fx", "ox", "gx"})
            keys.push_back({static_cast<int>(l), n});
    return keys;
}

LstmLm::Bound LstmLm::bind() const {
    Bound b;
    b.emb = use(emb_);
    for (const LayerWeights& lw : layers_) b.layers.push_back({use(lw.wx), use(lw.wh), use(lw.b)});
    b.dec_w = use(dec_w_);
    b.dec_b = use(dec_b_);
    return b;
}

namespace {

// Shared sequence runner used by forward/trace/batch_loss. Runs the stack
// over a batch column of token ids, updating `h`/`c` in place and returning
// the per-layer gates.
struct StepOut {
    std::vector<LstmGates> gates;
};

StepOut lstm_stack_step(const LstmLm::Bound& bw, const Tensor& x, std::vector<Tensor>& h,
                        std::vector<Tensor>& c) {
    StepOut out;
    Tensor input = x;
    for (size_t l = 0; l < bw.layers.size(); ++l) {
        auto [st, gates] = lstm_step(input, h[l], c[l], bw.layers[l].wx, bw.layers[l].wh,
                                     bw.layers[l].b);
        h[l] = st.h[0];
        c[l] = st.c[0];
        input = h[l];
        out.gates.push_back(std::move(gates));
    }
    return out;
}

void lstm_zero_states(size_t layers, size_t batch, size_t hidden, std::vector<Tensor>& h,
                      std::vector<Tensor>& c) {
    h.assign(layers, Tensor({batch, hidden}));
    c.assign(layers, Tensor({batch, hidden}));
}

// Runs the initial-state phrase at the requested batch width.
void lstm_phrase_states(const LstmLm::Bound& bw, std::span<const int> phrase, size_t layers,
                        size_t batch, size_t hidden, std::vector<Tensor>& h,
                        std::vector<Tensor>& c) {
    lstm_zero_states(layers, batch, hidden, h, c);
    for (int id : phrase) {
        std::vector<int> ids(batch, id);
        Tensor x = embed_rows(bw.emb, ids);
        lstm_stack_step(bw, x, h, c);
    }
}

} // namespace

LstmState LstmLm::init_states_from_phrase(std::span<const int> phrase) const {
    Bound bw = bind();
    LstmState st;
    lstm_phrase_states(bw, phrase, cfg_.layers, 1, cfg_.hidden_dim, st.h, st.c);
    return st;
}

ForwardResult LstmLm::forward(std::span<const int> tokens) const {
    if (tokens.empty()) throw ContractError("forward: empty token sequence");
    Bound bw = bind();
    const size_t T = tokens.size(), h = cfg_.hidden_dim, V = cfg_.vocab_size;
    std::vector<Tensor> hs, cs;
    lstm_phrase_states(bw, init_phrase_ids_, cfg_.layers, 1, h, hs, cs);

    ForwardResult out;
    out.logits = Tensor({T, V});
    std::map<std::string, Tensor> acts;
    for (const ActivationKey& k : activation_names()) acts.emplace(k.str(), Tensor({T, h}));

    for (size_t t = 0; t < T; ++t) {
        std::vector<int> ids{tokens[t]};
        Tensor x = embed_rows(bw.emb, ids);
        StepOut step = lstm_stack_step(bw, x, hs, cs);
        for (size_t l = 0; l < cfg_.layers; ++l) {
            const std::string p = std::to_string(l) + ".";
            auto put = [&](const std::string& name, const Tensor& v) {
                std::memcpy(acts.at(p + name).data() + t * h, v.data(), h * sizeof(double));
            };
            put("hx", hs[l]);
            put("cx", cs[l]);
            put("ix", step.gates[l].i);
            put("fx", step.gates[l].f);
            put("ox", step.gates[l].o);
            put("gx", step.gates[l].g);
        }
        Tensor logits_t = add(matmul(hs.back(), bw.dec_w), bw.dec_b);
        std::memcpy(out.logits.data() + t * V, logits_t.data(), V * sizeof(double));
    }
    out.activations = std::move(acts);
    return out;
}

Trace LstmLm::trace(std::span<const int> tokens) const {
    if (tokens.empty()) throw ContractError("trace: empty token sequence");
    Trace tr;
    tr.graph = std::make_shared<Graph>();
    Recording rec(*tr.graph);
    Bound bw = bind();
    std::vector<Tensor> hs, cs;
    lstm_phrase_states(bw, init_phrase_ids_, cfg_.layers, 1, cfg_.hidden_dim, hs, cs);
    for (int tok : tokens) {
        std::vector<int> ids{tok};
        Tensor x = embed_rows(bw.emb, ids);
        tr.input_rows.emplace_back(x.node(), 0);
        lstm_stack_step(bw, x, hs, cs);
    }
    Tensor logits = add(matmul(hs.back(), bw.dec_w), bw.dec_b);
    tr.logits_node = logits.node();
    tr.readout_row = 0;
    return tr;
}

Tensor LstmLm::batch_loss(std::span<const std::vector<int>> seqs, Rng&) {
    if (seqs.empty()) throw ContractError("batch_loss: empty batch");
    const size_t L = seqs[0].size();
    for (const auto& s : seqs)
        if (s.size() != L) throw ContractError("batch_loss: sequences must share one length");
    if (L < 2) throw ContractError("batch_loss: sequences must have at least 2 tokens");

    Bound bw;
    bw.emb = use_train(emb_);
    for (LayerWeights& lw : layers_)
        bw.layers.push_back({use_train(lw.wx), use_train(lw.wh), use_train(lw.b)});
    bw.dec_w = use_train(dec_w_);
    bw.dec_b = use_train(dec_b_);

    const size_t B = seqs.size();
    std::vector<Tensor> hs, cs;
    lstm_phrase_states(bw, init_phrase_ids_, cfg_.layers, B, cfg_.hidden_dim, hs, cs);

    Tensor loss;
    for (size_t t = 0; t + 1 < L; ++t) {
        std::vector<int> ids(B), targets(B);
        for (size_t s = 0; s < B; ++s) {
            ids[s] = seqs[s][t];
            targets[s] = seqs[s][t + 1];
        }
        Tensor x = embed_rows(bw.emb, ids);
        lstm_stack_step(bw, x, hs, cs);
        Tensor logits = add(matmul(hs.back(), bw.dec_w), bw.dec_b);
        Tensor ce = cross_entropy(logits, targets);
        loss = t == 0 ? ce : add(loss, ce);
    }
    return scale(loss, 1.0 / static_cast<double>(L - 1));
}

std::vector<Param*> LstmLm::parameters() {
    std::vector<Param*> ps{&emb_};
    for (LayerWeights& lw : layers_) {
        ps.push_back(&lw.wx);
        ps.push_back(&lw.wh);
        ps.push_back(&lw.b);
    }
    ps.push_back(&dec_w_);
    ps.push_back(&dec_b_);
    return ps;
}

void LstmLm::save(const std::filesystem::path& base, const Vocab& vocab) const {
    std::vector<std::pair<std::string, Tensor>> entries;
    entries.emplace_back(emb_.name, emb_.value);
    for (const LayerWeights& lw : layers_) {
        entries.emplace_back(lw.wx.name, lw.wx.value);
        entries.emplace_back(lw.wh.name, lw.wh.value);
        entries.emplace_back(lw.b.name, lw.b.value);
    }
    entries.emplace_back(dec_w_.name, dec_w_.value);
    entries.emplace_back(dec_b_.name, dec_b_.value);
    std::filesystem::path weights = base;
    weights += ".nnlt";
    save_tensors(weights, entries);

    ordered_json j;
    j["model_type"] = "lstm";
    j["dims"] = {{"vocab", cfg_.vocab_size},
                 {"embed", cfg_.embed_dim},
                 {"hidden", cfg_.hidden_dim},
                 {"layers", cfg_.layers}};
    j["vocab_hash"] = hash_hex(vocab.hash());
    j["gate_order"] = "ifgo";
    j["mode"] = "causal";
    j["init_phrase"] = cfg_.init_phrase;
    std::filesystem::path sidecar = base;
    sidecar += ".json";
    write_sidecar(sidecar, j);
}

std::unique_ptr<LstmLm> LstmLm::load(const std::filesystem::path& base) {
    std::filesystem::path sidecar = base;
    sidecar += ".json";
    ordered_json j = read_sidecar(sidecar);
    if (j.at("model_type").get<std::string>() != "lstm")
        throw IoError(sidecar.string() + ": not an lstm checkpoint");
    if (j.at("gate_order").get<std::string>() != "ifgo")
        throw IoError(sidecar.string() + ": unsupported gate order");
    LstmConfig cfg;
    cfg.vocab_size = j.at("dims").at("vocab").get<size_t>();
    cfg.embed_dim = j.at("dims").at("embed").get<size_t>();
    cfg.hidden_dim = j.at("dims").at("hidden").get<size_t>();
    cfg.layers = j.at("dims").at("layers").get<size_t>();
    cfg.init_phrase = j.at("init_phrase").get<std::string>();

    auto model = std::make_unique<LstmLm>(cfg, 0);
    std::filesystem::path weights = base;
    weights += ".nnlt";
    auto m = tensor_map(weights);
    for (Param* p : model->parameters()) {
        const Tensor& t = named(m, p->name, weights);
        if (t.shape() != p->value.shape())
            throw IoError(weights.string() + ": tensor '" + p->name + "' has shape " +
                          shape_str(t.shape()) + ", expected " + shape_str(p->value.shape()));
        p->value = t;
    }
    return model;
}

// ---------------------------------------------------------------------------
// Transformer

TransformerLm::TransformerLm(TransformerConfig cfg, uint64_t seed) : cfg_(cfg) {
    if (cfg_.vocab_size == 0) throw ContractError("TransformerLm: vocab_size must be positive");
    if (cfg_.model_dim % cfg_.heads != 0)
        throw ContractError("TransformerLm: model_dim must be divisible by heads");
    Rng rng(seed);
    const size_t d = cfg_.model_dim;
    auto make = [&](const std::string& name, std::vector<size_t> shape, double a) {
        Param p{name, Tensor(std::move(shape)), -1};
        if (a > 0.0) fill_uniform(p.value, rng, a);
        return p;
    };
    auto xavier = [](size_t in, size_t out) {
        return std::sqrt(6.0 / static_cast<double>(in + out));
    };
    emb_ = make("emb", {cfg_.vocab_size, d}, 0.1);
    pos_ = make("pos", {cfg_.max_len, d}, 0.02);
    for (size_t l = 0; l < cfg_.layers; ++l) {
        const std::string p = "b" + std::to_string(l) + ".";
        Block blk;
        blk.wq = make(p + "wq", {d, d}, xavier(d, d));
        blk.bq = make(p + "bq", {d}, 0.0);
        blk.wk = make(p + "wk", {d, d}, xavier(d, d));
        blk.bk = make(p + "bk", {d}, 0.0);
        blk.wv = make(p + "wv", {d, d}, xavier(d, d));
        blk.bv = make(p + "bv", {d}, 0.0);
        blk.wo = make(p + "wo", {d, d}, xavier(d, d));
        blk.bo = make(p + "bo", {d}, 0.0);
        blk.ln1_g = {p + "ln1.g", Tensor::full({d}, 1.0), -1};
        blk.ln1_b = make(p + "ln1.b", {d}, 0.0);
        blk.ln2_g = {p + "ln2.g", Tensor::full({d}, 1.0), -1};
        blk.ln2_b = make(p + "ln2.b", {d}, 0.0);
        blk.w1 = make(p + "ffn.w1", {d, cfg_.ffn_dim}, xavier(d, cfg_.ffn_dim));
        blk.b1 = make(p + "ffn.b1", {cfg_.ffn_dim}, 0.0);
        blk.w2 = make(p + "ffn.w2", {cfg_.ffn_dim, d}, xavier(cfg_.ffn_dim, d));
        blk.b2 = make(p + "ffn.b2", {d}, 0.0);
        blocks_.push_back(std::move(blk));
    }
    lnf_g_ = {"lnf.g", Tensor::full({d}, 1.0), -1};
    lnf_b_ = make("lnf.b", {d}, 0.0);
    dec_w_ = make("dec.w", {d, cfg_.vocab_size}, xavier(d, cfg_.vocab_size));
    dec_b_ = make("dec.b", {cfg_.vocab_size}, 0.0);
}

std::vector<ActivationKey> TransformerLm::activation_names() const {
    std::vector<ActivationKey> keys;
    for (size_t l = 0; l < cfg_.layers; ++l) keys.push_back({static_cast<int>(l), "hidden"});
    return keys;
}

namespace {

struct TfBound {
    Tensor emb, pos;
    struct B {
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln1_g, ln1_b, ln2_g, ln2_b;
        Tensor w1, b1, w2, b2;
    };
    std::vector<B> blocks;
    Tensor lnf_g, lnf_b, dec_w, dec_b;
};

Tensor causal_mask(size_t t) {
    Tensor m({t, t});
    for (size_t i = 0; i < t; ++i)
        for (size_t j = i + 1; j < t; ++j) m[i * t + j] = -1e9;
    return m;
}

struct TfRun {
    Tensor logits;                // [T x V]
    std::vector<Tensor> hidden;   // per block output, [T x d]
    int64_t input_node = -1;      // token-embedding node (recording only)
    int64_t logits_node = -1;
};

TfRun tf_run(const TfBound& bw, const TransformerConfig& cfg, std::span<const int> tokens,
             bool want_hidden) {
    const size_t T = tokens.size();
    if (T == 0) throw ContractError("forward: empty token sequence");
    if (T > cfg.max_len)
        throw ContractError("sequence length " + std::to_string(T) + " exceeds max_len " +
                            std::to_string(cfg.max_len));
    const size_t heads = cfg.heads, dh = cfg.model_dim / cfg.heads;

    Tensor tok = embed_rows(bw.emb, tokens);
    std::vector<int> positions(T);
    for (size_t i = 0; i < T; ++i) positions[i] = static_cast<int>(i);
    Tensor x = add(tok, embed_rows(bw.pos, positions));

    TfRun run;
    run.input_node = tok.node();
    const bool causal = cfg.mode == TransformerMode::Causal;
    Tensor mask = causal && T > 1 ? causal_mask(T) : Tensor();

    for (const TfBound::B& blk : bw.blocks) {
        Tensor xn = layer_norm(x, blk.ln1_g, blk.ln1_b);
        Tensor q = add(matmul(xn, blk.wq), blk.bq);
        Tensor k = add(matmul(xn, blk.wk), blk.bk);
        Tensor v = add(matmul(xn, blk.wv), blk.bv);
        std::vector<Tensor> ctx;
        for (size_t h = 0; h < heads; ++h) {
            Tensor qh = slice_cols(q, h * dh, dh);
            Tensor kh = slice_cols(k, h * dh, dh);
            Tensor vh = slice_cols(v, h * dh, dh);
            Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(double(dh)));
            if (causal && T > 1) scores = add(scores, mask);
            Tensor attn = softmax(scores, -1);
            ctx.push_back(matmul(attn, vh));
        }
        Tensor merged = concat_cols(ctx);
        x = add(x, add(matmul(merged, blk.wo), blk.bo));
        Tensor xn2 = layer_norm(x, blk.ln2_g, blk.ln2_b);
        Tensor ff = add(matmul(relu(add(matmul(xn2, blk.w1), blk.b1)), blk.w2), blk.b2);
        x = add(x, ff);
        if (want_hidden) run.hidden.push_back(x);
    }
    Tensor final = layer_norm(x, bw.lnf_g, bw.lnf_b);
    Tensor logits = add(matmul(final, bw.dec_w), bw.dec_b);
    run.logits_node = logits.node();
    run.logits = std::move(logits);
    return run;
}

} // namespace

ForwardResult TransformerLm::forward(std::span<const int> tokens) const {
    TfBound bw;
    bw.emb = use(emb_);
    bw.pos = use(pos_);
    for (const Block& b : blocks_)
        bw.blocks.push_back({use(b.wq), use(b.bq), use(b.wk), use(b.bk), use(b.wv), use(b.bv),
                             use(b.wo), use(b.bo), use(b.ln1_g), use(b.ln1_b), use(b.ln2_g),
                             use(b.ln2_b), use(b.w1), use(b.b1), use(b.w2), use(b.b2)});
    bw.lnf_g = use(lnf_g_);
    bw.lnf_b = use(lnf_b_);
    bw.dec_w = use(dec_w_);
    bw.dec_b = use(dec_b_);

    TfRun run = tf_run(bw, cfg_, tokens, true);
    ForwardResult out;
    out.logits = std::move(run.logits);
    for (size_t l = 0; l < run.hidden.size(); ++l)
        out.activations.emplace(std::to_string(l) + ".hidden", std::move(run.hidden[l]));
    return out;
}

Trace TransformerLm::trace(std::span<const int> tokens) const {
    Trace tr;
    tr.graph = std::make_shared<Graph>();
    Recording rec(*tr.graph);

    TfBound bw;
    bw.emb = use(emb_);
    bw.pos = use(pos_);
    for (const Block& b : blocks_)
        bw.blocks.push_back({use(b.wq), use(b.bq), use(b.wk), use(b.bk), use(b.wv), use(b.bv),
                             use(b.wo), use(b.bo), use(b.ln1_g), use(b.ln1_b), use(b.ln2_g),
                             use(b.ln2_b), use(b.w1), use(b.b1), use(b.w2), use(b.b2)});
    bw.lnf_g = use(lnf_g_);
    bw.lnf_b = use(lnf_b_);
    bw.dec_w = use(dec_w_);
    bw.dec_b = use(dec_b_);

    TfRun run = tf_run(bw, cfg_, tokens, false);
    tr.logits_node = run.logits_node;
    for (size_t t = 0; t < tokens.size(); ++t) tr.input_rows.emplace_back(run.input_node, t);

    if (is_masked()) {
        size_t mask_pos = tokens.size();
        for (size_t t = 0; t < tokens.size(); ++t)
            if (tokens[t] == Vocab::kMask) {
                mask_pos = t;
                break;
            }
        if (mask_pos == tokens.size())
            throw ContractError("masked-model trace requires a <mask> token in the input");
        tr.readout_row = mask_pos;
    } else {
        tr.readout_row = tokens.size() - 1;
    }
    return tr;
}

Tensor TransformerLm::batch_loss(std::span<const std::vector<int>> seqs, Rng& rng) {
    if (seqs.empty()) throw ContractError("batch_loss: empty batch");

    TfBound bw;
    bw.emb = use_train(emb_);
    bw.pos = use_train(pos_);
    for (Block& b : blocks_)
        bw.blocks.push_back({use_train(b.wq), use_train(b.bq), use_train(b.wk), use_train(b.bk),
                             use_train(b.wv), use_train(b.bv), use_train(b.wo), use_train(b.bo),
                             use_train(b.ln1_g), use_train(b.ln1_b), use_train(b.ln2_g),
                             use_train(b.ln2_b), use_train(b.w1), use_train(b.b1),
                             use_train(b.w2), use_train(b.b2)});
    bw.lnf_g = use_train(lnf_g_);
    bw.lnf_b = use_train(lnf_b_);
    bw.dec_w = use_train(dec_w_);
    bw.dec_b = use_train(dec_b_);

    Tensor total;
    for (size_t s = 0; s < seqs.size(); ++s) {
        const std::vector<int>& seq = seqs[s];
        if (seq.size() < 2) throw ContractError("batch_loss: sequences must have >= 2 tokens");
        std::vector<int> ids = seq;
        std::vector<int> targets(seq.size(), -1);
        if (cfg_.mode == TransformerMode::Masked) {
            size_t masked = 0;
            for (size_t t = 0; t < seq.size(); ++t) {
                if (rng.uniform() < mask_rate_) {
                    targets[t] = ids[t];
                    ids[t] = Vocab::kMask;
                    ++masked;
                }
            }
            if (masked == 0) {
                size_t t = static_cast<size_t>(rng.below(seq.size()));
                targets[t] = ids[t];
                ids[t] = Vocab::kMask;
            }
        } else {
            for (size_t t = 0; t + 1 < seq.size(); ++t) targets[t] = seq[t + 1];
        }
        TfRun run = tf_run(bw, cfg_, ids, false);
        Tensor ce = cross_entropy(run.logits, targets);
        total = s == 0 ? ce : add(total, ce);
    }
    return scale(total, 1.0 / static_cast<double>(seqs.size()));
}

std::vector<Param*> TransformerLm::parameters() {
    std::vector<Param*> ps{&emb_, &pos_};
    for (Block& b : blocks_)
        for (Param* p : {&b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo, &b.ln1_g,
                         &b.ln1_b, &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2})
            ps.push_back(p);
    ps.push_back(&lnf_g_);
    ps.push_back(&lnf_b_);
    ps.push_back(&dec_w_);
    ps.push_back(&dec_b_);
    return ps;
}

void TransformerLm::save(const std::filesystem::path& base, const Vocab& vocab) const {
    std::vector<std::pair<std::string, Tensor>> entries;
    for (const Param* p : const_cast<TransformerLm*>(this)->parameters())
        entries.emplace_back(p->name, p->value);
    std::filesystem::path weights = base;
    weights += ".nnlt";
    save_tensors(weights, entries);

    ordered_json j;
    j["model_type"] = "transformer";
    j["dims"] = {{"vocab", cfg_.vocab_size}, {"model_dim", cfg_.model_dim},
                 {"layers", cfg_.layers},    {"heads", cfg_.heads},
                 {"ffn", cfg_.ffn_dim},      {"max_len", cfg_.max_len}};
    j["vocab_hash"] = hash_hex(vocab.hash());
    j["mode"] = cfg_.mode == TransformerMode::Masked ? "masked" : "causal";
    std::filesystem::path sidecar = base;
    sidecar += ".json";
    write_sidecar(sidecar, j);
}

std::unique_ptr<TransformerLm> TransformerLm::load(const std::filesystem::path& base) {
    std::filesystem::path sidecar = base;
    sidecar += ".json";
    ordered_json j = read_sidecar(sidecar);
    if (j.at("model_type").get<std::string>() != "transformer")
        throw IoError(sidecar.string() + ": not a transformer checkpoint");
    TransformerConfig cfg;
    cfg.vocab_size = j.at("dims").at("vocab").get<size_t>();
    cfg.model_dim = j.at("dims").at("model_dim").get<size_t>();
    cfg.layers = j.at("dims").at("layers").get<size_t>();
    cfg.heads = j.at("dims").at("heads").get<size_t>();
    cfg.ffn_dim = j.at("dims").at("ffn").get<size_t>();
    cfg.max_len = j.at("dims").at("max_len").get<size_t>();
    cfg.mode = j.at("mode").get<std::string>() == "masked" ? TransformerMode::Masked
                                                           : TransformerMode::Causal;
    auto model = std::make_unique<TransformerLm>(cfg, 0);
    std::filesystem::path weights = base;
    weights += ".nnlt";
    auto m = tensor_map(weights);
    for (Param* p : model->parameters()) {
        const Tensor& t = named(m, p->name, weights);
        if (t.shape() != p->value.shape())
            throw IoError(weights.string() + ": tensor '" + p->name + "' has shape " +
                          shape_str(t.shape()) + ", expected " + shape_str(p->value.shape()));
        p->value = t;
    }
    return model;
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<std::vector<int>> training_sequences(std::span<const Corpus> corpora,
                                                 const Vocab& vocab) {
    std::vector<std::vector<int>> seqs;
    const int dot = vocab.id(".");
    for (const Corpus& c : corpora) {
        for (const Sentence& s : c.sentences) {
            std::vector<int> seq = s.tokens;
            if (dot >= 0) seq.push_back(dot);
            seq.push_back(Vocab::kEos);
            seqs.push_back(std::move(seq));
        }
    }
    return seqs;
}

} // namespace

TrainStats train_lm(ModelInterface& model, const Corpus& corpus, const Vocab& vocab,
                    const TrainHyper& hyper) {
    return train_lm(model, std::span<const Corpus>(&corpus, 1), vocab, hyper);
}

TrainStats train_lm(ModelInterface& model, std::span<const Corpus> corpora, const Vocab& vocab,
                    const TrainHyper& hyper) {
    std::vector<std::vector<int>> seqs = training_sequences(corpora, vocab);
    if (seqs.empty()) throw ContractError("train_lm: empty corpus");
    for (const auto& s : seqs)
        for (int id : s)
            if (id < 0 || static_cast<size_t>(id) >= model.vocab_size())
                throw VocabError("train_lm: token id " + std::to_string(id) +
                                 " outside the model vocabulary");

    // Same-length buckets keep batches rectangular without padding.
    std::map<size_t, std::vector<size_t>> buckets;
    for (size_t i = 0; i < seqs.size(); ++i) buckets[seqs[i].size()].push_back(i);

    Rng order_rng(hyper.seed);
    Rng mask_rng(hyper.seed ^ 0x6d61736b726e67ULL);
    model.set_mask_rate(hyper.mask_rate);
    const size_t batch = std::max<size_t>(1, hyper.batch);

    TrainStats stats;
    std::vector<Param*> params = model.parameters();
    for (size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        std::vector<std::vector<size_t>> batches;
        for (auto& [len, idx] : buckets) {
            order_rng.shuffle(idx);
            for (size_t i = 0; i < idx.size(); i += batch) {
                std::vector<size_t> b(idx.begin() + static_cast<long>(i),
                                      idx.begin() + static_cast<long>(std::min(i + batch, idx.size())));
                batches.push_back(std::move(b));
            }
        }
        order_rng.shuffle(batches);

        double loss_sum = 0.0;
        size_t n_seq = 0;
        for (const std::vector<size_t>& b : batches) {
            std::vector<std::vector<int>> bs;
            bs.reserve(b.size());
            for (size_t i : b) bs.push_back(seqs[i]);

            Graph g;
            Tensor loss;
            {
                Recording rec(g);
                loss = model.batch_loss(bs, mask_rng);
            }
            g.backward(loss);

            // Global-norm clip, then plain SGD.
            double norm_sq = 0.0;
            for (Param* p : params) {
                if (p->bound < 0 || !g.has_grad(p->bound)) continue;
                const Tensor& grad = g.grad(p->bound);
                for (size_t i = 0; i < grad.size(); ++i) norm_sq += grad[i] * grad[i];
            }
            double scale_f = 1.0;
            if (hyper.clip > 0.0) {
                double norm = std::sqrt(norm_sq);
                if (norm > hyper.clip) scale_f = hyper.clip / norm;
            }
            for (Param* p : params) {
                if (p->bound < 0 || !g.has_grad(p->bound)) continue;
                const Tensor& grad = g.grad(p->bound);
                const double step = hyper.lr * scale_f;
                for (size_t i = 0; i < grad.size(); ++i) p->value[i] -= step * grad[i];
                p->bound = -1;
            }
            loss_sum += loss.item() * static_cast<double>(b.size());
            n_seq += b.size();
        }
        stats.epoch_loss.push_back(loss_sum / static_cast<double>(n_seq));
    }
    return stats;
}

std::unique_ptr<ModelInterface> load_model(const std::filesystem::path& base, const Vocab& vocab) {
    std::filesystem::path sidecar = base;
    sidecar += ".json";
    ordered_json j = read_sidecar(sidecar);
    const std::string type = j.at("model_type").get<std::string>();
    const std::string stored_hash = j.at("vocab_hash").get<std::string>();
    if (stored_hash != hash_hex(vocab.hash()))
        throw ContractError(sidecar.string() + ": checkpoint was built for a different vocabulary (hash " +
                            stored_hash + " vs " + hash_hex(vocab.hash()) + ")");
    if (type == "lstm") {
        auto m = LstmLm::load(base);
        m->set_init_phrase_ids(tokenize(vocab, m->config().init_phrase));
        return m;
    }
    if (type == "transformer") return TransformerLm::load(base);
    throw IoError(sidecar.string() + ": unknown model_type '" + type + "'");
}

} // namespace nnlens
