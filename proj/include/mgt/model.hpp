#pragma once

// Block variants and the full model: gated-residual blocks built from an
// attention or FFN sublayer, the standard Post-LN baseline block, trace
// capture, parameter init, and checkpoint I/O.

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mgt/errors.hpp"
#include "mgt/rng.hpp"
#include "mgt/tensor.hpp"

namespace mgt {

enum class Variant { standard, mhc_only, ddl_only, mgt_full };

inline const char* variant_name(Variant v) {
    switch (v) {
        case Variant::standard: return "standard";
        case Variant::mhc_only: return "mhc_only";
        case Variant::ddl_only: return "ddl_only";
        case Variant::mgt_full: return "mgt_full";
    }
    return "?";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "standard") return Variant::standard;
    if (s == "mhc_only") return Variant::mhc_only;
    if (s == "ddl_only") return Variant::ddl_only;
    if (s == "mgt_full") return Variant::mgt_full;
    throw ParseError("unknown variant '" + s + "' (expected standard|mhc_only|ddl_only|mgt_full)");
}

inline bool variant_has_mhc(Variant v) { return v == Variant::mhc_only || v == Variant::mgt_full; }
inline bool variant_has_ddl(Variant v) { return v == Variant::ddl_only || v == Variant::mgt_full; }

struct ModelConfig {
    size_t depth = 4;      // attention+FFN pairs; 0 = embedding + head only
    size_t width = 64;     // D
    size_t heads = 4;
    size_t ffn_mult = 4;
    size_t vocab = 16;
    size_t seq_len = 17;
    Variant variant = Variant::mgt_full;
    double lambda = 1.0;
    double epsilon = 0.0;
    double alpha_init = 0.0;
    uint64_t seed = 1;

    void validate() const {
        if (width < 2) throw InvalidConfigError("model.width must be >= 2");
        if (heads < 1) throw InvalidConfigError("model.heads must be >= 1");
        if (width % heads != 0) throw InvalidConfigError("model.width must be divisible by model.heads");
        if (ffn_mult < 1) throw InvalidConfigError("model.ffn_mult must be >= 1");
        if (vocab < 2) throw InvalidConfigError("model.vocab must be >= 2");
        if (seq_len < 1) throw InvalidConfigError("model.seq_len must be >= 1");
        if (lambda <= 0.0) throw InvalidConfigError("model.lambda must be positive");
        if (!std::isfinite(lambda) || !std::isfinite(epsilon) || !std::isfinite(alpha_init))
            throw InvalidConfigError("model.lambda/epsilon/alpha_init must be finite");
    }
};

enum class SublayerKind { attention, ffn };

// Per-block learnable state. Tensors not used by the active variant stay
// empty (size 0) and are skipped by the parameter walk.
struct BlockParams {
    SublayerKind kind = SublayerKind::attention;
    Tensor ln_gain, ln_bias;  // pre-LN for gated variants, post-LN for standard
    // attention
    Tensor w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    // ffn
    Tensor w1, b1, w2, b2;
    // mHC gate
    Tensor w_gate, gate_ln_gain, gate_ln_bias;
    // DDL controller
    Tensor w_beta, b_beta, alpha;
};

struct ModelParams {
    ModelConfig config;
    Tensor tok_embed;  // V x D; also the tied output head
    Tensor pos_embed;  // S x D
    std::vector<BlockParams> blocks;  // 2*depth blocks, attn/ffn alternating
    Tensor final_ln_gain, final_ln_bias;
};

// Post-update state snapshots for the metrics pipeline, detached from any
// tape. beta/gate are empty for variants without the corresponding gate.
struct LayerTrace {
    size_t layer_index = 0;  // 1-based block index; 0 names the embedding state
    Tensor hidden;           // S x D
    Tensor beta;
    Tensor gate;
};

struct ModelTrace {
    Tensor embedding_state;  // post-embedding, pre-block
    std::vector<LayerTrace> layers;
};

namespace detail {
inline Tensor detach(const Tensor& t) { return Tensor(t.shape(), std::vector<double>(t.vec())); }
}

// ---------------------------------------------------------------------------
// Parameter walk, init, counting
// ---------------------------------------------------------------------------

// Visits every existing parameter in a fixed order with its checkpoint name.
// The name schema is stable: embed.token, embed.pos, block{i}.{attn|ffn}.*,
// final_ln.{gain|bias} (i indexes attention+FFN pairs).
template <class Params, class Fn>
void for_each_param(Params& p, Fn fn) {
    auto visit = [&](const std::string& name, auto& t) {
        if (t.size() > 0) fn(name, t);
    };
    visit("embed.token", p.tok_embed);
    visit("embed.pos", p.pos_embed);
    for (size_t b = 0; b < p.blocks.size(); ++b) {
        auto& bp = p.blocks[b];
        std::string prefix = "block" + std::to_string(b / 2) + (bp.kind == SublayerKind::attention ? ".attn." : ".ffn.");
        visit(prefix + "ln_gain", bp.ln_gain);
        visit(prefix + "ln_bias", bp.ln_bias);
        visit(prefix + "w_q", bp.w_q);
        visit(prefix + "b_q", bp.b_q);
        visit(prefix + "w_k", bp.w_k);
        visit(prefix + "b_k", bp.b_k);
        visit(prefix + "w_v", bp.w_v);
        visit(prefix + "b_v", bp.b_v);
        visit(prefix + "w_o", bp.w_o);
        visit(prefix + "b_o", bp.b_o);
        visit(prefix + "w1", bp.w1);
        visit(prefix + "b1", bp.b1);
        visit(prefix + "w2", bp.w2);
        visit(prefix + "b2", bp.b2);
        visit(prefix + "w_gate", bp.w_gate);
        visit(prefix + "gate_ln_gain", bp.gate_ln_gain);
        visit(prefix + "gate_ln_bias", bp.gate_ln_bias);
        visit(prefix + "w_beta", bp.w_beta);
        visit(prefix + "b_beta", bp.b_beta);
        visit(prefix + "alpha", bp.alpha);
    }
    visit("final_ln.gain", p.final_ln_gain);
    visit("final_ln.bias", p.final_ln_bias);
}

// Gaussian fill seeded from (model seed, parameter name): every tensor's init
// is independent of which other tensors exist, so models of different depth
// or variant share identical embeddings and sublayer weights at equal seed.
inline Tensor gaussian_init(std::vector<size_t> shape, uint64_t seed, const std::string& name, double stddev) {
    Rng rng(mix_seed(seed, fnv1a(name.data(), name.size())));
    size_t n = Tensor::numel_of(shape);
    std::vector<double> d(n);
    for (double& v : d) v = rng.normal(0.0, stddev);
    return Tensor(std::move(shape), std::move(d));
}

// Initialization scheme: N(0, 0.02^2) for embeddings, all projection weights
// and the mHC gate weight; zeros for every bias and for the DDL controller
// (W_beta, b_beta, alpha). With epsilon = 0 the beta gate is identically zero
// at init, so ddl_only/mgt_full stacks start as exact identity maps while the
// controller still receives a nonzero gradient from the live sublayer output.
// Zero-initializing the output projections instead would freeze DDL blocks
// permanently: beta and V would both start at zero and each one's gradient is
// gated by the other.
inline ModelParams init_params(const ModelConfig& cfg) {
    cfg.validate();
    constexpr double kInitStd = 0.02;
    size_t D = cfg.width, H = cfg.ffn_mult * cfg.width;
    ModelParams p;
    p.config = cfg;
    p.tok_embed = gaussian_init({cfg.vocab, D}, cfg.seed, "embed.token", kInitStd);
    p.pos_embed = gaussian_init({cfg.seq_len, D}, cfg.seed, "embed.pos", kInitStd);

    bool mhc = variant_has_mhc(cfg.variant);
    bool ddl = variant_has_ddl(cfg.variant);
    for (size_t i = 0; i < cfg.depth; ++i) {
        for (SublayerKind kind : {SublayerKind::attention, SublayerKind::ffn}) {
            BlockParams bp;
            bp.kind = kind;
            std::string prefix = "block" + std::to_string(i) + (kind == SublayerKind::attention ? ".attn." : ".ffn.");
            bp.ln_gain = Tensor::ones({D});
            bp.ln_bias = Tensor::zeros({D});
            if (kind == SublayerKind::attention) {
                bp.w_q = gaussian_init({D, D}, cfg.seed, prefix + "w_q", kInitStd);
                bp.w_k = gaussian_init({D, D}, cfg.seed, prefix + "w_k", kInitStd);
                bp.w_v = gaussian_init({D, D}, cfg.seed, prefix + "w_v", kInitStd);
                bp.w_o = gaussian_init({D, D}, cfg.seed, prefix + "w_o", kInitStd);
                bp.b_q = Tensor::zeros({D});
                bp.b_k = Tensor::zeros({D});
                bp.b_v = Tensor::zeros({D});
                bp.b_o = Tensor::zeros({D});
            } else {
                bp.w1 = gaussian_init({D, H}, cfg.seed, prefix + "w1", kInitStd);
                bp.b1 = Tensor::zeros({H});
                bp.w2 = gaussian_init({H, D}, cfg.seed, prefix + "w2", kInitStd);
                bp.b2 = Tensor::zeros({D});
            }
            if (mhc) {
                bp.w_gate = gaussian_init({D, D}, cfg.seed, prefix + "w_gate", kInitStd);
                bp.gate_ln_gain = Tensor::ones({D});
                bp.gate_ln_bias = Tensor::zeros({D});
            }
            if (ddl) {
                bp.w_beta = Tensor::zeros({D, D});
                bp.b_beta = Tensor::zeros({D});
                bp.alpha = Tensor::scalar(cfg.alpha_init);
            }
            p.blocks.push_back(std::move(bp));
        }
    }
    p.final_ln_gain = Tensor::ones({D});
    p.final_ln_bias = Tensor::zeros({D});
    return p;
}

// Learnable-parameter count in closed form (tied output head adds nothing).
inline size_t param_count(const ModelConfig& cfg) {
    size_t D = cfg.width, H = cfg.ffn_mult * cfg.width;
    size_t per_block_extra = 0;
    if (variant_has_mhc(cfg.variant)) per_block_extra += D * D + 2 * D;
    if (variant_has_ddl(cfg.variant)) per_block_extra += D * D + D + 1;
    size_t attn = 2 * D + 4 * D * D + 4 * D + per_block_extra;
    size_t ffn = 2 * D + D * H + H + H * D + D + per_block_extra;
    return cfg.vocab * D + cfg.seq_len * D + cfg.depth * (attn + ffn) + 2 * D;
}

// Re-registers every parameter as a leaf on the given tape; the returned
// structure shares storage with the input.
inline ModelParams bind_to_tape(const ModelParams& params, GradTape& tape) {
    ModelParams bound = params;
    for_each_param(bound, [&](const std::string&, Tensor& t) { t = tape.leaf(t); });
    return bound;
}

// ---------------------------------------------------------------------------
// Sublayers
// ---------------------------------------------------------------------------

// Multi-head causal self-attention with 1/sqrt(head_dim) scaling and output
// projection. If probs_out is given, per-head attention matrices are captured
// (detached) for inspection.
inline Tensor attention_sublayer(const Tensor& x, const BlockParams& bp, size_t heads,
                                 std::vector<Tensor>* probs_out = nullptr) {
    size_t D = x.shape()[1];
    if (D % heads != 0) throw DimensionError("attention_sublayer: width not divisible by head count");
    size_t dh = D / heads;
    Tensor q = add(matmul(x, bp.w_q), bp.b_q);
    Tensor k = add(matmul(x, bp.w_k), bp.b_k);
    Tensor v = add(matmul(x, bp.w_v), bp.b_v);
    std::vector<Tensor> ctx;
    ctx.reserve(heads);
    for (size_t h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor probs = causal_softmax(scale(matmul_nt(qh, kh), 1.0 / std::sqrt(double(dh))));
        if (probs_out) probs_out->push_back(detail::detach(probs));
        ctx.push_back(matmul(probs, vh));
    }
    return add(matmul(concat_cols(ctx), bp.w_o), bp.b_o);
}

inline Tensor ffn_sublayer(const Tensor& x, const BlockParams& bp) {
    return add(matmul(gelu(add(matmul(x, bp.w1), bp.b1)), bp.w2), bp.b2);
}

inline Tensor run_sublayer(const Tensor& x, const BlockParams& bp, const ModelConfig& cfg) {
    return bp.kind == SublayerKind::attention ? attention_sublayer(x, bp, cfg.heads) : ffn_sublayer(x, bp);
}

// ---------------------------------------------------------------------------
// Gates and update rule
// ---------------------------------------------------------------------------

// sigma(LN(X * W_gate)); values strictly inside (0, 1).
inline Tensor mhc_gate(const Tensor& x, const BlockParams& bp) {
    return sigmoid(layer_norm(matmul(x, bp.w_gate), bp.gate_ln_gain, bp.gate_ln_bias));
}

// V_raw rectified by the soft subspace gate.
inline Tensor mhc_project(const Tensor& v_raw, const Tensor& x, const BlockParams& bp) {
    return hadamard(v_raw, mhc_gate(x, bp));
}

// lambda * tanh(X * W_beta + b_beta) + epsilon; entries in (-l+e, l+e).
inline Tensor ddl_gate(const Tensor& x, const BlockParams& bp, double lambda, double epsilon) {
    return affine(tanh(add(matmul(x, bp.w_beta), bp.b_beta)), lambda, epsilon);
}

// X + beta (*) (V - alpha * X): erase-and-write under a single gate.
inline Tensor mgt_update(const Tensor& x, const Tensor& v, const Tensor& beta, const Tensor& alpha) {
    return add(x, hadamard(beta, sub(v, hadamard(alpha, x))));
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

// Post-LN baseline: X_{l+1} = LN(X + F(X)).
inline std::pair<Tensor, LayerTrace> standard_block_forward(const Tensor& x, const BlockParams& bp,
                                                            const ModelConfig& cfg, size_t layer_index) {
    Tensor out;
    try {
        out = layer_norm(add(x, run_sublayer(x, bp, cfg)), bp.ln_gain, bp.ln_bias);
    } catch (const NumericalError& e) {
        throw InstabilityError("block " + std::to_string(layer_index) + ": " + e.what(), int(layer_index));
    }
    LayerTrace trace;
    trace.layer_index = layer_index;
    trace.hidden = detail::detach(out);
    return {out, trace};
}

// Gated block: pre-LN, sublayer, then the variant's gate pipeline.
//   mhc_only: X + gate (*) V_raw
//   ddl_only: X + beta (*) (V_raw - alpha X)
//   mgt_full: X + beta (*) (gate (*) V_raw - alpha X)
inline std::pair<Tensor, LayerTrace> mgt_block_forward(const Tensor& x, const BlockParams& bp,
                                                       const ModelConfig& cfg, size_t layer_index) {
    if (cfg.variant == Variant::standard) return standard_block_forward(x, bp, cfg, layer_index);
    LayerTrace trace;
    trace.layer_index = layer_index;
    Tensor out;
    try {
        Tensor v_raw = run_sublayer(layer_norm(x, bp.ln_gain, bp.ln_bias), bp, cfg);
        Tensor v = v_raw;
        if (variant_has_mhc(cfg.variant)) {
            Tensor gate = mhc_gate(x, bp);
            trace.gate = detail::detach(gate);
            v = hadamard(v_raw, gate);
        }
        if (variant_has_ddl(cfg.variant)) {
            Tensor beta = ddl_gate(x, bp, cfg.lambda, cfg.epsilon);
            trace.beta = detail::detach(beta);
            out = mgt_update(x, v, beta, bp.alpha);
        } else {
            out = add(x, v);
        }
    } catch (const NumericalError& e) {
        throw InstabilityError("block " + std::to_string(layer_index) + ": " + e.what(), int(layer_index));
    }
    if (!out.all_finite())
        throw InstabilityError("block " + std::to_string(layer_index) + ": non-finite hidden state", int(layer_index));
    trace.hidden = detail::detach(out);
    return {out, trace};
}

// ---------------------------------------------------------------------------
// Full model
// ---------------------------------------------------------------------------

// Embedding -> 2*depth blocks -> final LN -> tied output projection.
// Gradients flow if the parameters were bound to a tape beforehand.
inline std::pair<Tensor, ModelTrace> forward_model(const std::vector<int>& tokens, const ModelParams& params) {
    const ModelConfig& cfg = params.config;
    if (tokens.size() > cfg.seq_len)
        throw DimensionError("forward_model: sequence of " + std::to_string(tokens.size()) +
                             " tokens exceeds seq_len " + std::to_string(cfg.seq_len));
    ModelTrace trace;
    Tensor x = embedding(tokens, params.tok_embed, params.pos_embed);
    trace.embedding_state = detail::detach(x);
    trace.layers.reserve(params.blocks.size());
    for (size_t b = 0; b < params.blocks.size(); ++b) {
        auto [next, lt] = mgt_block_forward(x, params.blocks[b], cfg, b + 1);
        x = next;
        trace.layers.push_back(std::move(lt));
    }
    Tensor final_state = layer_norm(x, params.final_ln_gain, params.final_ln_bias);
    Tensor logits = matmul_nt(final_state, params.tok_embed);
    return {logits, std::move(trace)};
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"depth", c.depth},       {"width", c.width},     {"heads", c.heads},
            {"ffn_mult", c.ffn_mult}, {"vocab", c.vocab},     {"seq_len", c.seq_len},
            {"variant", variant_name(c.variant)},             {"lambda", c.lambda},
            {"epsilon", c.epsilon},   {"alpha_init", c.alpha_init}, {"seed", c.seed}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.depth = j.at("depth").get<size_t>();
    c.width = j.at("width").get<size_t>();
    c.heads = j.at("heads").get<size_t>();
    c.ffn_mult = j.at("ffn_mult").get<size_t>();
    c.vocab = j.at("vocab").get<size_t>();
    c.seq_len = j.at("seq_len").get<size_t>();
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.lambda = j.at("lambda").get<double>();
    c.epsilon = j.at("epsilon").get<double>();
    c.alpha_init = j.at("alpha_init").get<double>();
    c.seed = j.at("seed").get<uint64_t>();
    return c;
}

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
    nlohmann::json j;
    j["format"] = "mgt-checkpoint-v1";
    j["config"] = config_to_json(params.config);
    nlohmann::json tensors = nlohmann::json::object();
    for_each_param(const_cast<ModelParams&>(params), [&](const std::string& name, Tensor& t) {
        tensors[name] = {{"shape", t.shape()}, {"data", t.vec()}};
    });
    j["params"] = std::move(tensors);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint to " + path);
    out << j.dump();
}

inline ModelParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint from " + path);
    nlohmann::json j;
    in >> j;
    if (j.value("format", "") != "mgt-checkpoint-v1")
        throw IngestionError("unrecognized checkpoint format in " + path);
    ModelParams p = init_params(config_from_json(j.at("config")));
    for_each_param(p, [&](const std::string& name, Tensor& t) {
        const nlohmann::json& entry = j.at("params").at(name);
        std::vector<size_t> shape = entry.at("shape").get<std::vector<size_t>>();
        std::vector<double> data = entry.at("data").get<std::vector<double>>();
        if (shape != t.shape())
            throw IngestionError("checkpoint tensor " + name + " has shape mismatch");
        t = Tensor(std::move(shape), std::move(data));
    });
    return p;
}

}  // namespace mgt
