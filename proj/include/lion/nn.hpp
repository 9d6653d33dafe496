#pragma once

#include <optional>
#include <string>

#include "lion/tensor.hpp"

namespace lion::nn {

enum class Activation { relu, gelu };

struct AttentionConfig {
    int64_t d_model = 0;
    int n_heads = 1;
    bool causal = false;
};

struct FfnConfig {
    int64_t d_model = 0;
    int64_t d_hidden = 0;
    Activation activation = Activation::gelu;
};

/// Pre-norm residual block with optional cross-attention, ordered per
/// Attn -> XAttn -> FFN, closed by a block-final layernorm. `residual=false`
/// selects the bare composition FFN(XAttn(Attn(x), y)) for ablation.
struct BertBlockConfig {
    int64_t d_model = 0;
    int n_heads = 1;
    int64_t d_hidden = 0;
    Activation activation = Activation::gelu;
    bool has_cross = false;
    bool residual = true;
};

struct LinearParams {
    Tensor w; // [d_in, d_out]
    Tensor b; // [d_out]
    template <class F> void visit(const std::string& p, F&& f) {
        f(p + ".w", w);
        f(p + ".b", b);
    }
};

struct AttentionParams {
    LinearParams q, k, v, o;
    template <class F> void visit(const std::string& p, F&& f) {
        q.visit(p + ".q", f);
        k.visit(p + ".k", f);
        v.visit(p + ".v", f);
        o.visit(p + ".o", f);
    }
};

struct FfnParams {
    LinearParams in, out;
    template <class F> void visit(const std::string& p, F&& f) {
        in.visit(p + ".in", f);
        out.visit(p + ".out", f);
    }
};

struct LayerNormParams {
    Tensor gamma, beta;
    template <class F> void visit(const std::string& p, F&& f) {
        f(p + ".g", gamma);
        f(p + ".b", beta);
    }
};

struct BertBlockParams {
    LayerNormParams ln1, ln2, ln3, ln_out;
    AttentionParams self_attn, cross_attn; // cross_attn unused when !has_cross
    FfnParams ffn;
    template <class F> void visit(const std::string& p, F&& f, bool has_cross) {
        ln1.visit(p + ".ln1", f);
        self_attn.visit(p + ".attn", f);
        if (has_cross) {
            ln2.visit(p + ".ln2", f);
            cross_attn.visit(p + ".xattn", f);
        }
        ln3.visit(p + ".ln3", f);
        ffn.visit(p + ".ffn", f);
        ln_out.visit(p + ".ln_out", f);
    }
};

inline LinearParams init_linear(int64_t d_in, int64_t d_out, Rng& rng, double std = 0.02) {
    return {Tensor::randn({d_in, d_out}, rng, std), Tensor::zeros({d_out})};
}

inline LayerNormParams init_layernorm(int64_t d) {
    return {Tensor::full({d}, 1.0), Tensor::zeros({d})};
}

inline AttentionParams init_attention(int64_t d, Rng& rng, double std = 0.02) {
    return {init_linear(d, d, rng, std), init_linear(d, d, rng, std), init_linear(d, d, rng, std),
            init_linear(d, d, rng, std)};
}

inline FfnParams init_ffn(int64_t d, int64_t hidden, Rng& rng, double std = 0.02) {
    return {init_linear(d, hidden, rng, std), init_linear(hidden, d, rng, std)};
}

inline BertBlockParams init_bert_block(const BertBlockConfig& cfg, Rng& rng, double std = 0.02) {
    BertBlockParams p;
    p.ln1 = init_layernorm(cfg.d_model);
    p.ln2 = init_layernorm(cfg.d_model);
    p.ln3 = init_layernorm(cfg.d_model);
    p.ln_out = init_layernorm(cfg.d_model);
    p.self_attn = init_attention(cfg.d_model, rng, std);
    p.cross_attn = init_attention(cfg.d_model, rng, std);
    p.ffn = init_ffn(cfg.d_model, cfg.d_hidden, rng, std);
    return p;
}

inline Tensor linear(const Tensor& x, const LinearParams& p) { return add(matmul(x, p.w), p.b); }

inline Tensor activate(const Tensor& x, Activation a) {
    return a == Activation::relu ? relu(x) : gelu(x);
}

namespace detail {

inline Tensor attention_2d(const Tensor& x, const std::optional<Tensor>& kv, const AttentionConfig& cfg,
                           const AttentionParams& p) {
    const Tensor& src = kv ? *kv : x;
    Tensor q = linear(x, p.q);
    Tensor k = linear(src, p.k);
    Tensor v = linear(src, p.v);
    Tensor core = mha_core(q, k, v, cfg.n_heads, cfg.causal);
    return linear(core, p.o);
}

} // namespace detail

/// Multi-head attention over [L, D] or batched [B, L, D]. Self-attention when
/// kv is absent; cross-attention onto kv otherwise. Causal masking only makes
/// sense for self-attention.
inline Tensor attention(const Tensor& x, const std::optional<Tensor>& kv, const AttentionConfig& cfg,
                        const AttentionParams& p) {
    if (cfg.causal && kv) throw ContractError("attention: causal attention cannot take external kv");
    if (x.shape().back() != cfg.d_model)
        throw ShapeError("attention: input width != d_model");
    if (kv && kv->shape().back() != cfg.d_model)
        throw ShapeError("attention: kv width != d_model");
    if (x.ndim() == 2) return detail::attention_2d(x, kv, cfg, p);
    if (x.ndim() != 3) throw ShapeError("attention: expected [L,D] or [B,L,D]");
    int64_t batch = x.dim(0), len = x.dim(1), d = x.dim(2);
    std::vector<Tensor> outs;
    outs.reserve(batch);
    for (int64_t b = 0; b < batch; ++b) {
        Tensor xb = reshape(slice(x, 0, b, 1), {len, d});
        std::optional<Tensor> kvb;
        if (kv) kvb = reshape(slice(*kv, 0, b, 1), {kv->dim(1), d});
        outs.push_back(reshape(detail::attention_2d(xb, kvb, cfg, p), {1, len, d}));
    }
    return batch == 1 ? outs[0] : concat(outs, 0);
}

inline Tensor ffn(const Tensor& x, const FfnConfig& cfg, const FfnParams& p) {
    if (x.shape().back() != cfg.d_model) throw ShapeError("ffn: input width != d_model");
    return linear(activate(linear(x, p.in), cfg.activation), p.out);
}

inline Tensor bert_block(const Tensor& x, const std::optional<Tensor>& y, const BertBlockConfig& cfg,
                         const BertBlockParams& p) {
    if (cfg.has_cross && !y) throw ContractError("bert_block: cross-attention block needs y");
    AttentionConfig self_cfg{cfg.d_model, cfg.n_heads, false};
    AttentionConfig cross_cfg{cfg.d_model, cfg.n_heads, false};
    FfnConfig ffn_cfg{cfg.d_model, cfg.d_hidden, cfg.activation};
    if (!cfg.residual) {
        // Bare composition B(X;Y) = FFN(XAttn(Attn(X), Y)).
        Tensor a = attention(x, std::nullopt, self_cfg, p.self_attn);
        if (cfg.has_cross) a = attention(a, y, cross_cfg, p.cross_attn);
        return ffn(a, ffn_cfg, p.ffn);
    }
    Tensor h = add(x, attention(layernorm(x, p.ln1.gamma, p.ln1.beta), std::nullopt, self_cfg, p.self_attn));
    if (cfg.has_cross)
        h = add(h, attention(layernorm(h, p.ln2.gamma, p.ln2.beta), y, cross_cfg, p.cross_attn));
    h = add(h, ffn(layernorm(h, p.ln3.gamma, p.ln3.beta), ffn_cfg, p.ffn));
    return layernorm(h, p.ln_out.gamma, p.ln_out.beta);
}

} // namespace lion::nn
