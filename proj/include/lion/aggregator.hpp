#pragma once

#include <optional>
#include <string>

#include "lion/nn.hpp"

namespace lion::va {

/// Indices of the vision-encoder hidden states fed to the aggregator,
/// deepest first: 0 <= k < j < i < L.
struct TapSelection {
    int i, j, k;
};

/// Middle-layer rule i = L-1, j = floor(2L/3), k = floor(L/3).
inline TapSelection select_taps(int layers) {
    if (layers < 6)
        throw ContractError("select_taps: encoder too shallow, need at least 6 layers, got " +
                            std::to_string(layers));
    return {layers - 1, (2 * layers) / 3, layers / 3};
}

struct AggregatorConfig {
    nn::BertBlockConfig block;   // has_cross is forced on
    bool use_input_proj = false; // optional projection of each tap before fusing
};

struct AggregatorParams {
    nn::BertBlockParams block1, block2;
    nn::LinearParams input_proj; // used only when cfg.use_input_proj
    template <class F> void visit(const std::string& p, F&& f, const AggregatorConfig& cfg) {
        block1.visit(p + ".b1", f, true);
        block2.visit(p + ".b2", f, true);
        if (cfg.use_input_proj) input_proj.visit(p + ".proj", f);
    }
};

inline AggregatorParams init_aggregator(const AggregatorConfig& cfg, Rng& rng, double std = 0.02) {
    nn::BertBlockConfig bc = cfg.block;
    bc.has_cross = true;
    AggregatorParams p;
    p.block1 = nn::init_bert_block(bc, rng, std);
    p.block2 = nn::init_bert_block(bc, rng, std);
    p.input_proj = nn::init_linear(bc.d_model, bc.d_model, rng, std);
    return p;
}

/// V̄ = B2(B1(V_i; V_j); V_k): two cross-attention blocks fuse the three
/// tapped hidden states sequentially, deeper feature as the query stream.
inline Tensor aggregate(const Tensor& v_i, const Tensor& v_j, const Tensor& v_k,
                        const AggregatorConfig& cfg, const AggregatorParams& p) {
    if (v_i.shape() != v_j.shape() || v_i.shape() != v_k.shape())
        throw ShapeError("aggregate: tap shapes differ");
    nn::BertBlockConfig bc = cfg.block;
    bc.has_cross = true;
    Tensor qi = v_i, kj = v_j, kk = v_k;
    if (cfg.use_input_proj) {
        qi = nn::linear(qi, p.input_proj);
        kj = nn::linear(kj, p.input_proj);
        kk = nn::linear(kk, p.input_proj);
    }
    Tensor mid = nn::bert_block(qi, kj, bc, p.block1);
    return nn::bert_block(mid, kk, bc, p.block2);
}

} // namespace lion::va
