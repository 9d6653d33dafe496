#pragma once

#include <string>
#include <vector>

#include "lion/tensor.hpp"

namespace lion::moa {

/// The two task families routed by the adapter mixture: image-level work
/// (captioning, VQA, VQG) and region-level grounding (REC, REG).
enum class TaskType { image_level = 0, region_level = 1 };

inline const char* task_name(TaskType t) { return t == TaskType::image_level ? "image" : "region"; }

/// Bottleneck adapter without biases: up(relu(down(x))), applied position-wise.
struct Adapter {
    Tensor w_down; // [D, r]
    Tensor w_up;   // [r, D]
    template <class F> void visit(const std::string& p, F&& f) {
        f(p + ".wd", w_down);
        f(p + ".wu", w_up);
    }
};

/// Per-(task, adapter) gate vectors; g[t][k] in R^D scales adapter k's output
/// elementwise for task t.
struct RouterGates {
    Tensor g; // [2, K, D]
    int64_t adapters() const { return g.dim(1); }
    int64_t width() const { return g.dim(2); }
};

/// Down projection starts small, up projection starts at zero, so a fresh
/// adapter is an exact no-op on the residual stream.
inline Adapter init_adapter(int64_t d_model, int64_t r, Rng& rng, double std = 0.02) {
    if (r < 1) throw ContractError("init_adapter: r must be >= 1");
    return {Tensor::randn({d_model, r}, rng, std), Tensor::zeros({r, d_model})};
}

inline Tensor adapter_forward(const Tensor& x, const Adapter& a) {
    if (x.shape().back() != a.w_down.dim(0))
        throw ShapeError("adapter_forward: input width != adapter down dim");
    return matmul(relu(matmul(x, a.w_down)), a.w_up);
}

/// O = F(X) + H(X): the parallel-adapter residual.
inline Tensor adapter_residual(const Tensor& ffn_out, const Tensor& adapter_out) {
    if (ffn_out.shape() != adapter_out.shape())
        throw ShapeError("adapter_residual: shapes differ, " + shape_str(ffn_out.shape()) + " vs " +
                         shape_str(adapter_out.shape()));
    return add(ffn_out, adapter_out);
}

/// O^t = F(X) + sum_k G^t_k ⊙ H_k(X). Gate vectors broadcast over positions.
inline Tensor router_forward(const Tensor& ffn_out, const std::vector<Tensor>& adapter_outs,
                             const RouterGates& gates, TaskType t) {
    if (adapter_outs.empty()) throw ContractError("router_forward: need at least one adapter output");
    if (gates.adapters() != static_cast<int64_t>(adapter_outs.size()))
        throw ShapeError("router_forward: gate count " + std::to_string(gates.adapters()) +
                         " != adapter count " + std::to_string(adapter_outs.size()));
    int64_t d = gates.width();
    if (ffn_out.shape().back() != d) throw ShapeError("router_forward: gate width != feature width");
    Tensor out = ffn_out;
    int ti = static_cast<int>(t);
    for (size_t k = 0; k < adapter_outs.size(); ++k) {
        if (adapter_outs[k].shape() != ffn_out.shape())
            throw ShapeError("router_forward: adapter output shape mismatch at k=" + std::to_string(k));
        Tensor gate = reshape(slice(slice(gates.g, 0, ti, 1), 1, static_cast<int64_t>(k), 1), {d});
        out = add(out, mul(adapter_outs[k], gate));
    }
    return out;
}

/// Task-identity gate initialization for the default two-adapter setup:
/// the image task opens only the image adapter and the region task only the
/// region adapter, so stage-3 starts bit-equal to the stage-1/2 models.
inline RouterGates init_gates(int64_t k, int64_t d) {
    if (k != 2) throw ContractError("init_gates: default configuration expects exactly two adapters");
    Tensor g = Tensor::zeros({2, k, d});
    auto& v = g.mutable_data();
    for (int64_t i = 0; i < d; ++i) {
        v[0 * k * d + 0 * d + i] = 1.0; // image task -> image adapter
        v[1 * k * d + 1 * d + i] = 1.0; // region task -> region adapter
    }
    return {g};
}

} // namespace lion::moa
