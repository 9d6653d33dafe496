#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "lion/adapters.hpp"
#include "lion/aggregator.hpp"
#include "lion/data.hpp"
#include "lion/nn.hpp"
#include "lion/tensor.hpp"

namespace lion::model {

using moa::TaskType;

// ---------------------------------------------------------------------------
// parameter store
// ---------------------------------------------------------------------------

enum class Group {
    vision_encoder,
    bridge,
    aggregator,
    mlp_proj,
    lm_base,
    adapter_img,
    adapter_reg,
    gates,
    soft_prompt,
    embeddings,
};

inline const char* group_name(Group g) {
    switch (g) {
        case Group::vision_encoder: return "vision_encoder";
        case Group::bridge: return "bridge";
        case Group::aggregator: return "aggregator";
        case Group::mlp_proj: return "mlp_proj";
        case Group::lm_base: return "lm_base";
        case Group::adapter_img: return "adapter_img";
        case Group::adapter_reg: return "adapter_reg";
        case Group::gates: return "gates";
        case Group::soft_prompt: return "soft_prompt";
        case Group::embeddings: return "embeddings";
    }
    return "?";
}

inline Group group_from_name(const std::string& s) {
    for (Group g : {Group::vision_encoder, Group::bridge, Group::aggregator, Group::mlp_proj,
                    Group::lm_base, Group::adapter_img, Group::adapter_reg, Group::gates,
                    Group::soft_prompt, Group::embeddings})
        if (s == group_name(g)) return g;
    throw ContractError("unknown parameter group '" + s + "'");
}

/// Named tensors with group labels and trainable flags. Iteration order is
/// the sorted name order, which fixes checkpoint layout and hashes. Trainable
/// flags are only ever flipped by the staging machinery.
class ParamStore {
public:
    struct Entry {
        Tensor tensor;
        Group group = Group::lm_base;
        bool trainable = false;
    };

    Tensor& add(const std::string& name, Tensor t, Group g) {
        auto [it, inserted] = entries_.emplace(name, Entry{std::move(t), g, false});
        if (!inserted) throw ContractError("param store: duplicate name '" + name + "'");
        return it->second.tensor;
    }

    bool contains(const std::string& name) const { return entries_.count(name) > 0; }

    Entry& at(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("param store: no parameter '" + name + "'");
        return it->second;
    }
    const Entry& at(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ContractError("param store: no parameter '" + name + "'");
        return it->second;
    }

    std::map<std::string, Entry>& entries() { return entries_; }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    void set_trainable_groups(const std::set<Group>& groups) {
        for (auto& [name, e] : entries_) {
            e.trainable = groups.count(e.group) > 0;
            e.tensor.set_requires_grad(e.trainable);
        }
    }

    void zero_grads() {
        for (auto& [name, e] : entries_) e.tensor.zero_grad();
    }

    std::vector<std::string> names_in_group(Group g) const {
        std::vector<std::string> out;
        for (const auto& [name, e] : entries_)
            if (e.group == g) out.push_back(name);
        return out;
    }

    /// FNV-1a over the raw float64 bytes of every tensor, in name order.
    uint64_t content_hash() const {
        uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& [name, e] : entries_) {
            for (char c : name) {
                h ^= static_cast<unsigned char>(c);
                h *= 0x100000001b3ULL;
            }
            for (double v : e.tensor.data()) {
                uint64_t bits;
                std::memcpy(&bits, &v, 8);
                for (int i = 0; i < 8; ++i) {
                    h ^= (bits >> (8 * i)) & 0xff;
                    h *= 0x100000001b3ULL;
                }
            }
        }
        return h;
    }

private:
    std::map<std::string, Entry> entries_;
};

// ---------------------------------------------------------------------------
// model configuration
// ---------------------------------------------------------------------------

enum class RouterMode { router, single_adapter, plain_sum };

inline const char* router_mode_name(RouterMode m) {
    switch (m) {
        case RouterMode::router: return "router";
        case RouterMode::single_adapter: return "single_adapter";
        case RouterMode::plain_sum: return "plain_sum";
    }
    return "?";
}

inline RouterMode router_mode_from_name(const std::string& s) {
    for (RouterMode m : {RouterMode::router, RouterMode::single_adapter, RouterMode::plain_sum})
        if (s == router_mode_name(m)) return m;
    throw ContractError("unknown router mode '" + s + "'");
}

struct ModelConfig {
    int64_t d_model = 32;
    int n_heads = 4;
    int64_t d_ffn = 64;
    int l_vis = 6;
    int l_lm = 2;
    int64_t n_queries = 4;
    int grid_h = 4;
    int grid_w = 4;
    int min_objects = 1;
    int max_objects = 3;
    int max_extent = 2;
    int64_t vocab = data::Tokenizer{}.vocab_size();
    int64_t r_adapter = 8;
    int64_t k_adapters = 2;
    int64_t max_len = 320;
    int64_t d_proj_hidden = 32;
    int64_t soft_prompt_len = 1;
    bool shared_gates = false;
    bool aggregator_input_proj = false;
    RouterMode router_mode = RouterMode::router;
    double init_std = 0.1; // ~1/sqrt(d_model) at desk width; 0.02 starves tiny models
    double vis_pos_std = 1.0; // patch-position salience must match the object signatures
    uint64_t init_seed = 0;

    int64_t n_patches() const { return static_cast<int64_t>(grid_h) * grid_w; }

    /// The model owns the synthetic-world geometry: samples store only a
    /// scene seed, and regeneration must agree between data generation,
    /// training and evaluation.
    data::SceneConfig scene_config() const { return {grid_h, grid_w, min_objects, max_objects, max_extent}; }

    void validate() const {
        if (d_model % n_heads != 0) throw ContractError("config: d_model must divide by n_heads");
        if (l_vis < 6) throw ContractError("config: vision encoder needs >= 6 layers for tap selection");
        if (k_adapters != 2) throw ContractError("config: the adapter mixture is sized for two adapters");
        if (vocab <= data::Tokenizer::kReserved) throw ContractError("config: vocab too small");
        if (soft_prompt_len < 1) throw ContractError("config: soft_prompt_len must be >= 1");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["d_model"] = d_model;
        j["n_heads"] = n_heads;
        j["d_ffn"] = d_ffn;
        j["l_vis"] = l_vis;
        j["l_lm"] = l_lm;
        j["n_queries"] = n_queries;
        j["grid_h"] = grid_h;
        j["grid_w"] = grid_w;
        j["min_objects"] = min_objects;
        j["max_objects"] = max_objects;
        j["max_extent"] = max_extent;
        j["vocab"] = vocab;
        j["r_adapter"] = r_adapter;
        j["k_adapters"] = k_adapters;
        j["max_len"] = max_len;
        j["d_proj_hidden"] = d_proj_hidden;
        j["soft_prompt_len"] = soft_prompt_len;
        j["shared_gates"] = shared_gates;
        j["aggregator_input_proj"] = aggregator_input_proj;
        j["router_mode"] = router_mode_name(router_mode);
        j["init_std"] = init_std;
        j["vis_pos_std"] = vis_pos_std;
        j["init_seed"] = init_seed;
        return j;
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.d_model = j.at("d_model");
        c.n_heads = j.at("n_heads");
        c.d_ffn = j.at("d_ffn");
        c.l_vis = j.at("l_vis");
        c.l_lm = j.at("l_lm");
        c.n_queries = j.at("n_queries");
        c.grid_h = j.at("grid_h");
        c.grid_w = j.at("grid_w");
        c.min_objects = j.at("min_objects");
        c.max_objects = j.at("max_objects");
        c.max_extent = j.at("max_extent");
        c.vocab = j.at("vocab");
        c.r_adapter = j.at("r_adapter");
        c.k_adapters = j.at("k_adapters");
        c.max_len = j.at("max_len");
        c.d_proj_hidden = j.at("d_proj_hidden");
        c.soft_prompt_len = j.at("soft_prompt_len");
        c.shared_gates = j.at("shared_gates");
        c.aggregator_input_proj = j.at("aggregator_input_proj");
        c.router_mode = router_mode_from_name(j.at("router_mode"));
        c.init_std = j.at("init_std");
        c.vis_pos_std = j.at("vis_pos_std");
        c.init_seed = j.at("init_seed");
        return c;
    }
};

enum class TagMode { none, soft, hard };

inline const char* tag_mode_name(TagMode m) {
    switch (m) {
        case TagMode::none: return "none";
        case TagMode::soft: return "soft";
        case TagMode::hard: return "hard";
    }
    return "?";
}

inline TagMode tag_mode_from_name(const std::string& s) {
    for (TagMode m : {TagMode::none, TagMode::soft, TagMode::hard})
        if (s == tag_mode_name(m)) return m;
    throw ContractError("unknown tag mode '" + s + "'");
}

// ---------------------------------------------------------------------------
// the toy multimodal model
// ---------------------------------------------------------------------------

struct EncoderLayer {
    nn::LayerNormParams ln1, ln2;
    nn::AttentionParams attn;
    nn::FfnParams ffn;
    template <class F> void visit(const std::string& p, F&& f) {
        ln1.visit(p + ".ln1", f);
        attn.visit(p + ".attn", f);
        ln2.visit(p + ".ln2", f);
        ffn.visit(p + ".ffn", f);
    }
};

struct LmLayer {
    EncoderLayer base;
    moa::Adapter adapter_img, adapter_reg;
    Tensor gates; // [2, K, D]; aliases a shared tensor when cfg.shared_gates
};

struct TokenizedSample {
    std::vector<int> full; // BOS + prompt + target + EOS
    int64_t prompt_len = 0;
};

/// Frozen toy vision encoder -> {query bridge, vision aggregator + MLP} ->
/// frozen causal LM with a mixture of adapters. Image-level tasks consume
/// [bridge tokens, text]; region-level tasks additionally receive the
/// aggregator tokens, so the two visual branches stay stage-separable.
class Model {
public:
    ModelConfig cfg;
    data::Tokenizer tok;
    ParamStore store;

    std::vector<EncoderLayer> vis_layers;
    Tensor vis_pos;
    Tensor bridge_queries;
    nn::BertBlockParams bridge_block;
    va::AggregatorConfig agg_cfg;
    va::AggregatorParams agg;
    nn::FfnParams proj;
    Tensor tok_emb, pos_emb;
    std::vector<LmLayer> lm_layers;
    nn::LayerNormParams lm_final_ln;
    Tensor lm_head;
    Tensor soft_prompt;

    static Model init(const ModelConfig& cfg) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        Rng rng(cfg.init_seed);
        double std = cfg.init_std;
        int64_t d = cfg.d_model;

        auto reg = [&m](Group g) {
            return [&m, g](const std::string& name, Tensor& t) { t = m.store.add(name, t, g); };
        };

        m.vis_pos = Tensor::randn({m.cfg.n_patches(), d}, rng, cfg.vis_pos_std);
        m.store.add("vis.pos", m.vis_pos, Group::vision_encoder);
        for (int l = 0; l < cfg.l_vis; ++l) {
            EncoderLayer layer;
            layer.ln1 = nn::init_layernorm(d);
            layer.ln2 = nn::init_layernorm(d);
            layer.attn = nn::init_attention(d, rng, std);
            layer.ffn = nn::init_ffn(d, cfg.d_ffn, rng, std);
            layer.visit("vis.l" + std::to_string(l), reg(Group::vision_encoder));
            m.vis_layers.push_back(layer);
        }

        m.bridge_queries = Tensor::randn({cfg.n_queries, d}, rng, std);
        m.store.add("bridge.queries", m.bridge_queries, Group::bridge);
        nn::BertBlockConfig bb{d, cfg.n_heads, cfg.d_ffn, nn::Activation::gelu, true, true};
        m.bridge_block = nn::init_bert_block(bb, rng, std);
        m.bridge_block.visit("bridge.block", reg(Group::bridge), true);

        m.agg_cfg.block = bb;
        m.agg_cfg.use_input_proj = cfg.aggregator_input_proj;
        m.agg = va::init_aggregator(m.agg_cfg, rng, std);
        m.agg.visit("agg", reg(Group::aggregator), m.agg_cfg);

        m.proj = nn::init_ffn(d, cfg.d_proj_hidden, rng, std);
        m.proj.visit("proj", reg(Group::mlp_proj));

        m.tok_emb = Tensor::randn({cfg.vocab, d}, rng, std);
        m.store.add("lm.tok", m.tok_emb, Group::embeddings);
        m.pos_emb = Tensor::randn({cfg.max_len, d}, rng, std);
        m.store.add("lm.pos", m.pos_emb, Group::embeddings);

        Tensor shared_gates_tensor;
        if (cfg.shared_gates) {
            shared_gates_tensor = moa::init_gates(cfg.k_adapters, d).g;
            m.store.add("lm.gates", shared_gates_tensor, Group::gates);
        }
        for (int l = 0; l < cfg.l_lm; ++l) {
            std::string p = "lm.l" + std::to_string(l);
            LmLayer layer;
            layer.base.ln1 = nn::init_layernorm(d);
            layer.base.ln2 = nn::init_layernorm(d);
            layer.base.attn = nn::init_attention(d, rng, std);
            layer.base.ffn = nn::init_ffn(d, cfg.d_ffn, rng, std);
            layer.base.visit(p, reg(Group::lm_base));
            layer.adapter_img = moa::init_adapter(d, cfg.r_adapter, rng, std);
            layer.adapter_img.visit(p + ".adapter_img", reg(Group::adapter_img));
            layer.adapter_reg = moa::init_adapter(d, cfg.r_adapter, rng, std);
            layer.adapter_reg.visit(p + ".adapter_reg", reg(Group::adapter_reg));
            if (cfg.shared_gates) {
                layer.gates = shared_gates_tensor;
            } else {
                layer.gates = m.store.add(p + ".gates", moa::init_gates(cfg.k_adapters, d).g, Group::gates);
            }
            m.lm_layers.push_back(layer);
        }
        m.lm_final_ln = nn::init_layernorm(d);
        m.lm_final_ln.visit("lm.final_ln", reg(Group::lm_base));
        m.lm_head = Tensor::randn({d, cfg.vocab}, rng, std);
        m.store.add("lm.head.w", m.lm_head, Group::lm_base);

        m.soft_prompt = Tensor::randn({cfg.soft_prompt_len, d}, rng, std);
        m.store.add("soft_prompt", m.soft_prompt, Group::soft_prompt);
        return m;
    }

    // --- vision side ---------------------------------------------------------

    /// All per-layer hidden states of the frozen encoder, for tap selection.
    std::vector<Tensor> encode_image(const Tensor& scene_feats) const {
        if (scene_feats.shape() != Shape{cfg.n_patches(), cfg.d_model})
            throw ShapeError("encode_image: features must be [N, D]");
        nn::AttentionConfig acfg{cfg.d_model, cfg.n_heads, false};
        nn::FfnConfig fcfg{cfg.d_model, cfg.d_ffn, nn::Activation::gelu};
        Tensor x = add(scene_feats, vis_pos);
        std::vector<Tensor> hiddens;
        hiddens.reserve(vis_layers.size());
        for (const auto& l : vis_layers) {
            x = add(x, nn::attention(layernorm(x, l.ln1.gamma, l.ln1.beta), std::nullopt, acfg, l.attn));
            x = add(x, nn::ffn(layernorm(x, l.ln2.gamma, l.ln2.beta), fcfg, l.ffn));
            hiddens.push_back(x);
        }
        return hiddens;
    }

    /// Learned queries cross-attending to the top hidden state.
    Tensor bridge_forward(const Tensor& top_hidden) const {
        nn::BertBlockConfig bb{cfg.d_model, cfg.n_heads, cfg.d_ffn, nn::Activation::gelu, true, true};
        return nn::bert_block(bridge_queries, top_hidden, bb, bridge_block);
    }

    Tensor aggregate_taps(const std::vector<Tensor>& hiddens) const {
        va::TapSelection taps = va::select_taps(static_cast<int>(hiddens.size()));
        return va::aggregate(hiddens[taps.i], hiddens[taps.j], hiddens[taps.k], agg_cfg, agg);
    }

    /// Two-layer GeLU MLP mapping aggregator output into the LM space.
    Tensor project_va(const Tensor& v_bar) const {
        nn::FfnConfig fcfg{cfg.d_model, cfg.d_proj_hidden, nn::Activation::gelu};
        return nn::ffn(v_bar, fcfg, proj);
    }

    struct VisualTokens {
        Tensor bridge;
        std::optional<Tensor> va;
        int64_t front_len() const { return bridge.dim(0) + (va ? va->dim(0) : 0); }
    };

    VisualTokens visual_tokens(uint64_t scene_seed, TaskType t) const {
        data::SyntheticScene scene = data::gen_scene(scene_seed, cfg.scene_config());
        Tensor feats = data::scene_features(scene, cfg.d_model);
        std::vector<Tensor> hiddens = encode_image(feats);
        VisualTokens v;
        v.bridge = bridge_forward(hiddens.back());
        if (t == TaskType::region_level) v.va = project_va(aggregate_taps(hiddens));
        return v;
    }

    // --- text side -----------------------------------------------------------

    std::string instruction_text(const data::InstructionSample& s, TagMode mode) const {
        if (mode == TagMode::none || s.tags.empty()) return s.instruction;
        std::string prefix = mode == TagMode::soft ? data::render_tag_instruction(s.tags)
                                                   : data::render_tag_instruction_hard(s.tags);
        return prefix + " " + s.instruction;
    }

    TokenizedSample tokenize(const data::InstructionSample& s, TagMode mode) const {
        TokenizedSample out;
        std::vector<int> prompt = tok.encode(instruction_text(s, mode) + " ");
        std::vector<int> target = tok.encode(s.target);
        out.full.push_back(data::Tokenizer::kBos);
        out.full.insert(out.full.end(), prompt.begin(), prompt.end());
        out.prompt_len = static_cast<int64_t>(out.full.size());
        out.full.insert(out.full.end(), target.begin(), target.end());
        out.full.push_back(data::Tokenizer::kEos);
        return out;
    }

    /// [bridge tokens, VA tokens, text embeddings]; every HINT id in text_ids
    /// has its embedding swapped for the trainable soft prompt (cycling when
    /// the prompt is multi-row). Position embeddings are added downstream.
    Tensor assemble_inputs(const Tensor& bridge_tokens, const std::optional<Tensor>& va_tokens,
                           const std::vector<int>& text_ids,
                           const std::optional<Tensor>& soft_prompt_slot) const {
        Tensor emb = embed(tok_emb, text_ids);
        std::vector<int64_t> hint_rows, hint_map;
        for (size_t i = 0; i < text_ids.size(); ++i)
            if (text_ids[i] == data::Tokenizer::kHint) hint_rows.push_back(static_cast<int64_t>(i));
        if (!hint_rows.empty()) {
            if (!soft_prompt_slot)
                throw ContractError("assemble_inputs: HINT token present but no soft prompt configured");
            for (size_t i = 0; i < hint_rows.size(); ++i)
                hint_map.push_back(static_cast<int64_t>(i) % soft_prompt_slot->dim(0));
            emb = replace_rows(emb, hint_rows, *soft_prompt_slot, hint_map);
        }
        std::vector<Tensor> parts{bridge_tokens};
        if (va_tokens) parts.push_back(*va_tokens);
        parts.push_back(emb);
        return concat(parts, 0);
    }

    /// Causal LM trunk; every FFN sublayer is wrapped by the adapter mixture
    /// routed for task t (or the ablation modes).
    Tensor lm_hidden(const Tensor& x0, TaskType t, int64_t pos_offset = 0) const {
        int64_t len = x0.dim(0);
        if (pos_offset + len > cfg.max_len)
            throw ContractError("lm_hidden: sequence length " + std::to_string(pos_offset + len) +
                                " exceeds max_len " + std::to_string(cfg.max_len));
        nn::AttentionConfig acfg{cfg.d_model, cfg.n_heads, true};
        nn::FfnConfig fcfg{cfg.d_model, cfg.d_ffn, nn::Activation::gelu};
        Tensor x = add(x0, slice(pos_emb, 0, pos_offset, len));
        for (const auto& l : lm_layers) {
            x = add(x, nn::attention(layernorm(x, l.base.ln1.gamma, l.base.ln1.beta), std::nullopt, acfg,
                                     l.base.attn));
            Tensor h = layernorm(x, l.base.ln2.gamma, l.base.ln2.beta);
            Tensor f = nn::ffn(h, fcfg, l.base.ffn);
            Tensor a_img = moa::adapter_forward(h, l.adapter_img);
            Tensor a_reg = moa::adapter_forward(h, l.adapter_reg);
            Tensor routed;
            switch (cfg.router_mode) {
                case RouterMode::router:
                    routed = moa::router_forward(f, {a_img, a_reg}, moa::RouterGates{l.gates}, t);
                    break;
                case RouterMode::single_adapter:
                    routed = moa::adapter_residual(f, t == TaskType::image_level ? a_img : a_reg);
                    break;
                case RouterMode::plain_sum:
                    routed = moa::adapter_residual(moa::adapter_residual(f, a_img), a_reg);
                    break;
            }
            x = add(x, routed);
        }
        return layernorm(x, lm_final_ln.gamma, lm_final_ln.beta);
    }

    Tensor logits_for(const Tensor& rows) const { return matmul(rows, lm_head); }

    // --- losses ----------------------------------------------------------------

    /// Mean LM cross-entropy over the target span (instruction positions are
    /// masked out), with the multimodal prefix assembled for task t.
    /// supervise_all additionally scores the instruction positions; the
    /// bootstrap stage uses that to align the LM with prefixed inputs.
    Tensor forward_loss(const data::InstructionSample& s, TaskType t, TagMode mode = TagMode::none,
                        bool supervise_all = false) const {
        if (s.target.empty()) throw ContractError("forward_loss: undefined loss for empty target");
        TokenizedSample ts = tokenize(s, mode);
        VisualTokens vis = visual_tokens(s.scene_seed, t);
        std::vector<int> input_ids(ts.full.begin(), ts.full.end() - 1);
        Tensor x0 = assemble_inputs(vis.bridge, vis.va, input_ids, soft_prompt);
        Tensor h = lm_hidden(x0, t);
        int64_t front = vis.front_len();
        Tensor text_rows = slice(h, 0, front, static_cast<int64_t>(input_ids.size()));
        Tensor logits = logits_for(text_rows);
        std::vector<int> labels(input_ids.size());
        for (size_t i = 0; i < input_ids.size(); ++i) {
            int64_t next = static_cast<int64_t>(i) + 1;
            labels[i] = (supervise_all || next >= ts.prompt_len) ? ts.full[next] : kIgnoreId;
        }
        return cross_entropy(logits, labels, kIgnoreId);
    }

    /// Text-only LM loss used by the bootstrap stage; supervises every
    /// position and trains arbitrary position rows via the offset.
    Tensor text_loss(const std::string& text, int64_t pos_offset = 0) const {
        std::vector<int> ids{data::Tokenizer::kBos};
        std::vector<int> body = tok.encode(text);
        ids.insert(ids.end(), body.begin(), body.end());
        ids.push_back(data::Tokenizer::kEos);
        std::vector<int> input(ids.begin(), ids.end() - 1);
        Tensor emb = embed(tok_emb, input);
        Tensor h = lm_hidden(emb, TaskType::image_level, pos_offset);
        Tensor logits = logits_for(h);
        std::vector<int> labels(ids.begin() + 1, ids.end());
        return cross_entropy(logits, labels, kIgnoreId);
    }

    // --- inference ---------------------------------------------------------------

    /// Deterministic argmax decoding (lowest id wins ties); stops at EOS.
    std::vector<int> greedy_decode(const data::InstructionSample& s, TaskType t, int max_new,
                                   TagMode mode = TagMode::none) const {
        if (max_new < 1) throw ContractError("greedy_decode: max_new must be >= 1");
        NoGradGuard ng;
        VisualTokens vis = visual_tokens(s.scene_seed, t);
        std::vector<int> ids{data::Tokenizer::kBos};
        std::vector<int> prompt = tok.encode(instruction_text(s, mode) + " ");
        ids.insert(ids.end(), prompt.begin(), prompt.end());
        std::vector<int> out;
        for (int step = 0; step < max_new; ++step) {
            Tensor x0 = assemble_inputs(vis.bridge, vis.va, ids, soft_prompt);
            Tensor h = lm_hidden(x0, t);
            Tensor last = slice(h, 0, h.dim(0) - 1, 1);
            Tensor logits = logits_for(last);
            int best = 0;
            double best_v = logits.at(0);
            for (int64_t j = 1; j < cfg.vocab; ++j)
                if (logits.at(j) > best_v) {
                    best_v = logits.at(j);
                    best = static_cast<int>(j);
                }
            out.push_back(best);
            if (best == data::Tokenizer::kEos) break;
            ids.push_back(best);
        }
        return out;
    }

    std::string decode_to_text(const std::vector<int>& ids) const {
        std::vector<int> upto;
        for (int id : ids) {
            if (id == data::Tokenizer::kEos) break;
            upto.push_back(id);
        }
        return tok.decode(upto);
    }

    /// Teacher-forced log-likelihood of each candidate continuation
    /// (candidate characters plus EOS).
    std::vector<double> score_candidates(const data::InstructionSample& s,
                                         const std::vector<std::string>& candidates, TaskType t,
                                         TagMode mode = TagMode::none) const {
        if (candidates.empty()) throw ContractError("score_candidates: no candidates");
        NoGradGuard ng;
        VisualTokens vis = visual_tokens(s.scene_seed, t);
        std::vector<int> prompt{data::Tokenizer::kBos};
        std::vector<int> body = tok.encode(instruction_text(s, mode) + " ");
        prompt.insert(prompt.end(), body.begin(), body.end());
        std::vector<double> scores;
        scores.reserve(candidates.size());
        for (const auto& cand : candidates) {
            if (cand.empty()) throw ContractError("score_candidates: empty candidate string");
            std::vector<int> full = prompt;
            std::vector<int> c = tok.encode(cand);
            full.insert(full.end(), c.begin(), c.end());
            full.push_back(data::Tokenizer::kEos);
            std::vector<int> input(full.begin(), full.end() - 1);
            Tensor x0 = assemble_inputs(vis.bridge, vis.va, input, soft_prompt);
            Tensor h = lm_hidden(x0, t);
            int64_t front = vis.front_len();
            Tensor text_rows = slice(h, 0, front, static_cast<int64_t>(input.size()));
            Tensor logits = logits_for(text_rows);
            double score = 0.0;
            int64_t p0 = static_cast<int64_t>(prompt.size());
            for (int64_t i = p0 - 1; i + 1 < static_cast<int64_t>(full.size()); ++i) {
                // log softmax of row i at the realized next token
                double mx = -INFINITY;
                for (int64_t j = 0; j < cfg.vocab; ++j) mx = std::max(mx, logits.at(i * cfg.vocab + j));
                double z = 0.0;
                for (int64_t j = 0; j < cfg.vocab; ++j) z += std::exp(logits.at(i * cfg.vocab + j) - mx);
                score += logits.at(i * cfg.vocab + full[i + 1]) - (std::log(z) + mx);
            }
            scores.push_back(score);
        }
        return scores;
    }

    static constexpr int kIgnoreId = -100;
};

} // namespace lion::model
