#pragma once

#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "lion/model.hpp"

namespace lion::train {

struct DivergenceError : std::runtime_error {
    explicit DivergenceError(const std::string& msg) : std::runtime_error("divergence: " + msg) {}
};

struct CheckpointError : std::runtime_error {
    enum class Kind { io, corrupt_header, truncated_payload, version_mismatch };
    Kind kind;
    CheckpointError(Kind k, const std::string& msg) : std::runtime_error("checkpoint: " + msg), kind(k) {}
};

// ---------------------------------------------------------------------------
// stages and their trainable sets
// ---------------------------------------------------------------------------

enum class Stage { bootstrap, s1, s2, s3, single };

inline const char* stage_name(Stage s) {
    switch (s) {
        case Stage::bootstrap: return "bootstrap";
        case Stage::s1: return "s1";
        case Stage::s2: return "s2";
        case Stage::s3: return "s3";
        case Stage::single: return "single";
    }
    return "?";
}

inline Stage stage_from_name(const std::string& s) {
    for (Stage st : {Stage::bootstrap, Stage::s1, Stage::s2, Stage::s3, Stage::single})
        if (s == stage_name(st)) return st;
    throw ContractError("unknown stage '" + s + "'");
}

/// Checkpoint provenance required before running a stage ("init" = fresh).
inline std::string stage_prerequisite(Stage s) {
    switch (s) {
        case Stage::bootstrap: return "init";
        case Stage::s1: return "bootstrap";
        case Stage::s2: return "s1";
        case Stage::s3: return "s2";
        case Stage::single: return "bootstrap";
    }
    return "init";
}

/// Which parameter groups each stage updates. The LM base and the vision
/// encoder stay frozen everywhere past bootstrap; stage 3 trains the mixture
/// (both adapters, the gates, the soft prompt) and optionally the bridge.
inline std::set<model::Group> trainable_set(Stage s, bool s3_train_bridge = false) {
    using model::Group;
    switch (s) {
        case Stage::bootstrap: return {Group::lm_base, Group::embeddings};
        case Stage::s1: return {Group::bridge, Group::adapter_img};
        case Stage::s2: return {Group::aggregator, Group::mlp_proj, Group::adapter_reg};
        case Stage::s3: {
            std::set<Group> g{Group::adapter_img, Group::adapter_reg, Group::gates, Group::soft_prompt};
            if (s3_train_bridge) g.insert(Group::bridge);
            return g;
        }
        case Stage::single:
            return {Group::bridge,      Group::adapter_img, Group::aggregator, Group::mlp_proj,
                    Group::adapter_reg, Group::gates,       Group::soft_prompt};
    }
    return {};
}

// ---------------------------------------------------------------------------
// schedule and optimizer
// ---------------------------------------------------------------------------

struct StageConfig {
    Stage stage = Stage::s1;
    int steps = 300;
    int batch_size = 8;
    double lr_init = 1e-3;
    double lr_min = 1e-5;
    int warmup_steps = 30;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.05;
    std::map<model::Group, double> const_lr; // per-group constant-lr overrides
    model::TagMode tag_mode = model::TagMode::none;
    int mix_image = 1;  // sample-level interleave ratio in mixed stages
    int mix_region = 1;
    bool s3_train_bridge = false;
    uint64_t seed = 0;

    void validate() const {
        if (steps < 1) throw ContractError("stage config: steps must be >= 1");
        if (lr_min > lr_init) throw ContractError("stage config: lr_min must not exceed lr_init");
        if (warmup_steps < 0 || warmup_steps >= steps)
            throw ContractError("stage config: warmup_steps must be < steps");
        if (batch_size < 1) throw ContractError("stage config: batch_size must be >= 1");
        if (mix_image < 0 || mix_region < 0 || mix_image + mix_region == 0)
            throw ContractError("stage config: bad interleave ratio");
    }
};

inline constexpr double kWarmupFloor = 1e-8;

/// Linear warmup from 1e-8 to lr_init over warmup_steps, then cosine decay
/// to lr_min at the final step. Continuous at the warmup boundary.
inline double lr_at(int step, const StageConfig& cfg) {
    if (step < 0 || step >= cfg.steps) throw ContractError("lr_at: step outside schedule");
    if (step < cfg.warmup_steps)
        return kWarmupFloor + (cfg.lr_init - kWarmupFloor) * static_cast<double>(step) / cfg.warmup_steps;
    int64_t denom = std::max<int64_t>(1, static_cast<int64_t>(cfg.steps) - 1 - cfg.warmup_steps);
    double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(denom);
    return cfg.lr_min + (cfg.lr_init - cfg.lr_min) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

/// Decoupled-weight-decay Adam over the trainable entries of a ParamStore.
/// Missing grad buffers count as zero gradient (decay still applies), so a
/// trainable tensor untouched by the loss shrinks exactly like the reference
/// update. State is per-stage; optimizers are not carried across stages.
class AdamW {
public:
    explicit AdamW(const StageConfig& cfg)
        : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.eps), weight_decay_(cfg.weight_decay) {}
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void step(model::ParamStore& store, double lr, const std::map<model::Group, double>& const_lr = {},
              int step_index = 0) {
        ++t_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (auto& [name, e] : store.entries()) {
            if (!e.trainable) continue;
            auto& slot = slots_[name];
            auto& data = e.tensor.mutable_data();
            if (slot.m.empty()) {
                slot.m.assign(data.size(), 0.0);
                slot.v.assign(data.size(), 0.0);
            }
            const std::vector<double>* grad = e.tensor.has_grad() ? &e.tensor.grad() : nullptr;
            double group_lr = lr;
            auto it = const_lr.find(e.group);
            if (it != const_lr.end()) group_lr = it->second;
            for (size_t i = 0; i < data.size(); ++i) {
                double g = grad ? (*grad)[i] : 0.0;
                if (!std::isfinite(g))
                    throw DivergenceError("non-finite gradient in '" + name + "' at step " +
                                          std::to_string(step_index));
                slot.m[i] = beta1_ * slot.m[i] + (1.0 - beta1_) * g;
                slot.v[i] = beta2_ * slot.v[i] + (1.0 - beta2_) * g * g;
                double mhat = slot.m[i] / bc1;
                double vhat = slot.v[i] / bc2;
                data[i] -= group_lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * data[i]);
            }
        }
    }

private:
    struct Slot {
        std::vector<double> m, v;
    };
    double beta1_, beta2_, eps_, weight_decay_;
    std::map<std::string, Slot> slots_;
    int64_t t_ = 0;
};

// ---------------------------------------------------------------------------
// checkpoint I/O: text header + little-endian float64 payload
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointMagic = "LIONCKPT v1";

inline void save_checkpoint(const std::string& path, const model::Model& m, const Rng& rng,
                            const std::string& stage) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "' for writing");
    out << kCheckpointMagic << "\n";
    out << "stage " << stage << "\n";
    out << "rng " << rng.state() << "\n";
    out << "config " << m.cfg.to_json().dump() << "\n";
    out << "tensors " << m.store.entries().size() << "\n";
    size_t payload = 0;
    for (const auto& [name, e] : m.store.entries()) {
        out << "t " << name << " " << model::group_name(e.group) << " " << (e.trainable ? 1 : 0) << " "
            << e.tensor.ndim();
        for (int64_t d : e.tensor.shape()) out << " " << d;
        out << "\n";
        payload += e.tensor.data().size() * 8;
    }
    out << "payload " << payload << "\n";
    for (const auto& [name, e] : m.store.entries()) {
        for (double v : e.tensor.data()) {
            uint64_t bits;
            std::memcpy(&bits, &v, 8);
            char buf[8];
            for (int i = 0; i < 8; ++i) buf[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
            out.write(buf, 8);
        }
    }
    if (!out) throw CheckpointError(CheckpointError::Kind::io, "short write to '" + path + "'");
}

struct LoadedCheckpoint {
    model::Model model;
    Rng rng{0};
    std::string stage;
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot open '" + path + "'");
    auto bad = [&](const std::string& msg) {
        return CheckpointError(CheckpointError::Kind::corrupt_header, msg + " in '" + path + "'");
    };
    std::string line;
    if (!std::getline(in, line)) throw bad("empty file");
    if (line != kCheckpointMagic) {
        if (line.rfind("LIONCKPT", 0) == 0)
            throw CheckpointError(CheckpointError::Kind::version_mismatch,
                                  "format '" + line + "' not supported, need '" + kCheckpointMagic + "'");
        throw bad("bad magic");
    }
    LoadedCheckpoint out;
    uint64_t rng_state = 0;
    std::string config_json;
    size_t n_tensors = 0;
    if (!std::getline(in, line) || line.rfind("stage ", 0) != 0) throw bad("missing stage");
    out.stage = line.substr(6);
    if (!std::getline(in, line) || line.rfind("rng ", 0) != 0) throw bad("missing rng");
    try {
        rng_state = std::stoull(line.substr(4));
    } catch (...) {
        throw bad("unreadable rng state");
    }
    if (!std::getline(in, line) || line.rfind("config ", 0) != 0) throw bad("missing config");
    config_json = line.substr(7);
    if (!std::getline(in, line) || line.rfind("tensors ", 0) != 0) throw bad("missing tensor count");
    try {
        n_tensors = std::stoull(line.substr(8));
    } catch (...) {
        throw bad("unreadable tensor count");
    }

    model::ModelConfig cfg;
    try {
        cfg = model::ModelConfig::from_json(nlohmann::json::parse(config_json));
    } catch (const std::exception& e) {
        throw bad(std::string("unreadable config: ") + e.what());
    }
    out.model = model::Model::init(cfg);
    out.rng = Rng(rng_state);

    struct Row {
        std::string name;
        model::Group group;
        bool trainable;
        Shape shape;
    };
    std::vector<Row> rows;
    for (size_t i = 0; i < n_tensors; ++i) {
        if (!std::getline(in, line) || line.rfind("t ", 0) != 0) throw bad("missing tensor row");
        std::istringstream is(line.substr(2));
        Row r;
        std::string group;
        int trainable = 0, ndim = 0;
        if (!(is >> r.name >> group >> trainable >> ndim)) throw bad("unreadable tensor row");
        r.group = model::group_from_name(group);
        r.trainable = trainable != 0;
        for (int d = 0; d < ndim; ++d) {
            int64_t v;
            if (!(is >> v)) throw bad("unreadable tensor shape");
            r.shape.push_back(v);
        }
        rows.push_back(std::move(r));
    }
    if (!std::getline(in, line) || line.rfind("payload ", 0) != 0) throw bad("missing payload size");
    size_t payload = 0;
    try {
        payload = std::stoull(line.substr(8));
    } catch (...) {
        throw bad("unreadable payload size");
    }
    size_t expect = 0;
    for (const auto& r : rows) expect += static_cast<size_t>(shape_numel(r.shape)) * 8;
    if (payload != expect) throw bad("payload size disagrees with tensor rows");

    for (const auto& r : rows) {
        if (!out.model.store.contains(r.name)) throw bad("unexpected tensor '" + r.name + "'");
        auto& e = out.model.store.at(r.name);
        if (e.tensor.shape() != r.shape) throw bad("shape mismatch for '" + r.name + "'");
        if (e.group != r.group) throw bad("group mismatch for '" + r.name + "'");
        auto& data = e.tensor.mutable_data();
        std::vector<char> buf(data.size() * 8);
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (static_cast<size_t>(in.gcount()) != buf.size())
            throw CheckpointError(CheckpointError::Kind::truncated_payload,
                                  "payload ends inside '" + r.name + "' in '" + path + "'");
        for (size_t i = 0; i < data.size(); ++i) {
            uint64_t bits = 0;
            for (int b = 0; b < 8; ++b)
                bits |= static_cast<uint64_t>(static_cast<unsigned char>(buf[i * 8 + b])) << (8 * b);
            std::memcpy(&data[i], &bits, 8);
        }
        e.trainable = r.trainable;
        e.tensor.set_requires_grad(r.trainable);
    }
    if (in.peek() != EOF)
        throw CheckpointError(CheckpointError::Kind::truncated_payload,
                              "trailing bytes after payload in '" + path + "'");
    return out;
}

// ---------------------------------------------------------------------------
// bootstrap corpus
// ---------------------------------------------------------------------------

/// Text-only pretraining lines for the frozen LM: rendered instruction+target
/// pairs across every subtype, with occasional tag-sentence prefixes so the
/// tag grammar is in-distribution before stage 3. Lines that would overflow
/// the model context are resampled.
inline std::string bootstrap_text(const model::Model& m, Rng& rng) {
    data::SceneConfig sc = m.cfg.scene_config();
    static const std::vector<data::Subtype> all{data::Subtype::caption, data::Subtype::vqa,
                                                data::Subtype::vqg, data::Subtype::rec, data::Subtype::reg};
    for (int attempt = 0; attempt < 64; ++attempt) {
        data::SyntheticScene scene;
        while (scene.objects.empty()) scene = data::gen_scene(rng.next_u64(), sc);
        data::Subtype st = all[rng.next_below(all.size())];
        auto samples = data::build_samples(scene, {st}, rng);
        if (samples.empty()) samples = data::build_samples(scene, {data::Subtype::caption}, rng);
        const auto& s = samples[0];
        std::string text = s.instruction + " " + s.target;
        double u = rng.next_uniform();
        if (u < 0.3) {
            auto tags = data::tag_provider(scene, 0.3, rng);
            text = (u < 0.15 ? data::render_tag_instruction(tags)
                             : data::render_tag_instruction_hard(tags)) +
                   " " + text;
        }
        if (static_cast<int64_t>(m.tok.encode(text).size()) + 2 <= m.cfg.max_len) return text;
    }
    throw ContractError("bootstrap_text: cannot fit any sample into max_len " +
                        std::to_string(m.cfg.max_len));
}

// ---------------------------------------------------------------------------
// stage runner
// ---------------------------------------------------------------------------

struct TaskStreams {
    std::vector<data::InstructionSample> image;
    std::vector<data::InstructionSample> region;
};

struct MetricsRecord {
    int step = 0;
    Stage stage = Stage::s1;
    std::string task;
    double loss = 0.0;
    double lr = 0.0;
};

using MetricsSink = std::function<void(const MetricsRecord&)>;

/// Mean forward loss over a fixed batch; pure evaluation (no tape).
inline double mean_loss(const model::Model& m, const std::vector<data::InstructionSample>& batch,
                        model::TagMode mode = model::TagMode::none) {
    if (batch.empty()) throw ContractError("mean_loss: empty batch");
    NoGradGuard ng;
    double acc = 0.0;
    for (const auto& s : batch) acc += m.forward_loss(s, s.task(), mode).item();
    return acc / static_cast<double>(batch.size());
}

/// One instruction-tuning stage: applies the stage's freezing, then iterates
/// seeded mini-batches with per-sample gradient accumulation. Mixed stages
/// interleave image- and region-level samples inside each batch at the
/// configured ratio.
inline void run_stage(model::Model& m, const StageConfig& cfg, const TaskStreams& streams,
                      const MetricsSink& sink = nullptr) {
    cfg.validate();
    bool needs_image = cfg.stage == Stage::s1 || cfg.stage == Stage::s3 || cfg.stage == Stage::single;
    bool needs_region = cfg.stage == Stage::s2 || cfg.stage == Stage::s3 || cfg.stage == Stage::single;
    if (needs_image && streams.image.empty())
        throw ContractError("run_stage: stage consumes image-level samples but the stream is empty");
    if (needs_region && streams.region.empty())
        throw ContractError("run_stage: stage consumes region-level samples but the stream is empty");

    m.store.set_trainable_groups(trainable_set(cfg.stage, cfg.s3_train_bridge));
    AdamW opt(cfg);
    Rng rng(cfg.seed);

    for (int step = 0; step < cfg.steps; ++step) {
        double lr = lr_at(step, cfg);
        m.store.zero_grads();
        double image_sum = 0.0, region_sum = 0.0, text_sum = 0.0;
        int image_n = 0, region_n = 0, text_n = 0;
        double inv_b = 1.0 / cfg.batch_size;
        for (int b = 0; b < cfg.batch_size; ++b) {
            if (cfg.stage == Stage::bootstrap) {
                // Half text-only lines at random offsets, half full multimodal
                // samples (visual branches frozen at init) so the soon-frozen
                // attention learns to read prefix positions too.
                Tensor loss;
                if (rng.next_uniform() < 0.5) {
                    std::string text = bootstrap_text(m, rng);
                    int64_t len = static_cast<int64_t>(m.tok.encode(text).size()) + 2;
                    int64_t max_off = m.cfg.max_len - len;
                    if (max_off < 0) throw ContractError("run_stage: bootstrap text longer than max_len");
                    int64_t off = max_off == 0 ? 0 : static_cast<int64_t>(rng.next_below(max_off + 1));
                    loss = m.text_loss(text, off);
                } else {
                    data::SyntheticScene scene;
                    while (scene.objects.empty()) scene = data::gen_scene(rng.next_u64(), m.cfg.scene_config());
                    static const std::vector<data::Subtype> all{data::Subtype::caption, data::Subtype::vqa,
                                                                data::Subtype::vqg, data::Subtype::rec,
                                                                data::Subtype::reg};
                    auto samples = data::build_samples(scene, {all[rng.next_below(all.size())]}, rng);
                    if (samples.empty()) samples = data::build_samples(scene, {data::Subtype::caption}, rng);
                    loss = m.forward_loss(samples[0], samples[0].task(), model::TagMode::none, true);
                }
                scale(loss, inv_b).backward();
                text_sum += loss.item();
                ++text_n;
                continue;
            }
            bool pick_region;
            switch (cfg.stage) {
                case Stage::s1: pick_region = false; break;
                case Stage::s2: pick_region = true; break;
                default: {
                    int cycle = cfg.mix_image + cfg.mix_region;
                    pick_region = (b % cycle) >= cfg.mix_image;
                }
            }
            const auto& pool = pick_region ? streams.region : streams.image;
            const auto& sample = pool[rng.next_below(pool.size())];
            Tensor loss = m.forward_loss(sample, sample.task(), cfg.tag_mode);
            scale(loss, inv_b).backward();
            if (pick_region) {
                region_sum += loss.item();
                ++region_n;
            } else {
                image_sum += loss.item();
                ++image_n;
            }
        }
        opt.step(m.store, lr, cfg.const_lr, step);
        if (sink) {
            if (text_n) sink({step, cfg.stage, "text", text_sum / text_n, lr});
            if (image_n) sink({step, cfg.stage, "image", image_sum / image_n, lr});
            if (region_n) sink({step, cfg.stage, "region", region_sum / region_n, lr});
        }
    }
}

} // namespace lion::train
