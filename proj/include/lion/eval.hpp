#pragma once

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "lion/training.hpp"

namespace lion::eval {

// ---------------------------------------------------------------------------
// metrics
// ---------------------------------------------------------------------------

inline double iou(const data::BBox& a, const data::BBox& b) {
    double ix = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    double iy = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    double inter = ix * iy;
    double area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
    double area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
    double uni = area_a + area_b - inter;
    return uni > 0.0 ? inter / uni : 0.0;
}

/// Fraction of predictions that parse as a box and overlap ground truth with
/// IoU >= 0.5. Malformed predictions count as incorrect, never as errors.
inline double rec_accuracy(const std::vector<std::string>& predictions,
                           const std::vector<data::BBox>& gts) {
    if (predictions.size() != gts.size())
        throw ContractError("rec_accuracy: predictions and ground truths differ in length");
    if (predictions.empty()) throw ContractError("rec_accuracy: empty batch");
    int correct = 0;
    for (size_t i = 0; i < predictions.size(); ++i) {
        try {
            if (iou(data::parse_bbox(predictions[i]), gts[i]) >= 0.5) ++correct;
        } catch (const data::ParseError&) {
        } catch (const ContractError&) {
        }
    }
    return static_cast<double>(correct) / predictions.size();
}

/// Mean reciprocal rank over 1-based correct positions.
inline double mrr(const std::vector<int>& positions) {
    if (positions.empty()) throw ContractError("mrr: empty rank list");
    double acc = 0.0;
    for (int p : positions) {
        if (p < 1) throw ContractError("mrr: positions are 1-based");
        acc += 1.0 / p;
    }
    return acc / positions.size();
}

/// 1-based rank of `target` under descending score; ties resolve toward the
/// lower candidate index.
inline int rank_of(const std::vector<double>& scores, size_t target) {
    int rank = 1;
    for (size_t j = 0; j < scores.size(); ++j) {
        if (j == target) continue;
        if (scores[j] > scores[target] || (scores[j] == scores[target] && j < target)) ++rank;
    }
    return rank;
}

inline std::string normalize_answer(const std::string& s) {
    std::string out;
    bool pending_space = false;
    for (char c : s) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!out.empty()) pending_space = true;
            continue;
        }
        if (pending_space) {
            out += ' ';
            pending_space = false;
        }
        out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

// ---------------------------------------------------------------------------
// evaluation driver
// ---------------------------------------------------------------------------

enum class EvalTask { rec, caption, vqa, vqa_rank, vqa_mrr };

inline const char* eval_task_name(EvalTask t) {
    switch (t) {
        case EvalTask::rec: return "rec";
        case EvalTask::caption: return "caption";
        case EvalTask::vqa: return "vqa";
        case EvalTask::vqa_rank: return "vqa-rank";
        case EvalTask::vqa_mrr: return "vqa-mrr";
    }
    return "?";
}

inline EvalTask eval_task_from_name(const std::string& s) {
    for (EvalTask t : {EvalTask::rec, EvalTask::caption, EvalTask::vqa, EvalTask::vqa_rank,
                       EvalTask::vqa_mrr})
        if (s == eval_task_name(t)) return t;
    throw ContractError("unknown eval task '" + s + "'");
}

struct EvalConfig {
    EvalTask task = EvalTask::rec;
    model::TagMode tag_mode = model::TagMode::none;
    int max_new = 32;
};

struct SampleRecord {
    int idx = 0;
    std::string prediction;
    std::optional<data::BBox> parsed;
    double score = 0.0; // metric contribution: 0/1 for accuracies, 1/rank for MRR
    bool correct = false;
};

struct EvalReport {
    std::string task;
    std::string metric;
    int n_samples = 0;
    double value = 0.0;
    std::vector<SampleRecord> records;

    /// Aggregate recomputed from per-sample records; must equal `value`.
    double recompute() const {
        double acc = 0.0;
        for (const auto& r : records) acc += r.score;
        return records.empty() ? 0.0 : acc / records.size();
    }

    std::string to_jsonl() const {
        std::string out;
        for (const auto& r : records) {
            nlohmann::ordered_json j;
            j["idx"] = r.idx;
            j["prediction"] = r.prediction;
            if (r.parsed)
                j["bbox"] = {r.parsed->x_min, r.parsed->y_min, r.parsed->x_max, r.parsed->y_max};
            j["score"] = r.score;
            j["correct"] = r.correct;
            out += j.dump() + "\n";
        }
        nlohmann::ordered_json s;
        s["task"] = task;
        s["metric"] = metric;
        s["n_samples"] = n_samples;
        s["value"] = value;
        out += s.dump() + "\n";
        return out;
    }

    void write(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw ContractError("eval report: cannot open '" + path + "'");
        out << to_jsonl();
    }
};

namespace detail {

inline data::Subtype required_subtype(EvalTask t) {
    switch (t) {
        case EvalTask::rec: return data::Subtype::rec;
        case EvalTask::caption: return data::Subtype::caption;
        default: return data::Subtype::vqa;
    }
}

} // namespace detail

/// Evaluates a model over a dataset: REC by greedy decoding + IoU@0.5,
/// caption/VQA by normalized exact match of the greedy decode, ranked VQA by
/// candidate log-likelihood scoring (top-1 or MRR). Never aborts on malformed
/// model output.
inline EvalReport run_eval(const model::Model& m, const std::vector<data::InstructionSample>& dataset,
                           const EvalConfig& cfg) {
    if (dataset.empty()) throw ContractError("run_eval: empty dataset");
    data::Subtype want = detail::required_subtype(cfg.task);
    for (const auto& s : dataset)
        if (s.subtype != want)
            throw ContractError(std::string("run_eval: dataset subtype '") + data::subtype_name(s.subtype) +
                                "' does not match task '" + eval_task_name(cfg.task) + "'");

    EvalReport rep;
    rep.task = eval_task_name(cfg.task);
    rep.n_samples = static_cast<int>(dataset.size());

    std::vector<std::string> candidates;
    if (cfg.task == EvalTask::vqa_rank || cfg.task == EvalTask::vqa_mrr) {
        for (const auto& s : dataset) candidates.push_back(s.target);
        std::sort(candidates.begin(), candidates.end());
        candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    }

    for (size_t i = 0; i < dataset.size(); ++i) {
        const auto& s = dataset[i];
        SampleRecord r;
        r.idx = static_cast<int>(i);
        switch (cfg.task) {
            case EvalTask::rec: {
                auto ids = m.greedy_decode(s, moa::TaskType::region_level, cfg.max_new, cfg.tag_mode);
                r.prediction = m.decode_to_text(ids);
                try {
                    data::BBox parsed = data::parse_bbox(r.prediction);
                    r.parsed = parsed;
                    r.correct = s.gt_bbox && iou(parsed, *s.gt_bbox) >= 0.5;
                } catch (const data::ParseError&) {
                } catch (const ContractError&) {
                }
                r.score = r.correct ? 1.0 : 0.0;
                break;
            }
            case EvalTask::caption:
            case EvalTask::vqa: {
                auto ids = m.greedy_decode(s, moa::TaskType::image_level, cfg.max_new, cfg.tag_mode);
                r.prediction = m.decode_to_text(ids);
                r.correct = normalize_answer(r.prediction) == normalize_answer(s.target);
                r.score = r.correct ? 1.0 : 0.0;
                break;
            }
            case EvalTask::vqa_rank:
            case EvalTask::vqa_mrr: {
                auto scores = m.score_candidates(s, candidates, moa::TaskType::image_level, cfg.tag_mode);
                size_t gt = std::find(candidates.begin(), candidates.end(), s.target) - candidates.begin();
                int best = 0;
                for (size_t j = 1; j < scores.size(); ++j)
                    if (scores[j] > scores[best]) best = static_cast<int>(j);
                r.prediction = candidates[best];
                int rank = rank_of(scores, gt);
                r.correct = rank == 1;
                r.score = cfg.task == EvalTask::vqa_mrr ? 1.0 / rank : (r.correct ? 1.0 : 0.0);
                break;
            }
        }
        rep.records.push_back(std::move(r));
    }
    rep.metric = cfg.task == EvalTask::rec        ? "iou@0.5-accuracy"
                 : cfg.task == EvalTask::vqa_mrr  ? "mrr"
                 : cfg.task == EvalTask::vqa_rank ? "top1-accuracy"
                                                  : "exact-match-accuracy";
    rep.value = rep.recompute();
    return rep;
}

// ---------------------------------------------------------------------------
// directional experiments
// ---------------------------------------------------------------------------

struct ExperimentBudget {
    int bootstrap_steps = 400;
    int s1_steps = 160;
    int s2_steps = 320;
    int s3_steps = 160;
    int single_steps = -1; // -1 -> s1+s2+s3 (matched budget)
    int batch = 8;
    double lr_bootstrap = 3e-3;
    double lr_stage = 2e-3;
    double lr_s3 = 1e-3;
    int warmup = 10;

    int total_stage_steps() const { return s1_steps + s2_steps + s3_steps; }
    int resolved_single_steps() const { return single_steps < 0 ? total_stage_steps() : single_steps; }

    void validate() const {
        if (resolved_single_steps() != total_stage_steps())
            throw ContractError("experiment: single-stage budget must match s1+s2+s3 steps");
    }
};

struct ConflictConfig {
    uint64_t seed = 0;
    model::ModelConfig model;
    ExperimentBudget budget;
    int n_train_scenes = 48;
    int n_heldout_scenes = 32;
    std::optional<int> region_template_index = 0; // pinned grounding template
};

struct ArmMetrics {
    double image_acc = 0.0;
    double rec_acc = 0.0;
};

struct ConflictReport {
    ArmMetrics stagewise, single_arm, no_router;
    double rec_margin = 0.0;   // stagewise - single
    double image_margin = 0.0; // stagewise - single
    double router_image_margin = 0.0; // stagewise - no_router

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["stagewise"] = {{"image_acc", stagewise.image_acc}, {"rec_acc", stagewise.rec_acc}};
        j["single"] = {{"image_acc", single_arm.image_acc}, {"rec_acc", single_arm.rec_acc}};
        j["no_router"] = {{"image_acc", no_router.image_acc}, {"rec_acc", no_router.rec_acc}};
        j["rec_margin"] = rec_margin;
        j["image_margin"] = image_margin;
        j["router_image_margin"] = router_image_margin;
        return j;
    }
};

namespace detail {

struct ConflictData {
    train::TaskStreams streams;
    std::vector<data::InstructionSample> heldout_vqa;
    std::vector<data::InstructionSample> heldout_rec;
};

inline ConflictData conflict_data(const ConflictConfig& cfg, bool with_tags = false,
                                  double tag_noise = 0.3) {
    if (cfg.model.scene_config().max_extent != 1 && cfg.region_template_index)
        ; // no constraint; both knobs are independent
    ConflictData d;
    data::DatasetConfig base;
    base.scene = cfg.model.scene_config();
    base.with_tags = with_tags;
    base.tag_noise_rate = tag_noise;

    data::DatasetConfig img = base;
    img.seed = cfg.seed * 4 + 1;
    img.n_scenes = cfg.n_train_scenes;
    img.subtypes = {data::Subtype::caption, data::Subtype::vqa, data::Subtype::vqg};
    img.partition = data::ScenePartition::train;
    d.streams.image = data::generate_dataset(img);

    data::DatasetConfig reg = base;
    reg.seed = cfg.seed * 4 + 2;
    reg.n_scenes = cfg.n_train_scenes;
    reg.subtypes = {data::Subtype::rec, data::Subtype::reg};
    reg.partition = data::ScenePartition::train;
    reg.only_single_object = true; // grounding stream: locate the lone object
    reg.template_index = cfg.region_template_index;
    d.streams.region = data::generate_dataset(reg);

    data::DatasetConfig hv = base;
    hv.seed = cfg.seed * 4 + 3;
    hv.n_scenes = cfg.n_heldout_scenes;
    hv.subtypes = {data::Subtype::vqa};
    hv.partition = data::ScenePartition::heldout;
    d.heldout_vqa = data::generate_dataset(hv);

    data::DatasetConfig hr = base;
    hr.seed = cfg.seed * 4 + 4;
    hr.n_scenes = cfg.n_heldout_scenes;
    hr.subtypes = {data::Subtype::rec};
    hr.partition = data::ScenePartition::heldout;
    hr.only_single_object = true;
    hr.template_index = cfg.region_template_index;
    d.heldout_rec = data::generate_dataset(hr);
    return d;
}

inline train::StageConfig stage_cfg(train::Stage st, int steps, int batch, double lr, int warmup,
                                    uint64_t seed, model::TagMode tag_mode = model::TagMode::none) {
    train::StageConfig c;
    c.stage = st;
    c.steps = steps;
    c.batch_size = batch;
    c.lr_init = lr;
    c.lr_min = lr * 0.05;
    c.warmup_steps = std::min(warmup, std::max(0, steps - 1));
    c.seed = seed;
    c.tag_mode = tag_mode;
    return c;
}

inline ArmMetrics eval_arm(const model::Model& m, const ConflictData& d,
                           model::TagMode tag_mode = model::TagMode::none) {
    ArmMetrics a;
    EvalConfig vqa_cfg{EvalTask::vqa, tag_mode, 16};
    EvalConfig rec_cfg{EvalTask::rec, tag_mode, 28};
    a.image_acc = run_eval(m, d.heldout_vqa, vqa_cfg).value;
    a.rec_acc = run_eval(m, d.heldout_rec, rec_cfg).value;
    return a;
}

} // namespace detail

/// Bootstraps one frozen LM, then trains the stage-wise arm, the
/// matched-budget single-stage arm and the no-router stage-3 variant from the
/// same initialization, reporting held-out VQA accuracy and REC IoU@0.5.
/// work_dir holds the intermediate checkpoints.
inline ConflictReport conflict_experiment(const ConflictConfig& cfg, const std::string& work_dir,
                                          const train::MetricsSink& sink = nullptr) {
    cfg.budget.validate();
    detail::ConflictData d = detail::conflict_data(cfg);
    const auto& b = cfg.budget;

    model::Model base = model::Model::init(cfg.model);
    if (b.bootstrap_steps > 0)
        train::run_stage(base, detail::stage_cfg(train::Stage::bootstrap, b.bootstrap_steps, b.batch,
                                                 b.lr_bootstrap, b.warmup, cfg.seed + 101),
                         {}, sink);
    std::string boot_path = work_dir + "/conflict_bootstrap.ckpt";
    std::string s2_path = work_dir + "/conflict_s2.ckpt";
    train::save_checkpoint(boot_path, base, Rng(cfg.seed), "bootstrap");

    ConflictReport rep;

    { // arm B: stage-wise with router
        model::Model m = train::load_checkpoint(boot_path).model;
        if (b.s1_steps > 0)
            train::run_stage(m, detail::stage_cfg(train::Stage::s1, b.s1_steps, b.batch, b.lr_stage,
                                                  b.warmup, cfg.seed + 201),
                             d.streams, sink);
        if (b.s2_steps > 0)
            train::run_stage(m, detail::stage_cfg(train::Stage::s2, b.s2_steps, b.batch, b.lr_stage,
                                                  b.warmup, cfg.seed + 202),
                             d.streams, sink);
        train::save_checkpoint(s2_path, m, Rng(cfg.seed), "s2");
        if (b.s3_steps > 0)
            train::run_stage(m, detail::stage_cfg(train::Stage::s3, b.s3_steps, b.batch, b.lr_s3,
                                                  b.warmup, cfg.seed + 203),
                             d.streams, sink);
        rep.stagewise = detail::eval_arm(m, d);
    }
    { // arm A: single stage, matched budget
        model::Model m = train::load_checkpoint(boot_path).model;
        int steps = b.resolved_single_steps();
        if (steps > 0)
            train::run_stage(m, detail::stage_cfg(train::Stage::single, steps, b.batch, b.lr_stage,
                                                  b.warmup, cfg.seed + 301),
                             d.streams, sink);
        rep.single_arm = detail::eval_arm(m, d);
    }
    { // arm C: stage-wise without the router (plain adapter sum in stage 3)
        model::Model m = b.s1_steps + b.s2_steps > 0 ? train::load_checkpoint(s2_path).model
                                                     : train::load_checkpoint(boot_path).model;
        m.cfg.router_mode = model::RouterMode::plain_sum;
        if (b.s3_steps > 0)
            train::run_stage(m, detail::stage_cfg(train::Stage::s3, b.s3_steps, b.batch, b.lr_s3,
                                                  b.warmup, cfg.seed + 203),
                             d.streams, sink);
        rep.no_router = detail::eval_arm(m, d);
    }

    rep.rec_margin = rep.stagewise.rec_acc - rep.single_arm.rec_acc;
    rep.image_margin = rep.stagewise.image_acc - rep.single_arm.image_acc;
    rep.router_image_margin = rep.stagewise.image_acc - rep.no_router.image_acc;
    return rep;
}

struct SoftPromptConfig {
    uint64_t seed = 0;
    model::ModelConfig model;
    ExperimentBudget budget;
    int n_train_scenes = 48;
    int n_heldout_scenes = 32;
    double tag_noise = 0.5;
};

struct SoftPromptReport {
    double soft_image_acc = 0.0;
    double hard_image_acc = 0.0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["soft_image_acc"] = soft_image_acc;
        j["hard_image_acc"] = hard_image_acc;
        j["margin"] = soft_image_acc - hard_image_acc;
        return j;
    }
};

/// Shared bootstrap/s1/s2, then two stage-3 arms over tagged streams with
/// noisy tags: one with the soft-prompted tag sentence, one with hard tags.
/// Both evaluate image-level accuracy on held-out scenes with equally noisy
/// tags present.
inline SoftPromptReport soft_prompt_experiment(const SoftPromptConfig& cfg, const std::string& work_dir,
                                               const train::MetricsSink& sink = nullptr) {
    ConflictConfig cc;
    cc.seed = cfg.seed;
    cc.model = cfg.model;
    cc.budget = cfg.budget;
    cc.n_train_scenes = cfg.n_train_scenes;
    cc.n_heldout_scenes = cfg.n_heldout_scenes;
    detail::ConflictData d = detail::conflict_data(cc, true, cfg.tag_noise);
    const auto& b = cfg.budget;

    model::Model base = model::Model::init(cfg.model);
    if (b.bootstrap_steps > 0)
        train::run_stage(base, detail::stage_cfg(train::Stage::bootstrap, b.bootstrap_steps, b.batch,
                                                 b.lr_bootstrap, b.warmup, cfg.seed + 111),
                         {}, sink);
    if (b.s1_steps > 0)
        train::run_stage(base, detail::stage_cfg(train::Stage::s1, b.s1_steps, b.batch, b.lr_stage,
                                                 b.warmup, cfg.seed + 211),
                         d.streams, sink);
    if (b.s2_steps > 0)
        train::run_stage(base, detail::stage_cfg(train::Stage::s2, b.s2_steps, b.batch, b.lr_stage,
                                                 b.warmup, cfg.seed + 212),
                         d.streams, sink);
    std::string s2_path = work_dir + "/softprompt_s2.ckpt";
    train::save_checkpoint(s2_path, base, Rng(cfg.seed), "s2");

    SoftPromptReport rep;
    for (model::TagMode mode : {model::TagMode::soft, model::TagMode::hard}) {
        model::Model m = train::load_checkpoint(s2_path).model;
        if (b.s3_steps > 0)
            train::run_stage(m, detail::stage_cfg(train::Stage::s3, b.s3_steps, b.batch, b.lr_s3,
                                                  b.warmup, cfg.seed + 213, mode),
                             d.streams, sink);
        double acc = detail::eval_arm(m, d, mode).image_acc;
        (mode == model::TagMode::soft ? rep.soft_image_acc : rep.hard_image_acc) = acc;
    }
    return rep;
}

} // namespace lion::eval
