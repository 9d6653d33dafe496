#pragma once

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "lion/eval.hpp"

namespace lion::cli {

namespace detail {

inline uint64_t default_seed() {
    if (const char* env = std::getenv("LION_SEED")) {
        try {
            return std::stoull(env);
        } catch (...) {
            throw ContractError("LION_SEED is not an unsigned integer");
        }
    }
    return 0;
}

inline std::vector<data::Subtype> parse_subtypes(const std::string& csv) {
    std::vector<data::Subtype> out;
    std::string cur;
    std::istringstream is(csv);
    while (std::getline(is, cur, ','))
        if (!cur.empty()) out.push_back(data::subtype_from_name(cur));
    if (out.empty()) throw ContractError("no subtypes given");
    return out;
}

inline void echo_config(const std::string& cmd, const nlohmann::ordered_json& j) {
    std::cout << cmd << " config: " << j.dump() << "\n";
}

struct ModelFlags {
    model::ModelConfig cfg;
    void attach(CLI::App* app) {
        app->add_option("--d-model", cfg.d_model, "model width");
        app->add_option("--heads", cfg.n_heads, "attention heads");
        app->add_option("--d-ffn", cfg.d_ffn, "FFN hidden width");
        app->add_option("--l-vis", cfg.l_vis, "vision encoder layers");
        app->add_option("--l-lm", cfg.l_lm, "LM layers");
        app->add_option("--queries", cfg.n_queries, "bridge query count");
        app->add_option("--grid-h", cfg.grid_h, "scene grid height");
        app->add_option("--grid-w", cfg.grid_w, "scene grid width");
        app->add_option("--min-objects", cfg.min_objects, "min objects per scene");
        app->add_option("--max-objects", cfg.max_objects, "max objects per scene");
        app->add_option("--max-extent", cfg.max_extent, "max object side length in cells");
        app->add_option("--r-adapter", cfg.r_adapter, "adapter bottleneck dim");
        app->add_option("--max-len", cfg.max_len, "max sequence length");
        app->add_option("--soft-prompt-len", cfg.soft_prompt_len, "soft prompt rows");
        app->add_flag("--shared-gates", cfg.shared_gates, "share router gates across LM layers");
        app->add_flag("--agg-input-proj", cfg.aggregator_input_proj, "project taps before aggregation");
    }
};

struct TrainFlags {
    int steps = 300;
    int batch = 8;
    double lr = 1e-3;
    double lr_min = -1.0; // default: lr * 0.05
    int warmup = 30;
    double agg_const_lr = -1.0; // >0 enables the constant-lr override for the aggregator
    std::string log_path;
    void attach(CLI::App* app) {
        app->add_option("--steps", steps, "optimizer steps");
        app->add_option("--batch", batch, "batch size");
        app->add_option("--lr", lr, "peak learning rate");
        app->add_option("--lr-min", lr_min, "final learning rate (default lr*0.05)");
        app->add_option("--warmup", warmup, "linear warmup steps");
        app->add_option("--agg-const-lr", agg_const_lr,
                        "constant learning rate for the vision aggregator group");
        app->add_option("--log", log_path, "metrics log path (JSONL)");
    }
    train::StageConfig stage_config(train::Stage st, uint64_t seed) const {
        train::StageConfig cfg;
        cfg.stage = st;
        cfg.steps = steps;
        cfg.batch_size = batch;
        cfg.lr_init = lr;
        cfg.lr_min = lr_min >= 0 ? lr_min : lr * 0.05;
        cfg.warmup_steps = std::min(warmup, std::max(0, steps - 1));
        cfg.seed = seed;
        if (agg_const_lr > 0) cfg.const_lr[model::Group::aggregator] = agg_const_lr;
        return cfg;
    }
};

inline train::MetricsSink metrics_sink(const std::string& path, std::ofstream& stream) {
    if (path.empty()) return nullptr;
    stream.open(path, std::ios::binary);
    if (!stream) throw ContractError("cannot open metrics log '" + path + "'");
    return [&stream](const train::MetricsRecord& r) {
        nlohmann::ordered_json j;
        j["step"] = r.step;
        j["stage"] = train::stage_name(r.stage);
        j["task"] = r.task;
        j["loss"] = r.loss;
        j["lr"] = r.lr;
        stream << j.dump() << "\n";
    };
}

} // namespace detail

/// Entry point behind the `lion` binary; split out so tests can drive it.
inline int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"desk-scale dual-level visual knowledge MLLM testbed"};
    app.require_subcommand(1);
    uint64_t seed = 0;
    bool seed_given = false;

    // --- gen-data -----------------------------------------------------------
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic instruction dataset");
    std::string gen_out;
    data::DatasetConfig gen_cfg;
    std::string gen_subtypes = "caption,vqa,vqg";
    std::string gen_partition = "all";
    int gen_template_index = -1;
    detail::ModelFlags gen_model; // scene geometry source
    gen->add_option("--seed", seed, "dataset seed")->each([&](const std::string&) { seed_given = true; });
    gen->add_option("--out", gen_out, "output JSONL path")->required();
    gen->add_option("--scenes", gen_cfg.n_scenes, "number of scenes");
    gen->add_option("--subtypes", gen_subtypes, "comma list of caption,vqa,vqg,rec,reg");
    gen->add_option("--partition", gen_partition, "all|train|heldout");
    gen->add_flag("--with-tags", gen_cfg.with_tags, "attach tag-provider tags");
    gen->add_option("--noise-rate", gen_cfg.tag_noise_rate, "tag corruption probability");
    gen->add_option("--template-index", gen_template_index, "fixed template index (default: seeded draw)");
    gen->add_flag("--single-object", gen_cfg.only_single_object, "keep only single-object scenes");
    gen_model.attach(gen);

    // --- bootstrap ------------------------------------------------------------
    auto* boot = app.add_subcommand("bootstrap", "pretrain the toy LM on synthetic text, then freeze it");
    std::string boot_out;
    detail::ModelFlags boot_model;
    detail::TrainFlags boot_train;
    boot->add_option("--seed", seed, "init + stream seed")->each([&](const std::string&) { seed_given = true; });
    boot->add_option("--out", boot_out, "output checkpoint")->required();
    boot_model.attach(boot);
    boot_train.attach(boot);

    // --- train ----------------------------------------------------------------
    auto* tr = app.add_subcommand("train", "run one instruction-tuning stage");
    std::string tr_stage = "s1", tr_init, tr_out, tr_data_image, tr_data_region, tr_tag_mode = "auto";
    bool tr_s3_bridge = false;
    int tr_mix_image = 1, tr_mix_region = 1;
    detail::TrainFlags tr_train;
    tr->add_option("--stage", tr_stage, "s1|s2|s3|single")->required();
    tr->add_option("--init", tr_init, "input checkpoint")->required();
    tr->add_option("--out", tr_out, "output checkpoint")->required();
    tr->add_option("--data-image", tr_data_image, "image-level dataset (JSONL)");
    tr->add_option("--data-region", tr_data_region, "region-level dataset (JSONL)");
    tr->add_option("--tag-mode", tr_tag_mode, "none|soft|hard|auto (auto: soft for s3/single)");
    tr->add_flag("--s3-train-bridge", tr_s3_bridge, "include the bridge in stage 3 training");
    tr->add_option("--mix-image", tr_mix_image, "image samples per interleave cycle");
    tr->add_option("--mix-region", tr_mix_region, "region samples per interleave cycle");
    tr->add_option("--seed", seed, "stream seed")->each([&](const std::string&) { seed_given = true; });
    tr_train.attach(tr);

    // --- eval -------------------------------------------------------------------
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    std::string ev_ckpt, ev_data, ev_task = "rec", ev_tag_mode = "none", ev_report;
    int ev_max_new = 32;
    ev->add_option("--ckpt", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--data", ev_data, "dataset JSONL")->required();
    ev->add_option("--task", ev_task, "rec|caption|vqa|vqa-rank|vqa-mrr");
    ev->add_option("--tag-mode", ev_tag_mode, "none|soft|hard");
    ev->add_option("--max-new", ev_max_new, "max generated tokens");
    ev->add_option("--report", ev_report, "per-sample report path (JSONL)");
    ev->add_option("--seed", seed, "echoed seed")->each([&](const std::string&) { seed_given = true; });

    // --- render-template ---------------------------------------------------------
    auto* rt = app.add_subcommand("render-template", "render an instruction template");
    std::string rt_subtype, rt_expr, rt_question, rt_answer, rt_bbox, rt_tags;
    int rt_index = -1;
    rt->add_option("--subtype", rt_subtype, "caption|vqa|vqg|rec|reg|tag|tag-hard")->required();
    rt->add_option("--index", rt_index, "template index (default: seeded draw)");
    rt->add_option("--expr", rt_expr, "{expr} slot");
    rt->add_option("--question", rt_question, "{Question} slot");
    rt->add_option("--answer", rt_answer, "{Answer} slot");
    rt->add_option("--bbox", rt_bbox, "{BBox} slot");
    rt->add_option("--tags", rt_tags, "comma list for tag instructions");
    rt->add_option("--seed", seed, "template draw seed")->each([&](const std::string&) { seed_given = true; });

    // --- inspect-checkpoint ---------------------------------------------------------
    auto* insp = app.add_subcommand("inspect-checkpoint", "validate and summarize a checkpoint");
    std::string insp_ckpt;
    insp->add_option("--ckpt", insp_ckpt, "checkpoint path")->required();

    // --- conflict -------------------------------------------------------------------
    auto* cf = app.add_subcommand("conflict", "stage-wise vs single-stage comparison (or soft-prompt arm)");
    std::string cf_out_dir = ".", cf_experiment = "stagewise";
    detail::ModelFlags cf_model;
    eval::ExperimentBudget cf_budget;
    int cf_train_scenes = 48, cf_heldout = 32;
    double cf_tag_noise = 0.5;
    cf->add_option("--seed", seed, "experiment seed")->each([&](const std::string&) { seed_given = true; });
    cf->add_option("--out-dir", cf_out_dir, "work directory for checkpoints and reports");
    cf->add_option("--experiment", cf_experiment, "stagewise|soft-prompt");
    cf->add_option("--bootstrap-steps", cf_budget.bootstrap_steps, "LM bootstrap steps");
    cf->add_option("--s1-steps", cf_budget.s1_steps, "stage 1 steps");
    cf->add_option("--s2-steps", cf_budget.s2_steps, "stage 2 steps");
    cf->add_option("--s3-steps", cf_budget.s3_steps, "stage 3 steps");
    cf->add_option("--single-steps", cf_budget.single_steps, "single-stage steps (-1: matched)");
    cf->add_option("--batch", cf_budget.batch, "batch size");
    cf->add_option("--lr-bootstrap", cf_budget.lr_bootstrap, "bootstrap peak lr");
    cf->add_option("--lr-stage", cf_budget.lr_stage, "stage 1/2/single peak lr");
    cf->add_option("--lr-s3", cf_budget.lr_s3, "stage 3 peak lr");
    cf->add_option("--warmup", cf_budget.warmup, "warmup steps");
    cf->add_option("--train-scenes", cf_train_scenes, "training scenes per stream");
    cf->add_option("--heldout-scenes", cf_heldout, "held-out scenes per metric");
    cf->add_option("--tag-noise", cf_tag_noise, "tag noise rate (soft-prompt experiment)");
    cf_model.attach(cf);

    std::vector<const char*> argv;
    argv.push_back("lion");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        std::cout << app.help() << "\n";
        return 0;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n" << app.help() << "\n";
        return 2;
    }
    if (!seed_given) seed = detail::default_seed();

    try {
        if (gen->parsed()) {
            gen_cfg.seed = seed;
            gen_cfg.subtypes = detail::parse_subtypes(gen_subtypes);
            gen_cfg.scene = gen_model.cfg.scene_config();
            gen_cfg.partition = gen_partition == "all"     ? data::ScenePartition::all
                                : gen_partition == "train" ? data::ScenePartition::train
                                : gen_partition == "heldout"
                                    ? data::ScenePartition::heldout
                                    : throw ContractError("unknown partition '" + gen_partition + "'");
            if (gen_template_index >= 0) gen_cfg.template_index = gen_template_index;
            nlohmann::ordered_json echo{{"seed", seed},       {"out", gen_out},
                                        {"scenes", gen_cfg.n_scenes}, {"subtypes", gen_subtypes},
                                        {"partition", gen_partition}, {"with_tags", gen_cfg.with_tags},
                                        {"noise_rate", gen_cfg.tag_noise_rate}};
            detail::echo_config("gen-data", echo);
            data::BuildStats stats;
            auto samples = data::generate_dataset(gen_cfg, &stats);
            data::write_dataset(gen_out, samples);
            std::cout << "wrote " << samples.size() << " samples to " << gen_out << "\n";
            if (stats.rec_skipped_ambiguous > 0)
                std::cout << "skipped " << stats.rec_skipped_ambiguous
                          << " REC samples with ambiguous referents\n";
            std::cout << "dataset hash: " << std::hex << data::file_hash(gen_out) << std::dec << "\n";
            return 0;
        }

        if (boot->parsed()) {
            boot_model.cfg.init_seed = seed;
            model::Model m = model::Model::init(boot_model.cfg);
            train::StageConfig cfg = boot_train.stage_config(train::Stage::bootstrap, seed + 1);
            nlohmann::ordered_json echo{{"seed", seed}, {"out", boot_out}, {"steps", cfg.steps},
                                        {"batch", cfg.batch_size}, {"lr", cfg.lr_init}};
            echo["model"] = boot_model.cfg.to_json();
            detail::echo_config("bootstrap", echo);
            std::ofstream log_stream;
            auto sink = detail::metrics_sink(boot_train.log_path, log_stream);
            double last_loss = 0.0;
            train::MetricsSink wrap = [&](const train::MetricsRecord& r) {
                last_loss = r.loss;
                if (sink) sink(r);
            };
            train::run_stage(m, cfg, {}, wrap);
            train::save_checkpoint(boot_out, m, Rng(seed), "bootstrap");
            std::cout << "final text loss: " << last_loss << "\n";
            std::cout << "checkpoint hash: " << std::hex << m.store.content_hash() << std::dec << "\n";
            return 0;
        }

        if (tr->parsed()) {
            train::Stage st = train::stage_from_name(tr_stage);
            if (st == train::Stage::bootstrap)
                throw ContractError("use the bootstrap subcommand for the bootstrap stage");
            train::LoadedCheckpoint lc = train::load_checkpoint(tr_init);
            std::string need = train::stage_prerequisite(st);
            if (lc.stage != need)
                throw ContractError("stage " + tr_stage + " requires a '" + need +
                                    "' checkpoint, got '" + lc.stage + "'");
            train::TaskStreams streams;
            auto split_streams = [&streams](const std::vector<data::InstructionSample>& all) {
                for (const auto& s : all)
                    (s.task() == moa::TaskType::image_level ? streams.image : streams.region).push_back(s);
            };
            if (!tr_data_image.empty()) split_streams(data::load_dataset(tr_data_image));
            if (!tr_data_region.empty()) split_streams(data::load_dataset(tr_data_region));
            train::StageConfig cfg = tr_train.stage_config(st, seed + 17);
            cfg.s3_train_bridge = tr_s3_bridge;
            cfg.mix_image = tr_mix_image;
            cfg.mix_region = tr_mix_region;
            bool mixed_stage = st == train::Stage::s3 || st == train::Stage::single;
            cfg.tag_mode = tr_tag_mode == "auto"
                               ? (mixed_stage ? model::TagMode::soft : model::TagMode::none)
                               : model::tag_mode_from_name(tr_tag_mode);
            nlohmann::ordered_json echo{{"seed", seed},   {"stage", tr_stage},
                                        {"init", tr_init}, {"out", tr_out},
                                        {"steps", cfg.steps}, {"batch", cfg.batch_size},
                                        {"lr", cfg.lr_init},  {"tag_mode", model::tag_mode_name(cfg.tag_mode)}};
            detail::echo_config("train", echo);
            std::ofstream log_stream;
            auto sink = detail::metrics_sink(tr_train.log_path, log_stream);
            train::run_stage(lc.model, cfg, streams, sink);
            train::save_checkpoint(tr_out, lc.model, Rng(seed), tr_stage);
            std::cout << "checkpoint hash: " << std::hex << lc.model.store.content_hash() << std::dec
                      << "\n";
            return 0;
        }

        if (ev->parsed()) {
            train::LoadedCheckpoint lc = train::load_checkpoint(ev_ckpt);
            auto ds = data::load_dataset(ev_data);
            eval::EvalConfig cfg{eval::eval_task_from_name(ev_task),
                                 model::tag_mode_from_name(ev_tag_mode), ev_max_new};
            nlohmann::ordered_json echo{{"seed", seed}, {"ckpt", ev_ckpt},     {"data", ev_data},
                                        {"task", ev_task}, {"tag_mode", ev_tag_mode}, {"max_new", ev_max_new}};
            detail::echo_config("eval", echo);
            eval::EvalReport rep = eval::run_eval(lc.model, ds, cfg);
            if (!ev_report.empty()) rep.write(ev_report);
            std::cout << rep.task << " " << rep.metric << ": " << rep.value << " over " << rep.n_samples
                      << " samples\n";
            return 0;
        }

        if (rt->parsed()) {
            std::vector<std::string> tags;
            if (!rt_tags.empty()) {
                std::istringstream is(rt_tags);
                std::string cur;
                while (std::getline(is, cur, ',')) tags.push_back(cur);
            }
            if (rt_subtype == "tag") {
                std::cout << data::render_tag_instruction(tags) << "\n";
                return 0;
            }
            if (rt_subtype == "tag-hard") {
                std::cout << data::render_tag_instruction_hard(tags) << "\n";
                return 0;
            }
            data::Subtype st = data::subtype_from_name(rt_subtype);
            std::map<std::string, std::string> slots;
            if (!rt_expr.empty()) slots["expr"] = rt_expr;
            if (!rt_question.empty()) slots["Question"] = rt_question;
            if (!rt_answer.empty()) slots["Answer"] = rt_answer;
            if (!rt_bbox.empty()) slots["BBox"] = rt_bbox;
            if (rt_index >= 0) {
                std::cout << data::render_template(st, slots, rt_index) << "\n";
            } else {
                Rng rng(seed);
                std::cout << data::render_template(st, slots, rng) << "\n";
            }
            return 0;
        }

        if (insp->parsed()) {
            train::LoadedCheckpoint lc = train::load_checkpoint(insp_ckpt);
            std::cout << "stage: " << lc.stage << "\n";
            std::cout << "rng: " << lc.rng.state() << "\n";
            std::cout << "config: " << lc.model.cfg.to_json().dump() << "\n";
            size_t n_params = 0;
            std::map<std::string, int64_t> by_group;
            for (const auto& [name, e] : lc.model.store.entries()) {
                n_params += e.tensor.data().size();
                by_group[model::group_name(e.group)] += e.tensor.numel();
            }
            std::cout << "tensors: " << lc.model.store.entries().size() << ", parameters: " << n_params
                      << "\n";
            for (const auto& [g, n] : by_group) std::cout << "  " << g << ": " << n << "\n";
            std::cout << "content hash: " << std::hex << lc.model.store.content_hash() << std::dec << "\n";
            return 0;
        }

        if (cf->parsed()) {
            cf_model.cfg.init_seed = seed;
            if (cf_experiment == "stagewise") {
                eval::ConflictConfig cfg;
                cfg.seed = seed;
                cfg.model = cf_model.cfg;
                cfg.budget = cf_budget;
                cfg.n_train_scenes = cf_train_scenes;
                cfg.n_heldout_scenes = cf_heldout;
                nlohmann::ordered_json echo{{"seed", seed},
                                            {"experiment", cf_experiment},
                                            {"s1_steps", cf_budget.s1_steps},
                                            {"s2_steps", cf_budget.s2_steps},
                                            {"s3_steps", cf_budget.s3_steps},
                                            {"single_steps", cf_budget.resolved_single_steps()},
                                            {"batch", cf_budget.batch}};
                detail::echo_config("conflict", echo);
                eval::ConflictReport rep = eval::conflict_experiment(cfg, cf_out_dir);
                std::ofstream out(cf_out_dir + "/conflict_report.json", std::ios::binary);
                out << rep.to_json().dump(2) << "\n";
                std::cout << rep.to_json().dump(2) << "\n";
                std::cout << "rec margin (stagewise - single): " << rep.rec_margin << "\n";
                return 0;
            }
            if (cf_experiment == "soft-prompt") {
                eval::SoftPromptConfig cfg;
                cfg.seed = seed;
                cfg.model = cf_model.cfg;
                cfg.budget = cf_budget;
                cfg.n_train_scenes = cf_train_scenes;
                cfg.n_heldout_scenes = cf_heldout;
                cfg.tag_noise = cf_tag_noise;
                nlohmann::ordered_json echo{{"seed", seed},
                                            {"experiment", cf_experiment},
                                            {"tag_noise", cf_tag_noise},
                                            {"s3_steps", cf_budget.s3_steps},
                                            {"batch", cf_budget.batch}};
                detail::echo_config("conflict", echo);
                eval::SoftPromptReport rep = eval::soft_prompt_experiment(cfg, cf_out_dir);
                std::ofstream out(cf_out_dir + "/soft_prompt_report.json", std::ios::binary);
                out << rep.to_json().dump(2) << "\n";
                std::cout << rep.to_json().dump(2) << "\n";
                return 0;
            }
            throw ContractError("unknown experiment '" + cf_experiment + "'");
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand executed\n";
    return 2;
}

} // namespace lion::cli
