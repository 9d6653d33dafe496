#include "lion/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace lion;

namespace {

std::string tmp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST(Cli, UnknownSubcommandAndFlagExitTwo) {
    EXPECT_EQ(cli::run_cli({"no-such-command"}), 2);
    EXPECT_EQ(cli::run_cli({"gen-data", "--out", tmp_path("x.jsonl"), "--bogus-flag"}), 2);
    EXPECT_EQ(cli::run_cli({}), 2);
}

TEST(Cli, GenDataIsDeterministic) {
    std::string p1 = tmp_path("lion_cli_a.jsonl"), p2 = tmp_path("lion_cli_b.jsonl");
    ASSERT_EQ(cli::run_cli({"gen-data", "--seed", "5", "--out", p1, "--scenes", "6"}), 0);
    ASSERT_EQ(cli::run_cli({"gen-data", "--seed", "5", "--out", p2, "--scenes", "6"}), 0);
    EXPECT_EQ(data::file_hash(p1), data::file_hash(p2));
    std::string p3 = tmp_path("lion_cli_c.jsonl");
    ASSERT_EQ(cli::run_cli({"gen-data", "--seed", "6", "--out", p3, "--scenes", "6"}), 0);
    EXPECT_NE(data::file_hash(p1), data::file_hash(p3));
    for (const auto& p : {p1, p2, p3}) std::remove(p.c_str());
}

TEST(Cli, RenderTemplateMatchesPaperSample) {
    testing::internal::CaptureStdout();
    ASSERT_EQ(cli::run_cli({"render-template", "--subtype", "rec", "--index", "2", "--expr",
                            "a glass of beer"}),
              0);
    std::string out = testing::internal::GetCapturedStdout();
    EXPECT_EQ(out, "How can I locate a glass of beer in the image? Please provide the coordinates.\n");
}

TEST(Cli, InspectRejectsTruncatedCheckpoint) {
    model::ModelConfig mc;
    mc.d_model = 8;
    mc.n_heads = 2;
    mc.d_ffn = 12;
    mc.l_lm = 1;
    mc.n_queries = 2;
    mc.grid_h = 2;
    mc.grid_w = 2;
    mc.r_adapter = 2;
    mc.d_proj_hidden = 8;
    mc.max_len = 64;
    model::Model m = model::Model::init(mc);
    std::string good = tmp_path("lion_cli_good.ckpt"), bad = tmp_path("lion_cli_trunc.ckpt");
    train::save_checkpoint(good, m, Rng(1), "bootstrap");
    {
        std::ifstream in(good, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::ofstream out(bad, std::ios::binary);
        out.write(all.data(), static_cast<std::streamsize>(all.size() / 2));
    }
    EXPECT_EQ(cli::run_cli({"inspect-checkpoint", "--ckpt", good}), 0);
    EXPECT_NE(cli::run_cli({"inspect-checkpoint", "--ckpt", bad}), 0);
    EXPECT_NE(cli::run_cli({"inspect-checkpoint", "--ckpt", tmp_path("does_not_exist.ckpt")}), 0);
    for (const auto& p : {good, bad}) std::remove(p.c_str());
}

TEST(Cli, TrainRejectsWrongPrerequisiteStage) {
    model::ModelConfig mc;
    mc.d_model = 8;
    mc.n_heads = 2;
    mc.d_ffn = 12;
    mc.l_lm = 1;
    mc.n_queries = 2;
    mc.grid_h = 2;
    mc.grid_w = 2;
    mc.r_adapter = 2;
    mc.d_proj_hidden = 8;
    mc.max_len = 128;
    model::Model m = model::Model::init(mc);
    std::string boot = tmp_path("lion_cli_boot.ckpt");
    train::save_checkpoint(boot, m, Rng(1), "bootstrap");
    std::string ds = tmp_path("lion_cli_reg.jsonl");
    data::DatasetConfig dc;
    dc.seed = 2;
    dc.n_scenes = 2;
    dc.subtypes = {data::Subtype::rec, data::Subtype::reg};
    dc.scene = mc.scene_config();
    data::write_dataset(ds, data::generate_dataset(dc));
    // s2 demands an s1 checkpoint
    EXPECT_EQ(cli::run_cli({"train", "--stage", "s2", "--init", boot, "--out", tmp_path("o.ckpt"),
                            "--data-region", ds, "--steps", "1", "--batch", "1", "--warmup", "0"}),
              1);
    for (const auto& p : {boot, ds}) std::remove(p.c_str());
}

TEST(Cli, SeedEnvVariableIsOverriddenByFlag) {
    setenv("LION_SEED", "777", 1);
    std::string p1 = tmp_path("lion_cli_env.jsonl"), p2 = tmp_path("lion_cli_env2.jsonl");
    testing::internal::CaptureStdout();
    ASSERT_EQ(cli::run_cli({"gen-data", "--out", p1, "--scenes", "2"}), 0);
    std::string out_env = testing::internal::GetCapturedStdout();
    EXPECT_NE(out_env.find("\"seed\":777"), std::string::npos);
    testing::internal::CaptureStdout();
    ASSERT_EQ(cli::run_cli({"gen-data", "--seed", "3", "--out", p2, "--scenes", "2"}), 0);
    std::string out_flag = testing::internal::GetCapturedStdout();
    EXPECT_NE(out_flag.find("\"seed\":3"), std::string::npos);
    unsetenv("LION_SEED");
    for (const auto& p : {p1, p2}) std::remove(p.c_str());
}
