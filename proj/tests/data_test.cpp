#include "lion/data.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

using namespace lion;
using namespace lion::data;

TEST(BboxCodec, ReproducesMixedPrecisionSample) {
    BBox b{0.525, 0.0, 0.675, 0.394};
    EXPECT_EQ(serialize_bbox(b), "[0.525,0.0,0.675,0.394]");
}

TEST(BboxCodec, RoundTripWithinHalfThousandth) {
    Rng rng(17);
    for (int i = 0; i < 500; ++i) {
        double x0 = rng.next_uniform() * 0.9;
        double y0 = rng.next_uniform() * 0.9;
        BBox b{x0, y0, x0 + 0.05 + rng.next_uniform() * (1.0 - x0 - 0.05),
               y0 + 0.05 + rng.next_uniform() * (1.0 - y0 - 0.05)};
        BBox r = parse_bbox(serialize_bbox(b));
        EXPECT_LE(std::abs(r.x_min - b.x_min), 5e-4);
        EXPECT_LE(std::abs(r.y_min - b.y_min), 5e-4);
        EXPECT_LE(std::abs(r.x_max - b.x_max), 5e-4);
        EXPECT_LE(std::abs(r.y_max - b.y_max), 5e-4);
    }
}

TEST(BboxCodec, ParseErrors) {
    EXPECT_THROW(parse_bbox("[0.2,0.2,0.1,0.9]"), ParseError);     // inverted box
    EXPECT_THROW(parse_bbox("[0.1,0.2,0.3]"), ParseError);         // missing coordinate
    EXPECT_THROW(parse_bbox("[0.1,abc,0.3,0.4]"), ParseError);     // non-numeric
    EXPECT_THROW(parse_bbox("no box here"), ParseError);
    try {
        parse_bbox("xx[0.2,0.2,0.1,0.9]");
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_NE(std::string(e.what()).find("position"), std::string::npos);
    }
    // parse accepts any precision and optional spaces
    BBox b = parse_bbox("the region [0.12345, 0.2,0.98765,0.75 ] please");
    EXPECT_DOUBLE_EQ(b.x_min, 0.12345);
    EXPECT_DOUBLE_EQ(b.y_max, 0.75);
}

TEST(Templates, RecSampleMatchesPaperQuestion) {
    std::string got = render_template(Subtype::rec, {{"expr", "a glass of beer"}}, 2);
    EXPECT_EQ(got, "How can I locate a glass of beer in the image? Please provide the coordinates.");
}

TEST(Templates, RegRowAndSlotlessCaption) {
    std::string reg = render_template(Subtype::reg, {{"BBox", "[0.525,0.0,0.675,0.394]"}}, 0);
    EXPECT_EQ(reg,
              "What are the unique characteristics of the rectangular section [0.525,0.0,0.675,0.394] "
              "in image?");
    EXPECT_EQ(render_template(Subtype::caption, {}, 2), "Please provide a short depiction of the picture.");
}

TEST(Templates, MissingSlotNamesThePlaceholder) {
    try {
        render_template(Subtype::rec, {}, 0);
        FAIL() << "expected TemplateError";
    } catch (const TemplateError& e) {
        EXPECT_NE(std::string(e.what()).find("expr"), std::string::npos);
    }
    EXPECT_THROW(render_template(Subtype::rec, {{"expr", "x"}}, 99), TemplateError);
}

TEST(Templates, SeededDrawIsDeterministic) {
    Rng a(5), b(5);
    for (int i = 0; i < 20; ++i)
        EXPECT_EQ(render_template(Subtype::vqa, {{"Question", "Q?"}}, a),
                  render_template(Subtype::vqa, {{"Question", "Q?"}}, b));
}

TEST(TagInstruction, WordingAndHintMarker) {
    std::string s = render_tag_instruction({"dog", "frisbee"});
    EXPECT_EQ(s, "According to <hint>, you are allowed to use or partially use the following tags: "
                 "dog, frisbee");
    EXPECT_EQ(render_tag_instruction({}),
              "According to <hint>, you are allowed to use or partially use the following tags:");
    Tokenizer tok;
    auto ids = tok.encode(s);
    EXPECT_EQ(std::count(ids.begin(), ids.end(), Tokenizer::kHint), 1);
    std::string hard = render_tag_instruction_hard({"dog"});
    EXPECT_EQ(hard, "You are allowed to use or partially use the following tags: dog");
    EXPECT_EQ(std::count_if(hard.begin(), hard.end(), [](char c) { return c == '<'; }), 0);
}

TEST(TagProvider, NoiseExtremes) {
    SyntheticScene scene = gen_scene(11);
    ASSERT_GE(scene.objects.size(), 1u);
    Rng rng(3);
    EXPECT_EQ(tag_provider(scene, 0.0, rng), scene_tags(scene));
    auto corrupted = tag_provider(scene, 1.0, rng);
    auto truth = scene_tags(scene);
    for (size_t i = 0; i < truth.size(); ++i) EXPECT_NE(corrupted[i], truth[i]);
    EXPECT_THROW(tag_provider(scene, 1.5, rng), ContractError);
}

TEST(TagProvider, EmpiricalCorruptionRate) {
    SyntheticScene scene = gen_scene(23, {4, 4, 3, 3, 1});
    auto truth = scene_tags(scene);
    Rng rng(7);
    int64_t total = 0, corrupted = 0;
    for (int i = 0; i < 10000; ++i) {
        auto tags = tag_provider(scene, 0.3, rng);
        for (size_t j = 0; j < truth.size(); ++j) {
            ++total;
            if (tags[j] != truth[j]) ++corrupted;
        }
    }
    double rate = static_cast<double>(corrupted) / total;
    EXPECT_NEAR(rate, 0.3, 0.02);
}

TEST(Scenes, DeterministicAndWellFormed) {
    SyntheticScene a = gen_scene(42), b = gen_scene(42);
    ASSERT_EQ(a.objects.size(), b.objects.size());
    for (size_t i = 0; i < a.objects.size(); ++i) {
        EXPECT_EQ(a.objects[i].box, b.objects[i].box);
        EXPECT_NO_THROW(validate_bbox(a.objects[i].box));
    }
    // raster order
    for (size_t i = 1; i < a.objects.size(); ++i) {
        EXPECT_TRUE(a.objects[i - 1].box.y_min < a.objects[i].box.y_min ||
                    (a.objects[i - 1].box.y_min == a.objects[i].box.y_min &&
                     a.objects[i - 1].box.x_min <= a.objects[i].box.x_min));
    }
}

TEST(BuildSamples, RecAndRegTargetsByConstruction) {
    SceneConfig cfg{4, 4, 1, 1, 2};
    SyntheticScene scene = gen_scene(7, cfg);
    ASSERT_EQ(scene.objects.size(), 1u);
    Rng rng(1);
    auto samples = build_samples(scene, {Subtype::rec, Subtype::reg, Subtype::caption}, rng);
    ASSERT_EQ(samples.size(), 3u);
    EXPECT_EQ(samples[0].target, serialize_bbox(scene.objects[0].box));
    ASSERT_TRUE(samples[0].gt_bbox.has_value());
    EXPECT_EQ(samples[1].target, object_phrase(scene.objects[0]));
    EXPECT_NE(samples[1].instruction.find(serialize_bbox(scene.objects[0].box)), std::string::npos);
    EXPECT_NE(samples[2].target.find(object_phrase(scene.objects[0])), std::string::npos);
}

TEST(BuildSamples, RecRegDuality) {
    Rng rng(9);
    SceneConfig cfg{4, 4, 1, 1, 2};
    for (uint64_t seed = 0; seed < 20; ++seed) {
        SyntheticScene scene = gen_scene(seed, cfg);
        if (scene.objects.empty()) continue;
        auto samples = build_samples(scene, {Subtype::rec, Subtype::reg}, rng);
        ASSERT_EQ(samples.size(), 2u);
        BBox from_rec = parse_bbox(samples[0].target);
        BBox from_reg = parse_bbox(samples[1].instruction);
        EXPECT_EQ(serialize_bbox(from_rec), serialize_bbox(from_reg));
    }
}

TEST(BuildSamples, AmbiguousReferentSkipped) {
    // Find a scene with two identical color+shape objects and nothing else.
    bool found = false;
    Rng rng(2);
    for (uint64_t seed = 0; seed < 4000 && !found; ++seed) {
        SyntheticScene s = gen_scene(seed, {4, 4, 2, 2, 1});
        if (s.objects.size() == 2 && s.objects[0].shape == s.objects[1].shape &&
            s.objects[0].color == s.objects[1].color) {
            BuildStats stats;
            auto samples = build_samples(s, {Subtype::rec}, rng, &stats);
            EXPECT_TRUE(samples.empty());
            EXPECT_EQ(stats.rec_skipped_ambiguous, 1);
            found = true;
        }
    }
    EXPECT_TRUE(found) << "no all-ambiguous scene in the probe range";
}

TEST(BuildSamples, SameSeedSameSamples) {
    auto run = []() {
        Rng rng(5);
        SyntheticScene s = gen_scene(12);
        auto samples = build_samples(s, {Subtype::caption, Subtype::vqa, Subtype::vqg}, rng);
        std::string cat;
        for (const auto& x : samples) cat += x.instruction + "|" + x.target + "\n";
        return cat;
    };
    EXPECT_EQ(run(), run());
}

TEST(Tokenizer, RoundTripAndErrors) {
    Tokenizer tok;
    std::string s = "[0.5,0.5,0.9,0.9]";
    EXPECT_EQ(tok.decode(tok.encode(s)), s);
    EXPECT_TRUE(tok.encode("").empty());
    EXPECT_THROW(tok.encode("caf\xc3\xa9"), ContractError);
    std::string with_hint = "see <hint> here";
    auto ids = tok.encode(with_hint);
    EXPECT_EQ(std::count(ids.begin(), ids.end(), Tokenizer::kHint), 1);
    EXPECT_EQ(tok.decode(ids), with_hint);
}

TEST(Tokenizer, CoversEveryTemplateAndEvalInstruction) {
    Tokenizer tok;
    std::map<std::string, std::string> slots{{"Question", "What shape is the red object?"},
                                             {"Answer", "square"},
                                             {"expr", "a glass of beer"},
                                             {"BBox", "[0.525,0.0,0.675,0.394]"},
                                             {"History", "Q: hi? A: hello."}};
    for (Subtype st : {Subtype::caption, Subtype::vqa, Subtype::vqg, Subtype::rec, Subtype::reg})
        for (size_t i = 0; i < templates_for(st).size(); ++i)
            EXPECT_NO_THROW(tok.encode(render_template(st, slots, static_cast<int>(i))));
    for (const auto& [name, tpl] : eval_instructions()) EXPECT_NO_THROW(tok.encode(fill_template(tpl, slots)));
    EXPECT_NO_THROW(tok.encode(render_tag_instruction({"dog", "red"})));
}

TEST(Dataset, FileRoundTripAndStableHash) {
    DatasetConfig cfg;
    cfg.seed = 3;
    cfg.n_scenes = 12;
    cfg.subtypes = {Subtype::caption, Subtype::vqa, Subtype::rec};
    cfg.with_tags = true;
    auto samples = generate_dataset(cfg);
    ASSERT_FALSE(samples.empty());

    auto tmp = std::filesystem::temp_directory_path();
    std::string p1 = (tmp / "lion_ds1.jsonl").string();
    std::string p2 = (tmp / "lion_ds2.jsonl").string();
    write_dataset(p1, samples);
    write_dataset(p2, generate_dataset(cfg));
    EXPECT_EQ(file_hash(p1), file_hash(p2));

    auto loaded = load_dataset(p1);
    ASSERT_EQ(loaded.size(), samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        EXPECT_EQ(loaded[i].instruction, samples[i].instruction);
        EXPECT_EQ(loaded[i].target, samples[i].target);
        EXPECT_EQ(loaded[i].subtype, samples[i].subtype);
        EXPECT_EQ(loaded[i].tags, samples[i].tags);
        EXPECT_EQ(loaded[i].scene_seed, samples[i].scene_seed);
        EXPECT_EQ(loaded[i].gt_bbox.has_value(), samples[i].gt_bbox.has_value());
    }
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST(Dataset, PartitionsAreDisjointByContent) {
    DatasetConfig train_cfg, held_cfg;
    train_cfg.seed = held_cfg.seed = 5;
    train_cfg.n_scenes = held_cfg.n_scenes = 20;
    train_cfg.partition = ScenePartition::train;
    held_cfg.partition = ScenePartition::heldout;
    auto tr = generate_dataset(train_cfg);
    auto he = generate_dataset(held_cfg);
    for (const auto& a : tr)
        for (const auto& b : he)
            EXPECT_FALSE(scene_content_hash(gen_scene(a.scene_seed)) ==
                         scene_content_hash(gen_scene(b.scene_seed)));
}

TEST(SceneFeatures, DeterministicSignatures) {
    SyntheticScene s = gen_scene(77);
    Tensor f1 = scene_features(s, 16);
    Tensor f2 = scene_features(s, 16);
    EXPECT_EQ(f1.data(), f2.data());
    EXPECT_EQ(f1.shape(), (Shape{16, 16}));
}
