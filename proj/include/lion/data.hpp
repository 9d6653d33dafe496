#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lion/adapters.hpp"
#include "lion/tensor.hpp"

namespace lion::data {

struct ParseError : std::runtime_error {
    explicit ParseError(const std::string& msg) : std::runtime_error("parse error: " + msg) {}
};

struct TemplateError : std::runtime_error {
    explicit TemplateError(const std::string& msg) : std::runtime_error("template error: " + msg) {}
};

// ---------------------------------------------------------------------------
// bounding boxes and their text form
// ---------------------------------------------------------------------------

struct BBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;
    bool operator==(const BBox&) const = default;
};

inline void validate_bbox(const BBox& b) {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(b.x_min) || !in_unit(b.y_min) || !in_unit(b.x_max) || !in_unit(b.y_max))
        throw ContractError("bbox: coordinates must lie in [0,1]");
    if (!(b.x_min < b.x_max) || !(b.y_min < b.y_max))
        throw ContractError("bbox: min must be strictly below max");
}

namespace detail {

// Three decimals, trailing zeros trimmed, at least one decimal digit kept:
// 0.0 -> "0.0", 0.5 -> "0.5", 0.525 -> "0.525".
inline std::string coord_str(double v) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%.3f", v);
    std::string s(buf);
    size_t dot = s.find('.');
    size_t end = s.size();
    while (end > dot + 2 && s[end - 1] == '0') --end;
    return s.substr(0, end);
}

} // namespace detail

/// "[x_min,y_min,x_max,y_max]" in the bracketed natural-language style.
inline std::string serialize_bbox(const BBox& b) {
    validate_bbox(b);
    return "[" + detail::coord_str(b.x_min) + "," + detail::coord_str(b.y_min) + "," +
           detail::coord_str(b.x_max) + "," + detail::coord_str(b.y_max) + "]";
}

/// Extracts the first bracketed 4-tuple of decimals from s and validates the
/// box invariants. Errors carry the byte position they were detected at.
inline BBox parse_bbox(const std::string& s) {
    size_t search_from = 0;
    std::string last_err = "no '[' found";
    size_t last_pos = 0;
    while (true) {
        size_t open = s.find('[', search_from);
        if (open == std::string::npos) break;
        size_t pos = open + 1;
        double vals[4];
        bool ok = true;
        for (int i = 0; i < 4 && ok; ++i) {
            while (pos < s.size() && s[pos] == ' ') ++pos;
            const char* start = s.c_str() + pos;
            char* end = nullptr;
            double v = std::strtod(start, &end);
            if (end == start) {
                last_err = "expected a decimal";
                last_pos = pos;
                ok = false;
                break;
            }
            pos += static_cast<size_t>(end - start);
            vals[i] = v;
            while (pos < s.size() && s[pos] == ' ') ++pos;
            char want = i < 3 ? ',' : ']';
            if (pos >= s.size() || s[pos] != want) {
                last_err = std::string("expected '") + want + "'";
                last_pos = pos;
                ok = false;
                break;
            }
            ++pos;
        }
        if (ok) {
            BBox b{vals[0], vals[1], vals[2], vals[3]};
            try {
                validate_bbox(b);
            } catch (const ContractError& e) {
                throw ParseError(std::string(e.what()) + " at position " + std::to_string(open));
            }
            return b;
        }
        search_from = open + 1;
        if (last_pos == 0) last_pos = open;
    }
    throw ParseError(last_err + " at position " + std::to_string(last_pos));
}

// ---------------------------------------------------------------------------
// task subtypes
// ---------------------------------------------------------------------------

enum class Subtype { caption, vqa, vqg, rec, reg };

inline const char* subtype_name(Subtype s) {
    switch (s) {
        case Subtype::caption: return "caption";
        case Subtype::vqa: return "vqa";
        case Subtype::vqg: return "vqg";
        case Subtype::rec: return "rec";
        case Subtype::reg: return "reg";
    }
    return "?";
}

inline Subtype subtype_from_name(const std::string& s) {
    if (s == "caption") return Subtype::caption;
    if (s == "vqa") return Subtype::vqa;
    if (s == "vqg") return Subtype::vqg;
    if (s == "rec") return Subtype::rec;
    if (s == "reg") return Subtype::reg;
    throw ContractError("unknown subtype '" + s + "'");
}

inline moa::TaskType subtype_task(Subtype s) {
    return (s == Subtype::rec || s == Subtype::reg) ? moa::TaskType::region_level
                                                    : moa::TaskType::image_level;
}

// ---------------------------------------------------------------------------
// instruction templates (training) and evaluation instructions
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& templates_for(Subtype s) {
    static const std::vector<std::string> vqa{
        "Given the image, answer the following question with no more than three words. {Question}",
        "Based on the image, respond to this question with a short answer: {Question}. Answer:",
        "Use the provided image to answer the question: {Question} Provide your answer as short as "
        "possible:",
        "What is the answer to the following question? \"{Question}\"",
        "The question \"{Question}\" can be answered using the image. A short answer is",
    };
    static const std::vector<std::string> vqg{
        "Based on the image, provide a question with the answer: {Answer}. Question:",
        "Given the visual representation, create a question for which the answer is \"{Answer}\".",
        "From the image provided, craft a question that leads to the reply: {Answer}. Question:",
        "Considering the picture, come up with a question where the answer is: {Answer}.",
        "Taking the image into account, generate an question that has the answer: {Answer}. Question:",
    };
    static const std::vector<std::string> caption{
        "Can you briefly explain what you see in the image?",
        "Could you use a few words to describe what you perceive in the photo?",
        "Please provide a short depiction of the picture.",
        "Using language, provide a short account of the image.",
        "Use a few words to illustrate what is happening in the picture.",
    };
    static const std::vector<std::string> rec{
        "Identify the position of {expr} in image and share its coordinates.",
        "I'd like to request the coordinates of {expr} within the photo.",
        "How can I locate {expr} in the image? Please provide the coordinates.",
        "I am interested in knowing the coordinates of {expr} in the picture.",
        "Assist me in locating the position of {expr} in the photograph and its bounding box "
        "coordinates.",
        "In the image, I need to find {expr} and know its coordinates. Can you please help?",
    };
    static const std::vector<std::string> reg{
        "What are the unique characteristics of the rectangular section {BBox} in image?",
        "Describe the novel qualities of the selected bounding box {BBox} in image.",
        "What sets the chosen region {BBox} in image apart from its surroundings?",
        "Provide a one-of-a-kind depiction for the area enclosed by {BBox} in image.",
        "How would you portray the unique features of the designated box {BBox} in image?",
        "Explain the distinguishing characteristics of the marked bounding box {BBox} in image.",
    };
    switch (s) {
        case Subtype::vqa: return vqa;
        case Subtype::vqg: return vqg;
        case Subtype::caption: return caption;
        case Subtype::rec: return rec;
        case Subtype::reg: return reg;
    }
    return caption;
}

/// Benchmark-style inference instructions, usable in place of the training
/// templates at evaluation time.
inline const std::vector<std::pair<std::string, std::string>>& eval_instructions() {
    static const std::vector<std::pair<std::string, std::string>> v{
        {"vqa", "Question: {Question} Short answer:"},
        {"caption", "A short image description:"},
        {"iconqa", "{Question}"},
        {"vsr", "Based on the image, is this statement true or false? \"{Question}\" Answer:"},
        {"visdial", "Dialog history: {History}\n Question: {Question} Short answer:"},
    };
    return v;
}

/// Exact slot substitution; placeholders are {word} spans. A slot missing
/// from `slots` raises a TemplateError naming the placeholder.
inline std::string fill_template(const std::string& tpl, const std::map<std::string, std::string>& slots) {
    std::string out;
    out.reserve(tpl.size());
    size_t i = 0;
    while (i < tpl.size()) {
        if (tpl[i] == '{') {
            size_t close = tpl.find('}', i);
            if (close == std::string::npos) throw TemplateError("unterminated placeholder");
            std::string key = tpl.substr(i + 1, close - i - 1);
            auto it = slots.find(key);
            if (it == slots.end()) throw TemplateError("missing slot '" + key + "'");
            out += it->second;
            i = close + 1;
        } else {
            out += tpl[i++];
        }
    }
    return out;
}

inline std::string render_template(Subtype s, const std::map<std::string, std::string>& slots, int index) {
    const auto& list = templates_for(s);
    if (index < 0 || index >= static_cast<int>(list.size()))
        throw TemplateError("template index " + std::to_string(index) + " out of range for " +
                            subtype_name(s));
    return fill_template(list[static_cast<size_t>(index)], slots);
}

inline std::string render_template(Subtype s, const std::map<std::string, std::string>& slots, Rng& rng) {
    const auto& list = templates_for(s);
    return fill_template(list[rng.next_below(list.size())], slots);
}

/// The reserved marker the tokenizer maps to the HINT token; the model swaps
/// its embedding for the trainable soft prompt.
inline constexpr const char* kHintMarker = "<hint>";

enum class TagPosition { prefix };

/// Soft-prompted tag instruction; the marker is substituted downstream.
inline std::string render_tag_instruction(const std::vector<std::string>& tags,
                                          TagPosition = TagPosition::prefix) {
    std::string out = "According to <hint>, you are allowed to use or partially use the following tags:";
    for (size_t i = 0; i < tags.size(); ++i) out += (i == 0 ? " " : ", ") + tags[i];
    return out;
}

/// Hard-tag variant: same sentence without the soft prompt slot.
inline std::string render_tag_instruction_hard(const std::vector<std::string>& tags) {
    std::string out = "You are allowed to use or partially use the following tags:";
    for (size_t i = 0; i < tags.size(); ++i) out += (i == 0 ? " " : ", ") + tags[i];
    return out;
}

// ---------------------------------------------------------------------------
// synthetic grounding world
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& color_words() {
    static const std::vector<std::string> v{"red", "green", "blue", "yellow"};
    return v;
}

inline const std::vector<std::string>& shape_words() {
    static const std::vector<std::string> v{"square", "circle", "triangle"};
    return v;
}

/// Distractor vocabulary for the tag stub; disjoint from scene attribute
/// words so a corrupted tag can never masquerade as a true one.
inline const std::vector<std::string>& distractor_words() {
    static const std::vector<std::string> v{"dog", "tree", "car", "cloud", "river", "chair", "kite", "boat"};
    return v;
}

struct SceneObject {
    int shape = 0; // index into shape_words()
    int color = 0; // index into color_words()
    BBox box;
};

struct SceneConfig {
    int grid_h = 4;
    int grid_w = 4;
    int min_objects = 1;
    int max_objects = 3;
    int max_extent = 2; // object side length in cells
};

struct SyntheticScene {
    uint64_t seed = 0;
    int grid_h = 4, grid_w = 4;
    std::vector<SceneObject> objects; // raster order (y, then x)
};

inline std::string object_phrase(const SceneObject& o) {
    return "a " + color_words()[o.color] + " " + shape_words()[o.shape];
}

/// Deterministic scene synthesis: non-overlapping axis-aligned objects on a
/// coarse grid, coordinates snapped to cell boundaries.
inline SyntheticScene gen_scene(uint64_t seed, const SceneConfig& cfg = {}) {
    if (cfg.min_objects < 1 || cfg.max_objects < cfg.min_objects)
        throw ContractError("gen_scene: bad object count range");
    Rng rng(seed);
    SyntheticScene scene;
    scene.seed = seed;
    scene.grid_h = cfg.grid_h;
    scene.grid_w = cfg.grid_w;
    int n = cfg.min_objects + static_cast<int>(rng.next_below(cfg.max_objects - cfg.min_objects + 1));
    std::vector<bool> occupied(static_cast<size_t>(cfg.grid_h) * cfg.grid_w, false);
    for (int obj = 0; obj < n; ++obj) {
        for (int attempt = 0; attempt < 32; ++attempt) {
            int w = 1 + static_cast<int>(rng.next_below(cfg.max_extent));
            int h = 1 + static_cast<int>(rng.next_below(cfg.max_extent));
            int r = static_cast<int>(rng.next_below(cfg.grid_h - h + 1));
            int c = static_cast<int>(rng.next_below(cfg.grid_w - w + 1));
            bool free = true;
            for (int rr = r; rr < r + h && free; ++rr)
                for (int cc = c; cc < c + w && free; ++cc) free = !occupied[rr * cfg.grid_w + cc];
            if (!free) continue;
            for (int rr = r; rr < r + h; ++rr)
                for (int cc = c; cc < c + w; ++cc) occupied[rr * cfg.grid_w + cc] = true;
            SceneObject o;
            o.shape = static_cast<int>(rng.next_below(shape_words().size()));
            o.color = static_cast<int>(rng.next_below(color_words().size()));
            o.box = {static_cast<double>(c) / cfg.grid_w, static_cast<double>(r) / cfg.grid_h,
                     static_cast<double>(c + w) / cfg.grid_w, static_cast<double>(r + h) / cfg.grid_h};
            scene.objects.push_back(o);
            break;
        }
    }
    std::stable_sort(scene.objects.begin(), scene.objects.end(), [](const SceneObject& a, const SceneObject& b) {
        return a.box.y_min != b.box.y_min ? a.box.y_min < b.box.y_min : a.box.x_min < b.box.x_min;
    });
    return scene;
}

inline uint64_t scene_content_hash(const SyntheticScene& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xff;
            h *= 0x100000001b3ULL;
        }
    };
    mix(static_cast<uint64_t>(s.objects.size()));
    for (const auto& o : s.objects) {
        mix(static_cast<uint64_t>(o.shape));
        mix(static_cast<uint64_t>(o.color));
        mix(static_cast<uint64_t>(o.box.x_min * 1e6));
        mix(static_cast<uint64_t>(o.box.y_min * 1e6));
        mix(static_cast<uint64_t>(o.box.x_max * 1e6));
        mix(static_cast<uint64_t>(o.box.y_max * 1e6));
    }
    return h;
}

/// Ground-truth tags: color and shape words of every object, raster order,
/// first occurrence kept.
inline std::vector<std::string> scene_tags(const SyntheticScene& s) {
    std::vector<std::string> tags;
    auto push = [&tags](const std::string& w) {
        if (std::find(tags.begin(), tags.end(), w) == tags.end()) tags.push_back(w);
    };
    for (const auto& o : s.objects) {
        push(color_words()[o.color]);
        push(shape_words()[o.shape]);
    }
    return tags;
}

/// Tag stub standing in for an off-the-shelf tagger: each true tag is
/// independently replaced by a distractor with probability noise_rate.
inline std::vector<std::string> tag_provider(const SyntheticScene& s, double noise_rate, Rng& rng) {
    if (noise_rate < 0.0 || noise_rate > 1.0) throw ContractError("tag_provider: noise_rate outside [0,1]");
    std::vector<std::string> tags = scene_tags(s);
    for (auto& t : tags)
        if (rng.next_uniform() < noise_rate)
            t = distractor_words()[rng.next_below(distractor_words().size())];
    return tags;
}

// ---------------------------------------------------------------------------
// instruction samples
// ---------------------------------------------------------------------------

struct InstructionSample {
    std::string instruction;
    std::string target;
    Subtype subtype = Subtype::caption;
    std::optional<BBox> gt_bbox;
    std::vector<std::string> tags;
    uint64_t scene_seed = 0;

    moa::TaskType task() const { return subtype_task(subtype); }
};

struct BuildStats {
    int rec_skipped_ambiguous = 0;
};

namespace detail {

inline std::string caption_text(const SyntheticScene& s) {
    std::string out;
    for (size_t i = 0; i < s.objects.size(); ++i) {
        if (i > 0) out += (i + 1 == s.objects.size()) ? " and " : ", ";
        out += object_phrase(s.objects[i]);
    }
    return out + ".";
}

struct QaPair {
    std::string question, answer;
};

inline std::vector<QaPair> qa_pairs(const SyntheticScene& s) {
    std::vector<QaPair> out;
    out.push_back({"How many objects are there in the image?", std::to_string(s.objects.size())});
    for (size_t si = 0; si < shape_words().size(); ++si) {
        int count = 0, color = -1;
        for (const auto& o : s.objects)
            if (o.shape == static_cast<int>(si)) { ++count; color = o.color; }
        if (count == 1)
            out.push_back({"What color is the " + shape_words()[si] + "?", color_words()[color]});
    }
    for (size_t ci = 0; ci < color_words().size(); ++ci) {
        int count = 0, shape = -1;
        for (const auto& o : s.objects)
            if (o.color == static_cast<int>(ci)) { ++count; shape = o.shape; }
        if (count == 1)
            out.push_back({"What shape is the " + color_words()[ci] + " object?", shape_words()[shape]});
    }
    return out;
}

inline bool referent_unambiguous(const SyntheticScene& s, size_t idx) {
    for (size_t i = 0; i < s.objects.size(); ++i)
        if (i != idx && s.objects[i].shape == s.objects[idx].shape &&
            s.objects[i].color == s.objects[idx].color)
            return false;
    return true;
}

} // namespace detail

/// One sample per requested subtype, template and referent drawn from rng.
/// REC referents that two identical objects would make ambiguous are skipped
/// (counted in stats) rather than emitted.
inline std::vector<InstructionSample> build_samples(const SyntheticScene& scene,
                                                    const std::vector<Subtype>& subtypes, Rng& rng,
                                                    BuildStats* stats = nullptr,
                                                    std::optional<int> template_index = std::nullopt) {
    if (subtypes.empty()) throw ContractError("build_samples: no subtypes requested");
    auto render = [&rng, &template_index](Subtype st, const std::map<std::string, std::string>& slots) {
        return template_index ? render_template(st, slots, *template_index)
                              : render_template(st, slots, rng);
    };
    std::vector<InstructionSample> out;
    for (Subtype st : subtypes) {
        InstructionSample s;
        s.subtype = st;
        s.scene_seed = scene.seed;
        switch (st) {
            case Subtype::caption: {
                s.instruction = render(st, {});
                s.target = detail::caption_text(scene);
                break;
            }
            case Subtype::vqa: {
                auto pairs = detail::qa_pairs(scene);
                const auto& qa = pairs[rng.next_below(pairs.size())];
                s.instruction = render(st, {{"Question", qa.question}});
                s.target = qa.answer;
                break;
            }
            case Subtype::vqg: {
                auto pairs = detail::qa_pairs(scene);
                const auto& qa = pairs[rng.next_below(pairs.size())];
                s.instruction = render(st, {{"Answer", qa.answer}});
                s.target = qa.question;
                break;
            }
            case Subtype::rec: {
                std::vector<size_t> usable;
                for (size_t i = 0; i < scene.objects.size(); ++i)
                    if (detail::referent_unambiguous(scene, i)) usable.push_back(i);
                if (usable.empty()) {
                    if (stats) ++stats->rec_skipped_ambiguous;
                    continue;
                }
                const auto& obj = scene.objects[usable[rng.next_below(usable.size())]];
                s.instruction = render(st, {{"expr", object_phrase(obj)}});
                s.target = serialize_bbox(obj.box);
                s.gt_bbox = obj.box;
                break;
            }
            case Subtype::reg: {
                const auto& obj = scene.objects[rng.next_below(scene.objects.size())];
                s.instruction = render(st, {{"BBox", serialize_bbox(obj.box)}});
                s.target = object_phrase(obj);
                s.gt_bbox = obj.box;
                break;
            }
        }
        if (s.target.empty()) throw ContractError("build_samples: empty target");
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------
// tokenizer: characters over printable ASCII + newline, four reserved ids
// ---------------------------------------------------------------------------

class Tokenizer {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kHint = 3;
    static constexpr int kReserved = 4;

    int vocab_size() const { return kReserved + 1 + (126 - 32 + 1); } // '\n' + ASCII 32..126

    int char_id(char c) const {
        if (c == '\n') return kReserved;
        if (c >= 32 && c <= 126) return kReserved + 1 + (c - 32);
        throw ContractError("tokenizer: unknown character U+" + std::to_string(static_cast<unsigned char>(c)));
    }

    /// Character-level encoding; occurrences of "<hint>" become the HINT id.
    std::vector<int> encode(const std::string& s) const {
        std::vector<int> ids;
        ids.reserve(s.size());
        size_t i = 0;
        const std::string marker = kHintMarker;
        while (i < s.size()) {
            if (s.compare(i, marker.size(), marker) == 0) {
                ids.push_back(kHint);
                i += marker.size();
            } else {
                ids.push_back(char_id(s[i]));
                ++i;
            }
        }
        return ids;
    }

    /// Inverse of encode on alphabet strings. PAD/BOS/EOS render as nothing,
    /// so arbitrary model output always decodes.
    std::string decode(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id == kPad || id == kBos || id == kEos) continue;
            if (id == kHint) {
                out += kHintMarker;
            } else if (id == kReserved) {
                out += '\n';
            } else if (id > kReserved && id < vocab_size()) {
                out += static_cast<char>(32 + (id - kReserved - 1));
            } else {
                throw ContractError("tokenizer: id " + std::to_string(id) + " outside vocabulary");
            }
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// pseudo-image features
// ---------------------------------------------------------------------------

/// [N, D] patch features: every cell covered by an object carries a fixed
/// seeded signature of its (shape, color); background cells are zero. Spatial
/// layout enters only through which cells light up.
inline Tensor scene_features(const SyntheticScene& s, int64_t d_model) {
    int64_t n = static_cast<int64_t>(s.grid_h) * s.grid_w;
    Tensor feats = Tensor::zeros({n, d_model});
    auto& v = feats.mutable_data();
    for (const auto& o : s.objects) {
        Rng sig(0x5CEA7F00ULL + static_cast<uint64_t>(o.shape) * 64 + static_cast<uint64_t>(o.color));
        std::vector<double> f(d_model);
        for (auto& x : f) x = sig.next_normal();
        int c0 = static_cast<int>(std::lround(o.box.x_min * s.grid_w));
        int c1 = static_cast<int>(std::lround(o.box.x_max * s.grid_w));
        int r0 = static_cast<int>(std::lround(o.box.y_min * s.grid_h));
        int r1 = static_cast<int>(std::lround(o.box.y_max * s.grid_h));
        for (int r = r0; r < r1; ++r)
            for (int c = c0; c < c1; ++c)
                for (int64_t d = 0; d < d_model; ++d) v[(r * s.grid_w + c) * d_model + d] = f[d];
    }
    return feats;
}

// ---------------------------------------------------------------------------
// dataset generation and line-delimited file form
// ---------------------------------------------------------------------------

enum class ScenePartition { all, train, heldout };

struct DatasetConfig {
    uint64_t seed = 0;
    int n_scenes = 64;
    std::vector<Subtype> subtypes{Subtype::caption, Subtype::vqa, Subtype::vqg};
    SceneConfig scene;
    ScenePartition partition = ScenePartition::all;
    bool with_tags = false;
    double tag_noise_rate = 0.3;
    std::optional<int> template_index; // fixed template choice; seeded draw when absent
    bool only_single_object = false;   // keep scenes with exactly one object
};

/// Scenes are split into train/heldout halves by content-hash parity, so the
/// two partitions can never share a scene no matter which seeds they draw.
inline std::vector<InstructionSample> generate_dataset(const DatasetConfig& cfg,
                                                       BuildStats* stats = nullptr) {
    Rng root(cfg.seed);
    Rng sample_rng = root.split(0xDA7A);
    Rng tag_rng = root.split(0x7A65);
    std::vector<InstructionSample> out;
    int made = 0;
    uint64_t next_seed = cfg.seed;
    while (made < cfg.n_scenes) {
        uint64_t scene_seed = next_seed++;
        SyntheticScene scene = gen_scene(scene_seed, cfg.scene);
        if (scene.objects.empty()) continue;
        if (cfg.only_single_object && scene.objects.size() != 1) continue;
        if (cfg.partition != ScenePartition::all) {
            bool even = scene_content_hash(scene) % 2 == 0;
            if (cfg.partition == ScenePartition::train && !even) continue;
            if (cfg.partition == ScenePartition::heldout && even) continue;
        }
        auto samples = build_samples(scene, cfg.subtypes, sample_rng, stats, cfg.template_index);
        if (cfg.with_tags) {
            std::vector<std::string> tags = tag_provider(scene, cfg.tag_noise_rate, tag_rng);
            for (auto& s : samples) s.tags = tags;
        }
        out.insert(out.end(), samples.begin(), samples.end());
        ++made;
    }
    return out;
}

inline nlohmann::ordered_json sample_to_json(const InstructionSample& s) {
    nlohmann::ordered_json j;
    j["instruction"] = s.instruction;
    j["target"] = s.target;
    j["task"] = moa::task_name(s.task());
    j["subtype"] = subtype_name(s.subtype);
    if (s.gt_bbox) j["bbox"] = {s.gt_bbox->x_min, s.gt_bbox->y_min, s.gt_bbox->x_max, s.gt_bbox->y_max};
    if (!s.tags.empty()) j["tags"] = s.tags;
    j["scene_seed"] = s.scene_seed;
    return j;
}

inline InstructionSample sample_from_json(const nlohmann::json& j) {
    InstructionSample s;
    s.instruction = j.at("instruction").get<std::string>();
    s.target = j.at("target").get<std::string>();
    s.subtype = subtype_from_name(j.at("subtype").get<std::string>());
    if (j.contains("bbox")) {
        auto b = j.at("bbox");
        s.gt_bbox = BBox{b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                         b.at(3).get<double>()};
    }
    if (j.contains("tags")) s.tags = j.at("tags").get<std::vector<std::string>>();
    s.scene_seed = j.at("scene_seed").get<uint64_t>();
    return s;
}

inline void write_dataset(const std::string& path, const std::vector<InstructionSample>& samples) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractError("write_dataset: cannot open '" + path + "'");
    for (const auto& s : samples) out << sample_to_json(s).dump() << "\n";
}

inline std::vector<InstructionSample> load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractError("load_dataset: cannot open '" + path + "'");
    std::vector<InstructionSample> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(sample_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("dataset line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

/// FNV-1a over raw file bytes; the determinism checks compare these.
inline uint64_t file_hash(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractError("file_hash: cannot open '" + path + "'");
    uint64_t h = 0xcbf29ce484222325ULL;
    char c;
    while (in.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace lion::data
