#pragma once

#include <algorithm>
#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include "mmgl/common.hpp"
#include "mmgl/demos.hpp"
#include "mmgl/graph.hpp"

namespace mmgl {

inline constexpr const char* kImageMarker = "<image>";
inline constexpr const char* kGraphMarker = "<graph>";

enum class SegmentKind { Text, ImageSlot, GraphSlot };

// node or edge reference carried by a slot segment
struct SlotRef {
    NodeId u = 0;
    NodeId v = 0;
    bool is_edge = false;

    static SlotRef node(NodeId n) { return SlotRef{n, n, false}; }
    static SlotRef edge(NodeId a, NodeId b) { return SlotRef{a, b, true}; }
    bool operator==(const SlotRef&) const = default;
};

struct PromptSegment {
    SegmentKind kind = SegmentKind::Text;
    std::string text;  // Text kind only
    SlotRef ref;       // slot kinds only
};

enum class PromptMode { WithDemos, NoDemos, MllmBaseline };

inline std::string prompt_mode_name(PromptMode m) {
    switch (m) {
        case PromptMode::WithDemos: return "with_demos";
        case PromptMode::NoDemos: return "no_demos";
        case PromptMode::MllmBaseline: return "mllm_baseline";
    }
    throw InvariantError("unknown prompt mode");
}

inline PromptMode prompt_mode_from_name(const std::string& s) {
    if (s == "with_demos") return PromptMode::WithDemos;
    if (s == "no_demos") return PromptMode::NoDemos;
    if (s == "mllm_baseline") return PromptMode::MllmBaseline;
    throw ConfigError("unknown prompt mode: " + s);
}

struct PromptSequence {
    TaskKind task = TaskKind::NC;
    std::vector<PromptSegment> segments;
    std::string answer;  // empty at inference

    std::size_t count_slots(SegmentKind kind) const {
        return static_cast<std::size_t>(
            std::count_if(segments.begin(), segments.end(),
                          [kind](const PromptSegment& s) { return s.kind == kind; }));
    }
};

// the template skeletons with named holes; demo blocks are rendered
// separately and substituted into {demo_blocks}
struct PromptTemplates {
    std::string nc_with_demos;
    std::string nc_demo_block;
    std::string nc_no_demos;
    std::string nc_mllm;
    std::string lp_with_demos;
    std::string lp_demo_block;
    std::string lp_no_demos;
    std::string lp_mllm;

    static PromptTemplates builtin() {
        PromptTemplates t;
        t.nc_with_demos =
            "Given an Amazon product in the {category} category. The text description of this "
            "product is Title: {text}. The image description of this product is <image>. This "
            "product is also co-purchased with other products, based on which we obtain the "
            "graph-aware feature: <graph>. The task is to classify this product into "
            "{num_classes} classes: {class_list}. Here are top-{k} similar products calculated "
            "by PageRank algorithm associated with their truth class:\n"
            "{demo_blocks}\n"
            "Please tell me which class the given product should belong to by considering its "
            "own multimodal features and the given demonstrations?\n";
        t.nc_demo_block =
            "Product {index}'s multimodal features are: Text feature: {text}. Image feature: "
            "<image>, Graph-aware feature: <graph>; it belongs to: {label}";
        t.nc_no_demos =
            "Given an Amazon product in the {category} category. The text description of this "
            "product is Title: {text}. The image description of this product is <image>. This "
            "product is also co-purchased with other products, based on which we obtain the "
            "graph-aware feature: <graph>. The task is to classify this product into "
            "{num_classes} classes: {class_list}.\n"
            "Please tell me which class the given product should belong to by considering its "
            "own multimodal features?\n";
        t.nc_mllm =
            "<image> The text description of this product is Title: {text}. The task is to "
            "classify this product into {num_classes} classes: {class_list}.\n"
            "Please tell me which class the given product should belong to?\n";
        t.lp_with_demos =
            "Given two products sold in the {category} category. The concat text description "
            "of these two products is {text}; The concat image description of these two "
            "products is <image>. The concat graph-aware feature of these two products is "
            "<graph>. We need to predict whether these two products are purchased or reviewed "
            "together. Here is top-{n} similar products pair associated with their truth "
            "connections:\n"
            "{demo_blocks}\n"
            "Please tell me whether these two products should be purchased or reviewed "
            "together by considering their multimodal features and the given demonstrations\n";
        t.lp_demo_block =
            "Pair {index}'s multimodal features are: the concat text description of these two "
            "products is: {text}; the concat image description of these two products is: "
            "<image>, the concat graph-aware feature of these two products is <graph>; "
            "Purchased or reviewed together: {answer}";
        t.lp_no_demos =
            "Given two products sold in the {category} category. The concat text description "
            "of these two products is {text}; The concat image description of these two "
            "products is <image>. The concat graph-aware feature of these two products is "
            "<graph>. We need to predict whether these two products are purchased or reviewed "
            "together.\n"
            "Please tell me whether these two products should be purchased or reviewed "
            "together by considering their multimodal features\n";
        t.lp_mllm =
            "<image> The concat text description of these two products is {text}; The task is "
            "to predict whether these two products are purchased or reviewed together.\n"
            "Please tell me whether these two products should be purchased or reviewed "
            "together?\n";
        return t;
    }

    static PromptTemplates load(const std::filesystem::path& dir) {
        auto read = [&dir](const char* name) {
            const auto path = dir / name;
            if (!std::filesystem::exists(path))
                throw MissingArtifactError("template file not found: " + path.string());
            return read_text_file(path);
        };
        PromptTemplates t;
        t.nc_with_demos = read("nc_with_demos.txt");
        t.nc_demo_block = read("nc_demo_block.txt");
        t.nc_no_demos = read("nc_no_demos.txt");
        t.nc_mllm = read("nc_mllm.txt");
        t.lp_with_demos = read("lp_with_demos.txt");
        t.lp_demo_block = read("lp_demo_block.txt");
        t.lp_no_demos = read("lp_no_demos.txt");
        t.lp_mllm = read("lp_mllm.txt");
        return t;
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        write_text_file(dir / "nc_with_demos.txt", nc_with_demos);
        write_text_file(dir / "nc_demo_block.txt", nc_demo_block);
        write_text_file(dir / "nc_no_demos.txt", nc_no_demos);
        write_text_file(dir / "nc_mllm.txt", nc_mllm);
        write_text_file(dir / "lp_with_demos.txt", lp_with_demos);
        write_text_file(dir / "lp_demo_block.txt", lp_demo_block);
        write_text_file(dir / "lp_no_demos.txt", lp_no_demos);
        write_text_file(dir / "lp_mllm.txt", lp_mllm);
    }
};

namespace detail {

inline std::string fill_holes(std::string tpl,
                              const std::vector<std::pair<std::string, std::string>>& holes) {
    for (const auto& [name, value] : holes) {
        const std::string key = "{" + name + "}";
        std::size_t pos = 0;
        while ((pos = tpl.find(key, pos)) != std::string::npos) {
            tpl.replace(pos, key.size(), value);
            pos += value.size();
        }
    }
    if (const auto open = tpl.find('{'); open != std::string::npos) {
        const auto close = tpl.find('}', open);
        if (close != std::string::npos)
            throw InvariantError("unfilled template hole: " + tpl.substr(open, close - open + 1));
    }
    return tpl;
}

// split rendered text on slot markers and attach refs in order of appearance
inline std::vector<PromptSegment> parse_segments(const std::string& text,
                                                 std::vector<SlotRef> image_refs,
                                                 std::vector<SlotRef> graph_refs) {
    std::vector<PromptSegment> out;
    std::size_t img_next = 0, gr_next = 0;
    std::size_t pos = 0;
    const std::string img = kImageMarker, gr = kGraphMarker;
    while (pos < text.size()) {
        const auto at_img = text.find(img, pos);
        const auto at_gr = text.find(gr, pos);
        const auto at = std::min(at_img, at_gr);
        if (at == std::string::npos) {
            out.push_back({SegmentKind::Text, text.substr(pos), {}});
            break;
        }
        if (at > pos) out.push_back({SegmentKind::Text, text.substr(pos, at - pos), {}});
        if (at == at_img) {
            if (img_next >= image_refs.size())
                throw InvariantError("more <image> markers than image refs supplied");
            out.push_back({SegmentKind::ImageSlot, "", image_refs[img_next++]});
            pos = at + img.size();
        } else {
            if (gr_next >= graph_refs.size())
                throw InvariantError("more <graph> markers than graph refs supplied");
            out.push_back({SegmentKind::GraphSlot, "", graph_refs[gr_next++]});
            pos = at + gr.size();
        }
    }
    if (img_next != image_refs.size() || gr_next != graph_refs.size())
        throw InvariantError("slot marker count does not match supplied refs");
    return out;
}

inline std::string class_list(const MultimodalGraph& g) {
    std::string out;
    for (std::size_t i = 0; i < g.label_names.size(); ++i) {
        if (i) out += ", ";
        out += g.label_names[i];
    }
    return out;
}

inline std::string pair_text(const MultimodalGraph& g, NodeId u, NodeId v) {
    return "Product 1: " + g.node_text[u] + "; Product 2: " + g.node_text[v];
}

}  // namespace detail

inline PromptSequence build_nc_prompt(const MultimodalGraph& g, NodeId anchor,
                                      const DemonstrationSet& demos, PromptMode mode,
                                      const PromptTemplates& tpl = PromptTemplates::builtin()) {
    g.check_node(anchor);
    if (demos.task != TaskKind::NC) throw InvariantError("nc prompt given non-NC demonstrations");
    if (g.label_names.size() < 2) throw InvariantError("nc prompt needs at least two classes");

    PromptSequence seq;
    seq.task = TaskKind::NC;
    if (g.labels[anchor] >= 0) seq.answer = g.label_names[static_cast<std::size_t>(g.labels[anchor])];

    std::vector<SlotRef> image_refs{SlotRef::node(anchor)};
    std::vector<SlotRef> graph_refs{SlotRef::node(anchor)};
    std::vector<std::pair<std::string, std::string>> holes{
        {"category", g.category},
        {"text", g.node_text[anchor]},
        {"num_classes", std::to_string(g.label_names.size())},
        {"class_list", detail::class_list(g)},
    };

    std::string rendered;
    switch (mode) {
        case PromptMode::WithDemos: {
            std::string blocks;
            std::size_t index = 1;
            for (const auto& d : demos.nc_demos) {
                g.check_node(d.node);
                if (d.node == anchor) throw InvariantError("demonstration repeats the anchor");
                if (g.labels[d.node] < 0) throw InvariantError("unlabeled demonstration node");
                if (index > 1) blocks += "\n";
                blocks += detail::fill_holes(tpl.nc_demo_block,
                                             {{"index", std::to_string(index)},
                                              {"text", g.node_text[d.node]},
                                              {"label", d.label}});
                image_refs.push_back(SlotRef::node(d.node));
                graph_refs.push_back(SlotRef::node(d.node));
                ++index;
            }
            holes.emplace_back("k", std::to_string(demos.nc_demos.size()));
            holes.emplace_back("demo_blocks", blocks);
            rendered = detail::fill_holes(tpl.nc_with_demos, holes);
            break;
        }
        case PromptMode::NoDemos:
            rendered = detail::fill_holes(tpl.nc_no_demos, holes);
            break;
        case PromptMode::MllmBaseline:
            graph_refs.clear();
            rendered = detail::fill_holes(tpl.nc_mllm, holes);
            break;
    }
    seq.segments = detail::parse_segments(rendered, image_refs, graph_refs);
    return seq;
}

inline PromptSequence build_lp_prompt(const MultimodalGraph& g, NodeId u, NodeId v,
                                      const DemonstrationSet& demos, PromptMode mode,
                                      const std::string& answer = "",
                                      const PromptTemplates& tpl = PromptTemplates::builtin()) {
    g.check_node(u);
    g.check_node(v);
    if (u == v) throw InvariantError("lp prompt needs two distinct nodes");
    if (demos.task != TaskKind::LP) throw InvariantError("lp prompt given non-LP demonstrations");
    if (!answer.empty() && answer != "Yes" && answer != "No")
        throw InvariantError("lp answer must be Yes or No, got: " + answer);

    PromptSequence seq;
    seq.task = TaskKind::LP;
    seq.answer = answer;

    std::vector<SlotRef> image_refs{SlotRef::edge(u, v)};
    std::vector<SlotRef> graph_refs{SlotRef::edge(u, v)};
    std::vector<std::pair<std::string, std::string>> holes{
        {"category", g.category},
        {"text", detail::pair_text(g, u, v)},
    };

    std::string rendered;
    switch (mode) {
        case PromptMode::WithDemos: {
            std::string blocks;
            std::size_t index = 1;
            for (const auto& d : demos.lp_demos) {
                g.check_node(d.edge.first);
                g.check_node(d.edge.second);
                if (index > 1) blocks += "\n";
                blocks += detail::fill_holes(
                    tpl.lp_demo_block,
                    {{"index", std::to_string(index)},
                     {"text", detail::pair_text(g, d.edge.first, d.edge.second)},
                     {"answer", d.together ? "Yes" : "No"}});
                image_refs.push_back(SlotRef::edge(d.edge.first, d.edge.second));
                graph_refs.push_back(SlotRef::edge(d.edge.first, d.edge.second));
                ++index;
            }
            holes.emplace_back("n", std::to_string(demos.lp_demos.size()));
            holes.emplace_back("demo_blocks", blocks);
            rendered = detail::fill_holes(tpl.lp_with_demos, holes);
            break;
        }
        case PromptMode::NoDemos:
            rendered = detail::fill_holes(tpl.lp_no_demos, holes);
            break;
        case PromptMode::MllmBaseline:
            graph_refs.clear();
            rendered = detail::fill_holes(tpl.lp_mllm, holes);
            break;
    }
    seq.segments = detail::parse_segments(rendered, image_refs, graph_refs);
    return seq;
}

// rendered view with slot markers restored; used for goldens and for the
// decoder's vocabulary corpus, where markers are opaque reserved tokens
inline std::string render_text(const PromptSequence& seq) {
    std::string out;
    for (const auto& s : seq.segments) {
        switch (s.kind) {
            case SegmentKind::Text: out += s.text; break;
            case SegmentKind::ImageSlot: out += kImageMarker; break;
            case SegmentKind::GraphSlot: out += kGraphMarker; break;
        }
    }
    return out;
}

inline std::vector<std::string> tokenize(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (c == ' ' || c == '\n' || c == '\t' || c == '\r') {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace mmgl
