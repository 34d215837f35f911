#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "mmgl/graph.hpp"

using namespace mmgl;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("mmgl_graph_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

MultimodalGraph tiny_graph(std::vector<EdgePair> edges, std::size_t n) {
    SynthConfig cfg;
    cfg.num_nodes = n;
    cfg.num_classes = 2;
    cfg.p_in = 0.0;
    cfg.p_out = 0.0;
    cfg.d_t = 2;
    cfg.d_i = 2;
    cfg.n_t = 2;
    cfg.n_v = 2;
    cfg.seed = 5;
    auto g = synth_graph(cfg);
    detail::build_csr(g, std::move(edges));
    g.edge_splits = EdgeSplits{};
    return g;
}

}  // namespace

TEST_CASE("load handles a wide manifest with many nodes and classes") {
    auto dir = fresh_dir("wide");
    const std::size_t n = 16672;
    {
        std::ostringstream meta;
        std::string names;
        for (int c = 0; c < 19; ++c) {
            if (c) names += ",";
            names += "cat" + std::to_string(c);
        }
        meta << "category=Products\nd_i=1\nd_t=1\nlabel_names=" << names
             << "\nn_t=1\nn_v=1\nnum_nodes=" << n << "\n";
        write_text_file(dir / "graph.meta", meta.str());
        std::ostringstream nodes;
        for (std::size_t v = 0; v < n; ++v)
            nodes << "{\"id\":" << v << ",\"label\":" << (v % 19) << ",\"split\":\"train\",\"text\":\"p\"}\n";
        write_text_file(dir / "nodes.jsonl", nodes.str());
        write_text_file(dir / "edges.tsv", "");
        std::vector<float> blob(n, 0.0f);
        write_binary_file(dir / "txt.f32", blob.data(), blob.size() * sizeof(float));
        write_binary_file(dir / "img.f32", blob.data(), blob.size() * sizeof(float));
    }
    auto g = load_graph(dir);
    CHECK(g.num_nodes == 16672);
    CHECK(g.label_names.size() == 19);
    for (NodeId v = 0; v < g.num_nodes; ++v) CHECK(g.degree(v) == 0);  // 0-edge manifest is legal
    fs::remove_all(dir);
}

TEST_CASE("load symmetrizes a one-directional edge") {
    auto dir = fresh_dir("sym");
    write_text_file(dir / "graph.meta",
                    "category=Synthetic\nd_i=1\nd_t=1\nlabel_names=a\nn_t=1\nn_v=1\nnum_nodes=10\n");
    std::ostringstream nodes;
    for (int v = 0; v < 10; ++v) nodes << "{\"id\":" << v << ",\"label\":0,\"split\":\"train\",\"text\":\"\"}\n";
    write_text_file(dir / "nodes.jsonl", nodes.str());
    write_text_file(dir / "edges.tsv", "3\t9\n");
    std::vector<float> blob(10, 1.0f);
    write_binary_file(dir / "txt.f32", blob.data(), blob.size() * sizeof(float));
    write_binary_file(dir / "img.f32", blob.data(), blob.size() * sizeof(float));
    auto g = load_graph(dir / "graph.meta");
    CHECK(g.has_edge(3, 9));
    CHECK(g.has_edge(9, 3));
    CHECK(g.num_edges() == 1);
    fs::remove_all(dir);
}

TEST_CASE("load failures carry distinct messages") {
    auto dir = fresh_dir("bad");
    CHECK_THROWS_AS(load_graph(dir), MissingArtifactError);

    write_text_file(dir / "graph.meta",
                    "category=Synthetic\nd_i=1\nd_t=1\nlabel_names=a\nn_t=1\nn_v=1\nnum_nodes=3\n");
    write_text_file(dir / "nodes.jsonl",
                    "{\"id\":0,\"label\":0,\"split\":\"train\",\"text\":\"\"}\n"
                    "{\"id\":1,\"label\":0,\"split\":\"val\",\"text\":\"\"}\n"
                    "{\"id\":2,\"label\":0,\"split\":\"test\",\"text\":\"\"}\n");
    write_text_file(dir / "edges.tsv", "0\t7\n");
    std::vector<float> blob(3, 0.0f);
    write_binary_file(dir / "txt.f32", blob.data(), blob.size() * sizeof(float));
    write_binary_file(dir / "img.f32", blob.data(), blob.size() * sizeof(float));
    CHECK_THROWS_WITH(load_graph(dir), Catch::Matchers::ContainsSubstring("dangling"));

    write_text_file(dir / "edges.tsv", "");
    std::vector<float> short_blob(2, 0.0f);
    write_binary_file(dir / "txt.f32", short_blob.data(), short_blob.size() * sizeof(float));
    CHECK_THROWS_WITH(load_graph(dir), Catch::Matchers::ContainsSubstring("declares"));

    write_binary_file(dir / "txt.f32", blob.data(), blob.size() * sizeof(float));
    write_text_file(dir / "nodes.jsonl",
                    "{\"id\":0,\"label\":0,\"split\":\"train\",\"text\":\"\"}\n"
                    "{\"id\":2,\"label\":0,\"split\":\"test\",\"text\":\"\"}\n");
    CHECK_THROWS_WITH(load_graph(dir), Catch::Matchers::ContainsSubstring("partition"));
    fs::remove_all(dir);
}

TEST_CASE("synth with forced probabilities yields two cliques") {
    SynthConfig cfg;
    cfg.num_nodes = 4;
    cfg.num_classes = 2;
    cfg.p_in = 1.0;
    cfg.p_out = 0.0;
    cfg.d_t = cfg.d_i = 2;
    cfg.n_t = cfg.n_v = 2;
    auto g = synth_graph(cfg);
    CHECK(g.has_edge(0, 1));
    CHECK(g.has_edge(2, 3));
    CHECK_FALSE(g.has_edge(0, 2));
    CHECK_FALSE(g.has_edge(0, 3));
    CHECK_FALSE(g.has_edge(1, 2));
    CHECK_FALSE(g.has_edge(1, 3));
    CHECK(validate(g).empty());
}

TEST_CASE("synth rejects invalid configs") {
    SynthConfig cfg;
    cfg.p_in = 0.1;
    cfg.p_out = 0.5;
    CHECK_THROWS_AS(synth_graph(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.txt_signal = 1.5;
    CHECK_THROWS_AS(synth_graph(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.num_nodes = 0;
    CHECK_THROWS_AS(synth_graph(cfg), ConfigError);
}

TEST_CASE("synth is deterministic at the byte level") {
    SynthConfig cfg;
    cfg.num_nodes = 60;
    cfg.num_classes = 3;
    cfg.seed = 77;
    auto a = synth_graph(cfg);
    auto b = synth_graph(cfg);
    auto da = fresh_dir("det_a");
    auto db = fresh_dir("det_b");
    save_graph(a, da);
    save_graph(b, db);
    for (const auto* name : {"graph.meta", "nodes.jsonl", "edges.tsv", "txt.f32", "img.f32", "edge_splits.tsv"}) {
        const auto ba = read_binary_file(da / name);
        const auto bb = read_binary_file(db / name);
        CHECK(ba == bb);
    }
    fs::remove_all(da);
    fs::remove_all(db);
}

TEST_CASE("save then load round trips bit exactly") {
    SynthConfig cfg;
    cfg.num_nodes = 80;
    cfg.num_classes = 4;
    cfg.p_in = 0.3;
    cfg.p_out = 0.02;
    cfg.seed = 123;
    auto g = synth_graph(cfg);
    auto dir = fresh_dir("roundtrip");
    save_graph(g, dir);
    auto h = load_graph(dir);

    CHECK(h.num_nodes == g.num_nodes);
    CHECK(h.offsets == g.offsets);
    CHECK(h.neighbors_flat == g.neighbors_flat);
    CHECK(h.labels == g.labels);
    CHECK(h.label_names == g.label_names);
    CHECK(h.node_text == g.node_text);
    CHECK(h.splits == g.splits);
    CHECK(h.txt_features == g.txt_features);  // features were f32-quantized at synth time
    CHECK(h.img_features == g.img_features);
    for (int si = 0; si < 3; ++si) {
        const Split s = static_cast<Split>(si);
        CHECK(h.edge_splits.pos(s) == g.edge_splits.pos(s));
        CHECK(h.edge_splits.neg(s) == g.edge_splits.neg(s));
    }

    // serialize the reloaded graph: identical bytes again
    auto dir2 = fresh_dir("roundtrip2");
    save_graph(h, dir2);
    for (const auto* name : {"graph.meta", "nodes.jsonl", "edges.tsv", "txt.f32", "img.f32", "edge_splits.tsv"})
        CHECK(read_binary_file(dir / name) == read_binary_file(dir2 / name));
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST_CASE("neighbors on triangle, path, isolated node") {
    auto tri = tiny_graph({{0, 1}, {1, 2}, {0, 2}}, 3);
    CHECK(neighbors(tri, 0) == std::vector<NodeId>{1, 2});

    auto path = tiny_graph({{0, 1}, {1, 2}}, 3);
    CHECK(neighbors(path, 1) == std::vector<NodeId>{0, 2});

    auto iso = tiny_graph({{0, 1}}, 3);
    CHECK(neighbors(iso, 2).empty());
    CHECK_THROWS_AS(neighbors(iso, 3), InvariantError);
}

TEST_CASE("sample_neighbors respects degree and stays inside the slice") {
    std::vector<EdgePair> star;
    for (NodeId v = 1; v <= 10; ++v) star.emplace_back(0, v);
    auto g = tiny_graph(star, 11);

    Rng rng(9);
    auto few = sample_neighbors(g, 1, 5, rng);  // degree-1 node
    CHECK(few == std::vector<NodeId>{0});

    auto picked = sample_neighbors(g, 0, 5, rng);
    CHECK(picked.size() == 5);
    std::set<NodeId> uniq(picked.begin(), picked.end());
    CHECK(uniq.size() == 5);
    auto nbrs = neighbors(g, 0);
    for (auto v : picked) CHECK(std::count(nbrs.begin(), nbrs.end(), v) == 1);

    auto tri = tiny_graph({{0, 1}, {1, 2}, {0, 2}}, 4);
    CHECK(sample_neighbors(tri, 3, 5, rng).empty());

    Rng r1(4), r2(4);
    CHECK(sample_neighbors(g, 0, 5, r1) == sample_neighbors(g, 0, 5, r2));
}

TEST_CASE("khop neighborhood expands by distance") {
    auto path = tiny_graph({{0, 1}, {1, 2}, {2, 3}}, 4);
    CHECK(khop_neighborhood(path, 0, 2) == std::vector<NodeId>{1, 2});
    CHECK(khop_neighborhood(path, 0, 1) == std::vector<NodeId>{1});

    auto k4 = tiny_graph({{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}, 4);
    CHECK(khop_neighborhood(k4, 0, 1) == std::vector<NodeId>{1, 2, 3});

    auto iso = tiny_graph({{0, 1}}, 3);
    CHECK(khop_neighborhood(iso, 2, 2).empty());

    // h and h+1 nest; 1-hop equals neighbors
    SynthConfig cfg;
    cfg.num_nodes = 40;
    cfg.seed = 8;
    auto g = synth_graph(cfg);
    for (NodeId v = 0; v < g.num_nodes; ++v) {
        auto one = khop_neighborhood(g, v, 1);
        CHECK(one == neighbors(g, v));
        auto two = khop_neighborhood(g, v, 2);
        CHECK(std::includes(two.begin(), two.end(), one.begin(), one.end()));
    }
}

TEST_CASE("validate reports specific violations") {
    SynthConfig cfg;
    cfg.num_nodes = 12;
    cfg.seed = 3;
    auto g = synth_graph(cfg);
    REQUIRE(validate(g).empty());

    auto broken = g;
    // drop the reverse direction of one stored edge
    for (NodeId v = 0; v < broken.num_nodes && validate(broken).empty(); ++v) {
        if (broken.degree(v) == 0) continue;
        const NodeId u = *broken.neighbor_begin(v);
        auto& flat = broken.neighbors_flat;
        for (std::size_t i = broken.offsets[u]; i < broken.offsets[u + 1]; ++i)
            if (flat[i] == v) {
                flat.erase(flat.begin() + static_cast<std::ptrdiff_t>(i));
                for (std::size_t j = u + 1; j <= broken.num_nodes; ++j) --broken.offsets[j];
                break;
            }
    }
    auto report = validate(broken);
    REQUIRE_FALSE(report.empty());
    bool names_symmetry = false;
    for (const auto& line : report)
        if (line.find("symmetry") != std::string::npos) names_symmetry = true;
    CHECK(names_symmetry);

    auto mislabeled = g;
    mislabeled.labels[0] = static_cast<int>(mislabeled.label_names.size());
    report = validate(mislabeled);
    REQUIRE_FALSE(report.empty());
    CHECK(report.front().find("label") != std::string::npos);
}

TEST_CASE("zero inter-class probability keeps components class-pure") {
    SynthConfig cfg;
    cfg.num_nodes = 60;
    cfg.num_classes = 4;
    cfg.p_in = 0.4;
    cfg.p_out = 0.0;
    cfg.seed = 21;
    auto g = synth_graph(cfg);
    for (NodeId v = 0; v < g.num_nodes; ++v)
        for (auto it = g.neighbor_begin(v); it != g.neighbor_end(v); ++it)
            CHECK(g.labels[v] == g.labels[*it]);
}

TEST_CASE("zero img signal decouples img features from labels") {
    SynthConfig cfg;
    cfg.num_nodes = 300;
    cfg.num_classes = 2;
    cfg.txt_signal = 1.0;
    cfg.img_signal = 0.0;
    cfg.noise_sigma = 1.0;
    cfg.seed = 10;
    auto g = synth_graph(cfg);

    // class-mean separation per modality, averaged over coordinates
    auto separation = [&](const std::vector<double>& feats, std::size_t width) {
        std::vector<double> mean0(width, 0), mean1(width, 0);
        std::size_t c0 = 0, c1 = 0;
        for (NodeId v = 0; v < g.num_nodes; ++v) {
            auto& m = g.labels[v] == 0 ? mean0 : mean1;
            (g.labels[v] == 0 ? c0 : c1)++;
            for (std::size_t i = 0; i < width; ++i) m[i] += feats[v * width + i];
        }
        double gap = 0;
        for (std::size_t i = 0; i < width; ++i)
            gap += std::abs(mean0[i] / static_cast<double>(c0) - mean1[i] / static_cast<double>(c1));
        return gap / static_cast<double>(width);
    };
    const double txt_gap = separation(g.txt_features, g.n_t * g.d_t);
    const double img_gap = separation(g.img_features, g.n_v * g.d_i);
    CHECK(txt_gap > 5.0 * img_gap);  // txt carries class signal, img is pure noise
    CHECK(img_gap < 0.2);
}

TEST_CASE("edge splits are disjoint and polarity-correct") {
    SynthConfig cfg;
    cfg.num_nodes = 120;
    cfg.p_in = 0.25;
    cfg.p_out = 0.02;
    cfg.seed = 55;
    auto g = synth_graph(cfg);
    std::set<EdgePair> seen;
    for (int si = 0; si < 3; ++si) {
        const Split s = static_cast<Split>(si);
        for (auto e : g.edge_splits.pos(s)) {
            CHECK(g.has_edge(e.first, e.second));
            CHECK(seen.insert(e).second);
        }
        for (auto e : g.edge_splits.neg(s)) {
            CHECK_FALSE(g.has_edge(e.first, e.second));
            CHECK(seen.insert(e).second);
        }
        CHECK(g.edge_splits.pos(s).size() == g.edge_splits.neg(s).size());
    }
    CHECK(g.edge_splits.pos(Split::Train).size() > 0);
}

TEST_CASE("neighbor majority relabel follows structure") {
    // star: center labeled 1, leaves labeled 0 -> center flips to 0,
    // leaves flip to 1
    auto g = tiny_graph({{0, 1}, {0, 2}, {0, 3}}, 5);
    g.labels = {1, 0, 0, 0, 1};  // node 4 isolated
    relabel_neighbor_majority(g);
    CHECK(g.labels[0] == 0);
    CHECK(g.labels[1] == 1);
    CHECK(g.labels[2] == 1);
    CHECK(g.labels[3] == 1);
    CHECK(g.labels[4] == 1);  // isolated keeps its own label
}
