#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmgl/common.hpp"
#include "mmgl/tensor.hpp"

namespace mmgl {

enum class Split : std::uint8_t { Train = 0, Val = 1, Test = 2 };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw InvariantError("unknown split tag '" + s + "' (splits must partition into train/val/test)");
}

using NodeId = std::uint32_t;
using EdgePair = std::pair<NodeId, NodeId>;

struct EdgeSplits {
    // index 0=train 1=val 2=test
    std::array<std::vector<EdgePair>, 3> positives;
    std::array<std::vector<EdgePair>, 3> negatives;

    const std::vector<EdgePair>& pos(Split s) const { return positives[static_cast<std::size_t>(s)]; }
    const std::vector<EdgePair>& neg(Split s) const { return negatives[static_cast<std::size_t>(s)]; }
    std::vector<EdgePair>& pos(Split s) { return positives[static_cast<std::size_t>(s)]; }
    std::vector<EdgePair>& neg(Split s) { return negatives[static_cast<std::size_t>(s)]; }

    bool empty() const {
        for (const auto& v : positives)
            if (!v.empty()) return false;
        for (const auto& v : negatives)
            if (!v.empty()) return false;
        return true;
    }
};

// Immutable node/edge store with per-node text-token and image-patch feature
// matrices, labels and splits. Adjacency is canonical CSR: symmetric, no self
// loops, no duplicates, ascending neighbor ids. Feature values are held as
// f64 but always exactly representable in f32 (the on-disk dtype), so
// serialization round-trips bit-exactly.
struct MultimodalGraph {
    std::size_t num_nodes = 0;
    std::vector<std::size_t> offsets;     // num_nodes + 1
    std::vector<NodeId> neighbors_flat;   // ascending within each slice

    std::size_t n_t = 0, d_t = 0;  // text token sequence length / dim
    std::size_t n_v = 0, d_i = 0;  // image patch sequence length / dim
    std::vector<double> txt_features;  // num_nodes * n_t * d_t
    std::vector<double> img_features;  // num_nodes * n_v * d_i

    std::vector<int> labels;  // -1 = unlabeled
    std::vector<std::string> label_names;
    std::vector<std::string> node_text;
    std::vector<Split> splits;
    EdgeSplits edge_splits;
    std::string category = "Synthetic";

    std::size_t degree(NodeId v) const { return offsets[v + 1] - offsets[v]; }

    const NodeId* neighbor_begin(NodeId v) const { return neighbors_flat.data() + offsets[v]; }
    const NodeId* neighbor_end(NodeId v) const { return neighbors_flat.data() + offsets[v + 1]; }

    bool has_edge(NodeId u, NodeId v) const {
        return std::binary_search(neighbor_begin(u), neighbor_end(u), v);
    }

    std::size_t num_edges() const { return neighbors_flat.size() / 2; }

    void check_node(NodeId v) const {
        if (v >= num_nodes) throw InvariantError("node id " + std::to_string(v) + " out of range");
    }

    Tensor txt_matrix(NodeId v) const {
        check_node(v);
        std::vector<double> buf(txt_features.begin() + static_cast<std::ptrdiff_t>(v * n_t * d_t),
                                txt_features.begin() + static_cast<std::ptrdiff_t>((v + 1) * n_t * d_t));
        return Tensor::from_vector({n_t, d_t}, std::move(buf));
    }

    Tensor img_matrix(NodeId v) const {
        check_node(v);
        std::vector<double> buf(img_features.begin() + static_cast<std::ptrdiff_t>(v * n_v * d_i),
                                img_features.begin() + static_cast<std::ptrdiff_t>((v + 1) * n_v * d_i));
        return Tensor::from_vector({n_v, d_i}, std::move(buf));
    }

    std::vector<NodeId> nodes_in_split(Split s) const {
        std::vector<NodeId> out;
        for (NodeId v = 0; v < num_nodes; ++v)
            if (splits[v] == s) out.push_back(v);
        return out;
    }
};

// ----------------------------- queries -----------------------------

inline std::vector<NodeId> neighbors(const MultimodalGraph& g, NodeId v) {
    g.check_node(v);
    return std::vector<NodeId>(g.neighbor_begin(v), g.neighbor_end(v));
}

// min(k, degree) distinct 1-hop neighbors without replacement; isolated
// nodes yield an empty list
inline std::vector<NodeId> sample_neighbors(const MultimodalGraph& g, NodeId v, std::size_t k, Rng& rng) {
    g.check_node(v);
    if (k == 0) throw InvariantError("sample_neighbors: k must be >= 1");
    const std::size_t deg = g.degree(v);
    const auto idx = rng.sample_indices(deg, k);
    std::vector<NodeId> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(g.neighbor_begin(v)[i]);
    return out;
}

// all nodes at distance 1..h from v (excluding v), ascending
inline std::vector<NodeId> khop_neighborhood(const MultimodalGraph& g, NodeId v, std::size_t h) {
    g.check_node(v);
    if (h == 0) throw InvariantError("khop_neighborhood: h must be >= 1");
    std::vector<std::uint8_t> seen(g.num_nodes, 0);
    seen[v] = 1;
    std::vector<NodeId> frontier{v}, out;
    for (std::size_t depth = 0; depth < h && !frontier.empty(); ++depth) {
        std::vector<NodeId> next;
        for (NodeId u : frontier)
            for (auto it = g.neighbor_begin(u); it != g.neighbor_end(u); ++it)
                if (!seen[*it]) {
                    seen[*it] = 1;
                    next.push_back(*it);
                    out.push_back(*it);
                }
        frontier = std::move(next);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// ----------------------------- validation -----------------------------

inline std::vector<std::string> validate(const MultimodalGraph& g) {
    std::vector<std::string> report;
    auto fail = [&report](std::string msg) { report.push_back(std::move(msg)); };

    if (g.offsets.size() != g.num_nodes + 1) {
        fail("offsets length != num_nodes+1");
        return report;  // structure too broken to scan further
    }
    for (std::size_t i = 0; i < g.num_nodes; ++i)
        if (g.offsets[i] > g.offsets[i + 1]) fail("offsets not nondecreasing at node " + std::to_string(i));
    if (g.offsets[g.num_nodes] != g.neighbors_flat.size()) fail("offsets[num_nodes] != len(neighbors)");

    for (NodeId v = 0; v < g.num_nodes; ++v) {
        const NodeId* b = g.neighbor_begin(v);
        const NodeId* e = g.neighbor_end(v);
        for (const NodeId* it = b; it != e; ++it) {
            if (*it >= g.num_nodes) fail("neighbor id out of range at node " + std::to_string(v));
            if (*it == v) fail("self-loop at node " + std::to_string(v));
            if (it != b && *(it - 1) >= *it)
                fail("neighbor slice not strictly ascending at node " + std::to_string(v));
        }
        for (const NodeId* it = b; it != e; ++it)
            if (*it < g.num_nodes && !g.has_edge(*it, v))
                fail("symmetry violated: (" + std::to_string(v) + "," + std::to_string(*it) +
                     ") present but (" + std::to_string(*it) + "," + std::to_string(v) + ") missing");
    }

    if (g.labels.size() != g.num_nodes) fail("labels length != num_nodes");
    for (NodeId v = 0; v < g.num_nodes && v < g.labels.size(); ++v)
        if (g.labels[v] >= 0 && static_cast<std::size_t>(g.labels[v]) >= g.label_names.size())
            fail("label index out of range at node " + std::to_string(v));

    if (g.splits.size() != g.num_nodes) fail("splits length != num_nodes (splits must partition the node set)");

    if (g.txt_features.size() != g.num_nodes * g.n_t * g.d_t) fail("txt feature blob size mismatch");
    if (g.img_features.size() != g.num_nodes * g.n_v * g.d_i) fail("img feature blob size mismatch");
    if (g.node_text.size() != g.num_nodes) fail("node_text length != num_nodes");

    for (int si = 0; si < 3; ++si) {
        const Split s = static_cast<Split>(si);
        for (const auto& [u, v] : g.edge_splits.pos(s)) {
            if (u >= g.num_nodes || v >= g.num_nodes)
                fail(std::string("edge split positive references invalid node (") + split_name(s) + ")");
            else if (!g.has_edge(u, v))
                fail(std::string("positive split edge (") + std::to_string(u) + "," + std::to_string(v) +
                     ") absent from adjacency");
        }
        for (const auto& [u, v] : g.edge_splits.neg(s)) {
            if (u >= g.num_nodes || v >= g.num_nodes)
                fail(std::string("edge split negative references invalid node (") + split_name(s) + ")");
            else if (g.has_edge(u, v))
                fail(std::string("negative split edge (") + std::to_string(u) + "," + std::to_string(v) +
                     ") present in adjacency");
        }
    }
    return report;
}

// ----------------------------- construction -----------------------------

namespace detail {

// symmetrize, drop self-loops, dedupe, build canonical CSR
inline void build_csr(MultimodalGraph& g, std::vector<EdgePair> edges) {
    std::vector<EdgePair> sym;
    sym.reserve(edges.size() * 2);
    for (auto [u, v] : edges) {
        if (u == v) continue;
        sym.emplace_back(u, v);
        sym.emplace_back(v, u);
    }
    std::sort(sym.begin(), sym.end());
    sym.erase(std::unique(sym.begin(), sym.end()), sym.end());
    g.offsets.assign(g.num_nodes + 1, 0);
    for (auto [u, v] : sym) {
        (void)v;
        ++g.offsets[u + 1];
    }
    for (std::size_t i = 0; i < g.num_nodes; ++i) g.offsets[i + 1] += g.offsets[i];
    g.neighbors_flat.resize(sym.size());
    std::size_t w = 0;
    for (auto [u, v] : sym) {
        (void)u;
        g.neighbors_flat[w++] = v;
    }
}

}  // namespace detail

struct SynthConfig {
    std::size_t num_nodes = 200;
    std::size_t num_classes = 3;
    double p_in = 0.15;
    double p_out = 0.01;
    std::size_t d_t = 16, d_i = 16;
    std::size_t n_t = 6, n_v = 4;
    double txt_signal = 0.5;
    double img_signal = 0.5;
    double noise_sigma = 1.0;
    std::uint64_t seed = 1;

    void check() const {
        if (num_nodes < 1 || num_classes < 1) throw ConfigError("synth: num_nodes and num_classes must be >= 1");
        if (!(p_out >= 0.0 && p_out <= p_in && p_in <= 1.0))
            throw ConfigError("synth: need 0 <= p_out <= p_in <= 1");
        if (txt_signal < 0.0 || txt_signal > 1.0 || img_signal < 0.0 || img_signal > 1.0)
            throw ConfigError("synth: signals must lie in [0,1]");
        if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
        if (d_t < 1 || d_i < 1 || n_t < 1 || n_v < 1) throw ConfigError("synth: dims and lengths must be >= 1");
    }
};

// Planted-partition graph with class-prototype features. Classes occupy
// contiguous node blocks; feature rows are signal * prototype + N(0, sigma^2),
// quantized through f32 so serialization is exact. Same cfg+seed gives a
// bit-identical graph.
inline MultimodalGraph synth_graph(const SynthConfig& cfg) {
    cfg.check();
    MultimodalGraph g;
    g.num_nodes = cfg.num_nodes;
    g.n_t = cfg.n_t;
    g.d_t = cfg.d_t;
    g.n_v = cfg.n_v;
    g.d_i = cfg.d_i;

    for (std::size_t c = 0; c < cfg.num_classes; ++c) g.label_names.push_back("class" + std::to_string(c));

    g.labels.resize(g.num_nodes);
    for (std::size_t v = 0; v < g.num_nodes; ++v)
        g.labels[v] = static_cast<int>(v * cfg.num_classes / g.num_nodes);

    Rng edge_rng(mix_seed(cfg.seed, 0xE0));
    std::vector<EdgePair> edges;
    for (NodeId u = 0; u < g.num_nodes; ++u)
        for (NodeId v = u + 1; v < g.num_nodes; ++v) {
            const double p = g.labels[u] == g.labels[v] ? cfg.p_in : cfg.p_out;
            if (edge_rng.uniform() < p) edges.emplace_back(u, v);
        }
    detail::build_csr(g, std::move(edges));

    // per-class prototype matrices per modality; seeded independently of
    // cfg.seed so class semantics are consistent across graphs, the way a
    // fixed pretrained encoder gives every dataset the same feature space
    Rng proto_rng(mix_seed(0xA1, 0x5EED));
    std::vector<double> txt_proto(cfg.num_classes * cfg.n_t * cfg.d_t);
    std::vector<double> img_proto(cfg.num_classes * cfg.n_v * cfg.d_i);
    for (auto& x : txt_proto) x = proto_rng.normal();
    for (auto& x : img_proto) x = proto_rng.normal();

    Rng feat_rng(mix_seed(cfg.seed, 0xF2));
    g.txt_features.resize(g.num_nodes * cfg.n_t * cfg.d_t);
    g.img_features.resize(g.num_nodes * cfg.n_v * cfg.d_i);
    auto quant = [](double v) { return static_cast<double>(static_cast<float>(v)); };
    for (std::size_t v = 0; v < g.num_nodes; ++v) {
        const std::size_t c = static_cast<std::size_t>(g.labels[v]);
        for (std::size_t i = 0; i < cfg.n_t * cfg.d_t; ++i)
            g.txt_features[v * cfg.n_t * cfg.d_t + i] =
                quant(cfg.txt_signal * txt_proto[c * cfg.n_t * cfg.d_t + i] + feat_rng.normal(0.0, cfg.noise_sigma));
        for (std::size_t i = 0; i < cfg.n_v * cfg.d_i; ++i)
            g.img_features[v * cfg.n_v * cfg.d_i + i] =
                quant(cfg.img_signal * img_proto[c * cfg.n_v * cfg.d_i + i] + feat_rng.normal(0.0, cfg.noise_sigma));
    }

    // titles carry a per-seed tag so distinct graphs hold distinct catalogs
    std::string tag;
    for (std::uint64_t bits = mix_seed(cfg.seed, 0x7E47), i = 0; i < 4; ++i)
        tag += static_cast<char>('a' + (bits >> (5 * i)) % 26);
    g.node_text.resize(g.num_nodes);
    for (std::size_t v = 0; v < g.num_nodes; ++v)
        g.node_text[v] = "item " + tag + "-" + std::to_string(v);

    // 60/20/20 node split
    Rng split_rng(mix_seed(cfg.seed, 0x53));
    std::vector<NodeId> order(g.num_nodes);
    for (NodeId v = 0; v < g.num_nodes; ++v) order[v] = v;
    split_rng.shuffle(order);
    g.splits.assign(g.num_nodes, Split::Train);
    const std::size_t n_train = g.num_nodes * 6 / 10;
    const std::size_t n_val = g.num_nodes * 2 / 10;
    for (std::size_t i = 0; i < g.num_nodes; ++i)
        g.splits[order[i]] = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Val : Split::Test);

    // edge splits for link prediction: 30/10/10 percent of edges as
    // positives, equally many sampled non-edges as negatives
    Rng lp_rng(mix_seed(cfg.seed, 0x1B));
    std::vector<EdgePair> unique_edges;
    for (NodeId u = 0; u < g.num_nodes; ++u)
        for (auto it = g.neighbor_begin(u); it != g.neighbor_end(u); ++it)
            if (*it > u) unique_edges.emplace_back(u, *it);
    lp_rng.shuffle(unique_edges);
    const std::size_t e_train = unique_edges.size() * 3 / 10;
    const std::size_t e_val = unique_edges.size() / 10;
    const std::size_t e_test = unique_edges.size() / 10;
    std::size_t cursor = 0;
    for (auto [count, split] : {std::pair<std::size_t, Split>{e_train, Split::Train},
                                {e_val, Split::Val},
                                {e_test, Split::Test}}) {
        for (std::size_t i = 0; i < count && cursor < unique_edges.size(); ++i)
            g.edge_splits.pos(split).push_back(unique_edges[cursor++]);
    }
    std::set<EdgePair> used_neg;
    auto sample_negatives = [&](Split split, std::size_t count) {
        std::size_t guard = 0;
        while (g.edge_splits.neg(split).size() < count && guard < count * 200 + 1000) {
            ++guard;
            NodeId u = static_cast<NodeId>(lp_rng.below(g.num_nodes));
            NodeId v = static_cast<NodeId>(lp_rng.below(g.num_nodes));
            if (u == v) continue;
            if (u > v) std::swap(u, v);
            if (g.has_edge(u, v)) continue;
            if (!used_neg.insert({u, v}).second) continue;
            g.edge_splits.neg(split).push_back({u, v});
        }
    };
    sample_negatives(Split::Train, g.edge_splits.pos(Split::Train).size());
    sample_negatives(Split::Val, g.edge_splits.pos(Split::Val).size());
    sample_negatives(Split::Test, g.edge_splits.pos(Split::Test).size());

    return g;
}

// Relabels every node to the majority label among its neighbors (ties to the
// smallest class id, isolated nodes keep their own label). Makes the label a
// function of graph structure rather than of the node's own features.
inline void relabel_neighbor_majority(MultimodalGraph& g) {
    std::vector<int> fresh(g.num_nodes);
    for (NodeId v = 0; v < g.num_nodes; ++v) {
        std::vector<std::size_t> counts(g.label_names.size(), 0);
        bool any = false;
        for (auto it = g.neighbor_begin(v); it != g.neighbor_end(v); ++it)
            if (g.labels[*it] >= 0) {
                ++counts[static_cast<std::size_t>(g.labels[*it])];
                any = true;
            }
        if (!any) {
            fresh[v] = g.labels[v];
            continue;
        }
        std::size_t best = 0;
        for (std::size_t c = 1; c < counts.size(); ++c)
            if (counts[c] > counts[best]) best = c;
        fresh[v] = static_cast<int>(best);
    }
    g.labels = std::move(fresh);
}

// ----------------------------- serialization -----------------------------
//
// A graph directory holds: graph.meta (key=value header), nodes.jsonl,
// edges.tsv, txt.f32, img.f32 (row-major node-major f32 blobs) and
// edge_splits.tsv.

namespace detail {

inline std::vector<float> narrow_features(const std::vector<double>& src) {
    std::vector<float> out(src.size());
    for (std::size_t i = 0; i < src.size(); ++i) out[i] = static_cast<float>(src[i]);
    return out;
}

}  // namespace detail

inline void save_graph(const MultimodalGraph& g, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);

    std::ostringstream meta;
    std::string joined;
    for (std::size_t i = 0; i < g.label_names.size(); ++i) {
        if (g.label_names[i].find(',') != std::string::npos)
            throw InvariantError("label name contains a comma: " + g.label_names[i]);
        if (i) joined += ",";
        joined += g.label_names[i];
    }
    meta << "category=" << g.category << "\n"
         << "d_i=" << g.d_i << "\n"
         << "d_t=" << g.d_t << "\n"
         << "label_names=" << joined << "\n"
         << "n_t=" << g.n_t << "\n"
         << "n_v=" << g.n_v << "\n"
         << "num_nodes=" << g.num_nodes << "\n";
    write_text_file(dir / "graph.meta", meta.str());

    std::ostringstream nodes;
    for (std::size_t v = 0; v < g.num_nodes; ++v) {
        nlohmann::json j;
        j["id"] = v;
        if (g.labels[v] >= 0)
            j["label"] = g.labels[v];
        else
            j["label"] = nullptr;
        j["split"] = split_name(g.splits[v]);
        j["text"] = g.node_text[v];
        nodes << j.dump() << "\n";
    }
    write_text_file(dir / "nodes.jsonl", nodes.str());

    std::ostringstream edges;
    for (NodeId u = 0; u < g.num_nodes; ++u)
        for (auto it = g.neighbor_begin(u); it != g.neighbor_end(u); ++it)
            if (*it > u) edges << u << "\t" << *it << "\n";
    write_text_file(dir / "edges.tsv", edges.str());

    const auto txt = detail::narrow_features(g.txt_features);
    const auto img = detail::narrow_features(g.img_features);
    write_binary_file(dir / "txt.f32", txt.data(), txt.size() * sizeof(float));
    write_binary_file(dir / "img.f32", img.data(), img.size() * sizeof(float));

    std::ostringstream es;
    for (int si = 0; si < 3; ++si) {
        const Split s = static_cast<Split>(si);
        for (const auto& [u, v] : g.edge_splits.pos(s)) es << split_name(s) << "\tpos\t" << u << "\t" << v << "\n";
        for (const auto& [u, v] : g.edge_splits.neg(s)) es << split_name(s) << "\tneg\t" << u << "\t" << v << "\n";
    }
    write_text_file(dir / "edge_splits.tsv", es.str());
}

inline MultimodalGraph load_graph(const std::filesystem::path& manifest_path) {
    namespace fs = std::filesystem;
    fs::path dir = manifest_path;
    if (dir.filename() == "graph.meta") dir = dir.parent_path();
    const fs::path meta_path = dir / "graph.meta";
    if (!fs::exists(meta_path)) throw MissingArtifactError("graph manifest not found: " + meta_path.string());

    MultimodalGraph g;
    std::map<std::string, std::string> meta;
    {
        std::istringstream in(read_text_file(meta_path));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw InvariantError("malformed graph.meta line: " + line);
            meta[line.substr(0, eq)] = line.substr(eq + 1);
        }
    }
    auto need = [&meta, &meta_path](const std::string& key) {
        auto it = meta.find(key);
        if (it == meta.end())
            throw InvariantError("graph.meta missing key '" + key + "' in " + meta_path.string());
        return it->second;
    };
    g.num_nodes = std::stoull(need("num_nodes"));
    g.n_t = std::stoull(need("n_t"));
    g.d_t = std::stoull(need("d_t"));
    g.n_v = std::stoull(need("n_v"));
    g.d_i = std::stoull(need("d_i"));
    g.category = need("category");
    {
        const std::string names = need("label_names");
        std::size_t start = 0;
        while (start <= names.size() && !names.empty()) {
            const auto comma = names.find(',', start);
            g.label_names.push_back(names.substr(start, comma == std::string::npos ? comma : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
    }

    g.labels.assign(g.num_nodes, -1);
    g.splits.assign(g.num_nodes, Split::Train);
    g.node_text.assign(g.num_nodes, "");
    std::vector<bool> seen(g.num_nodes, false);
    {
        std::istringstream in(read_text_file(dir / "nodes.jsonl"));
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            nlohmann::json j = nlohmann::json::parse(line);
            const std::size_t id = j.at("id").get<std::size_t>();
            if (id >= g.num_nodes)
                throw InvariantError("nodes.jsonl line " + std::to_string(line_no) + ": node id " +
                                     std::to_string(id) + " out of range");
            if (seen[id]) throw InvariantError("nodes.jsonl: duplicate node id " + std::to_string(id));
            seen[id] = true;
            if (!j.at("label").is_null()) {
                const int lab = j.at("label").get<int>();
                if (lab < 0 || static_cast<std::size_t>(lab) >= g.label_names.size())
                    throw InvariantError("nodes.jsonl: label index " + std::to_string(lab) +
                                         " out of range for node " + std::to_string(id));
                g.labels[id] = lab;
            }
            g.splits[id] = split_from_name(j.at("split").get<std::string>());
            if (j.contains("text") && !j.at("text").is_null()) g.node_text[id] = j.at("text").get<std::string>();
        }
    }
    for (std::size_t v = 0; v < g.num_nodes; ++v)
        if (!seen[v])
            throw InvariantError("splits do not partition the node set: node " + std::to_string(v) +
                                 " missing from nodes.jsonl");

    std::vector<EdgePair> edges;
    {
        std::istringstream in(read_text_file(dir / "edges.tsv"));
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            std::istringstream ls(line);
            long long u = -1, v = -1;
            ls >> u >> v;
            if (u < 0 || v < 0) throw InvariantError("edges.tsv line " + std::to_string(line_no) + ": malformed");
            if (static_cast<std::size_t>(u) >= g.num_nodes || static_cast<std::size_t>(v) >= g.num_nodes)
                throw InvariantError("edges.tsv line " + std::to_string(line_no) + ": dangling node id");
            edges.emplace_back(static_cast<NodeId>(u), static_cast<NodeId>(v));
        }
    }
    detail::build_csr(g, std::move(edges));

    auto load_blob = [&dir](const std::string& name, std::size_t expected) {
        const auto buf = read_binary_file(dir / name);
        if (buf.size() != expected * sizeof(float))
            throw InvariantError(name + ": blob holds " + std::to_string(buf.size() / sizeof(float)) +
                                 " floats, manifest declares " + std::to_string(expected));
        std::vector<double> out(expected);
        const float* p = reinterpret_cast<const float*>(buf.data());
        for (std::size_t i = 0; i < expected; ++i) out[i] = static_cast<double>(p[i]);
        return out;
    };
    g.txt_features = load_blob("txt.f32", g.num_nodes * g.n_t * g.d_t);
    g.img_features = load_blob("img.f32", g.num_nodes * g.n_v * g.d_i);

    if (fs::exists(dir / "edge_splits.tsv")) {
        std::istringstream in(read_text_file(dir / "edge_splits.tsv"));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream ls(line);
            std::string split_tag, polarity;
            long long u = -1, v = -1;
            ls >> split_tag >> polarity >> u >> v;
            if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= g.num_nodes ||
                static_cast<std::size_t>(v) >= g.num_nodes)
                throw InvariantError("edge_splits.tsv references an invalid node id: " + line);
            const Split s = split_from_name(split_tag);
            const EdgePair e{static_cast<NodeId>(u), static_cast<NodeId>(v)};
            if (polarity == "pos")
                g.edge_splits.pos(s).push_back(e);
            else if (polarity == "neg")
                g.edge_splits.neg(s).push_back(e);
            else
                throw InvariantError("edge_splits.tsv: polarity must be pos or neg: " + line);
        }
    }

    const auto report = validate(g);
    if (!report.empty()) throw InvariantError("loaded graph violates invariants: " + report.front());
    return g;
}

}  // namespace mmgl
