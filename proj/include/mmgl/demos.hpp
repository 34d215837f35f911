#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmgl/graph.hpp"
#include "mmgl/ppr.hpp"

namespace mmgl {

enum class TaskKind : std::uint8_t { NC = 0, LP = 1 };

inline const char* task_name(TaskKind t) { return t == TaskKind::NC ? "nc" : "lp"; }

inline TaskKind task_from_name(const std::string& s) {
    if (s == "nc") return TaskKind::NC;
    if (s == "lp") return TaskKind::LP;
    throw InvariantError("unknown task tag '" + s + "'");
}

struct NcDemo {
    NodeId node;
    std::string label;
};

struct LpDemo {
    EdgePair edge;
    bool together;
};

// Selected in-context examples for one anchor node (NC) or one candidate
// edge (LP), with their ground-truth answers.
struct DemonstrationSet {
    TaskKind task = TaskKind::NC;
    NodeId anchor = 0;    // NC anchor, or LP endpoint u
    NodeId anchor_v = 0;  // LP endpoint v
    std::vector<NcDemo> nc_demos;
    std::vector<LpDemo> lp_demos;

    std::size_t size() const { return task == TaskKind::NC ? nc_demos.size() : lp_demos.size(); }
};

// Top-k labeled train-split nodes by PPR score from the anchor, anchor
// excluded, ties broken by ascending node id. Returns fewer than k only when
// the pool itself is smaller.
inline DemonstrationSet select_nc_demos(const MultimodalGraph& g, NodeId anchor, std::size_t k,
                                        const PPRConfig& cfg = {}) {
    g.check_node(anchor);
    std::vector<NodeId> pool;
    for (NodeId v = 0; v < g.num_nodes; ++v)
        if (v != anchor && g.splits[v] == Split::Train && g.labels[v] >= 0) pool.push_back(v);
    if (pool.empty()) throw InvariantError("select_nc_demos: no labeled train nodes available");

    const auto scores = ppr_scores(g, anchor, cfg);
    std::sort(pool.begin(), pool.end(), [&scores](NodeId a, NodeId b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    if (pool.size() > k) pool.resize(k);

    DemonstrationSet out;
    out.task = TaskKind::NC;
    out.anchor = anchor;
    for (NodeId v : pool)
        out.nc_demos.push_back({v, g.label_names[static_cast<std::size_t>(g.labels[v])]});
    return out;
}

struct LpDemoOptions {
    std::size_t n_demos = 1;
    bool with_negatives = false;           // opt-in "No" demos
    const std::set<EdgePair>* forbidden = nullptr;  // e.g. held-out val/test edges during tuning
};

namespace detail {

inline EdgePair canonical_edge(NodeId a, NodeId b) { return a < b ? EdgePair{a, b} : EdgePair{b, a}; }

}  // namespace detail

// Demo edges drawn from the shared 2-hop neighborhood of (u,v): any stored
// edge with an endpoint in khop(u,2) intersect khop(v,2), excluding (u,v)
// itself and any forbidden edges. When that pool is empty the fallback is any
// edge incident to u or v, and failing that the set is empty. Negative demos
// (opt-in) are sampled non-edges between shared-neighborhood nodes.
inline DemonstrationSet select_lp_demos(const MultimodalGraph& g, NodeId u, NodeId v, Rng& rng,
                                        const LpDemoOptions& opts = {}) {
    g.check_node(u);
    g.check_node(v);
    if (u == v) throw InvariantError("select_lp_demos: endpoints must differ");

    DemonstrationSet out;
    out.task = TaskKind::LP;
    out.anchor = u;
    out.anchor_v = v;
    if (opts.n_demos == 0) return out;

    const EdgePair self = detail::canonical_edge(u, v);
    auto allowed = [&](EdgePair e) {
        if (e == self) return false;
        return opts.forbidden == nullptr || opts.forbidden->count(e) == 0;
    };

    const auto hop_u = khop_neighborhood(g, u, 2);
    const auto hop_v = khop_neighborhood(g, v, 2);
    std::vector<NodeId> shared;
    std::set_intersection(hop_u.begin(), hop_u.end(), hop_v.begin(), hop_v.end(), std::back_inserter(shared));

    std::set<EdgePair> pool;
    for (NodeId s : shared)
        for (auto it = g.neighbor_begin(s); it != g.neighbor_end(s); ++it) {
            const EdgePair e = detail::canonical_edge(s, *it);
            if (allowed(e)) pool.insert(e);
        }
    if (pool.empty()) {
        // fallback: any edge touching u or v
        for (NodeId end : {u, v})
            for (auto it = g.neighbor_begin(end); it != g.neighbor_end(end); ++it) {
                const EdgePair e = detail::canonical_edge(end, *it);
                if (allowed(e)) pool.insert(e);
            }
    }
    std::vector<EdgePair> candidates(pool.begin(), pool.end());
    for (auto idx : rng.sample_indices(candidates.size(), opts.n_demos))
        out.lp_demos.push_back({candidates[idx], true});

    if (opts.with_negatives && !out.lp_demos.empty()) {
        std::vector<EdgePair> non_edges;
        for (std::size_t i = 0; i < shared.size(); ++i)
            for (std::size_t j = i + 1; j < shared.size(); ++j) {
                const EdgePair e{shared[i], shared[j]};
                if (e != self && !g.has_edge(e.first, e.second)) non_edges.push_back(e);
            }
        const std::size_t want = out.lp_demos.size();
        for (auto idx : rng.sample_indices(non_edges.size(), want))
            out.lp_demos.push_back({non_edges[idx], false});
    }
    return out;
}

// ----------------------------- demos file -----------------------------
// One JSON line per anchor; consumed by the instruct stage.

inline std::string demos_to_jsonl(const std::vector<DemonstrationSet>& sets) {
    std::ostringstream out;
    for (const auto& s : sets) {
        nlohmann::json j;
        j["task"] = task_name(s.task);
        if (s.task == TaskKind::NC) {
            j["anchor"] = s.anchor;
            auto arr = nlohmann::json::array();
            for (const auto& d : s.nc_demos) arr.push_back({{"label", d.label}, {"node", d.node}});
            j["demos"] = arr;
        } else {
            j["u"] = s.anchor;
            j["v"] = s.anchor_v;
            auto arr = nlohmann::json::array();
            for (const auto& d : s.lp_demos)
                arr.push_back({{"together", d.together}, {"u", d.edge.first}, {"v", d.edge.second}});
            j["demos"] = arr;
        }
        out << j.dump() << "\n";
    }
    return out.str();
}

inline std::vector<DemonstrationSet> demos_from_jsonl(const std::string& text) {
    std::vector<DemonstrationSet> sets;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        DemonstrationSet s;
        s.task = task_from_name(j.at("task").get<std::string>());
        if (s.task == TaskKind::NC) {
            s.anchor = j.at("anchor").get<NodeId>();
            for (const auto& d : j.at("demos"))
                s.nc_demos.push_back({d.at("node").get<NodeId>(), d.at("label").get<std::string>()});
        } else {
            s.anchor = j.at("u").get<NodeId>();
            s.anchor_v = j.at("v").get<NodeId>();
            for (const auto& d : j.at("demos"))
                s.lp_demos.push_back(
                    {{d.at("u").get<NodeId>(), d.at("v").get<NodeId>()}, d.at("together").get<bool>()});
        }
        sets.push_back(std::move(s));
    }
    return sets;
}

}  // namespace mmgl
