#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmgl/attention.hpp"
#include "mmgl/checkpoint.hpp"
#include "mmgl/graph.hpp"
#include "mmgl/optim.hpp"

namespace mmgl {

struct AlignerConfig {
    std::size_t d = 32;      // fused hidden dim
    std::size_t n_heads = 4;
    std::size_t n_layers = 2;
    std::size_t n_q = 8;     // learnable query count
    double tau = 0.1;        // contrastive temperature
    std::size_t neighbors_per_anchor = 5;
    std::size_t batch_size = 16;
    double lr = 1e-5;
    std::size_t epochs = 30;
    std::uint64_t seed = 1;

    void check() const {
        if (n_heads == 0 || d % n_heads != 0) throw ConfigError("aligner: d must be divisible by n_heads");
        if (!(tau > 0.0)) throw ConfigError("aligner: tau must be > 0");
        if (n_q < 1) throw ConfigError("aligner: n_q must be >= 1");
        if (n_layers < 1) throw ConfigError("aligner: n_layers must be >= 1");
        if (batch_size < 1) throw ConfigError("aligner: batch_size must be >= 1");
        if (neighbors_per_anchor < 1) throw ConfigError("aligner: neighbors_per_anchor must be >= 1");
    }
};

// All trainable weights of the aligner. Each layer holds exactly one shared
// self-attention parameter set (used by both modalities) and one
// cross-attention set for query fusion.
struct AlignerParams {
    Tensor txt_in_proj;  // d_t x d
    Tensor img_in_proj;  // d_i x d
    std::vector<AttentionParams> shared_attn;  // one per layer
    std::vector<AttentionParams> cross_attn;   // one per layer
    Tensor query_bank;   // n_q x d
    Tensor pool_head;    // d x d
    std::size_t n_heads = 1;

    static AlignerParams init(const AlignerConfig& cfg, std::size_t d_t, std::size_t d_i, Rng& rng) {
        cfg.check();
        AlignerParams p;
        p.n_heads = cfg.n_heads;
        p.txt_in_proj = Tensor::uniform_init({d_t, cfg.d}, d_t, rng);
        p.img_in_proj = Tensor::uniform_init({d_i, cfg.d}, d_i, rng);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            p.shared_attn.push_back(AttentionParams::init(cfg.d, rng));
            p.cross_attn.push_back(AttentionParams::init(cfg.d, rng));
        }
        p.query_bank = Tensor::uniform_init({cfg.n_q, cfg.d}, cfg.d, rng);
        p.pool_head = Tensor::uniform_init({cfg.d, cfg.d}, cfg.d, rng);
        return p;
    }

    std::size_t dim() const { return pool_head.rows(); }
    std::size_t n_layers() const { return shared_attn.size(); }
    std::size_t n_queries() const { return query_bank.rows(); }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out{txt_in_proj, img_in_proj};
        for (std::size_t l = 0; l < shared_attn.size(); ++l) {
            for (auto& t : shared_attn[l].tensors()) out.push_back(t);
            for (auto& t : cross_attn[l].tensors()) out.push_back(t);
        }
        out.push_back(query_bank);
        out.push_back(pool_head);
        return out;
    }

    NamedTensorList named() const {
        NamedTensorList out;
        out.emplace_back("txt_in_proj", txt_in_proj);
        out.emplace_back("img_in_proj", img_in_proj);
        for (std::size_t l = 0; l < shared_attn.size(); ++l) {
            const std::string tag = "layer" + std::to_string(l) + ".";
            out.emplace_back(tag + "shared.wq", shared_attn[l].wq);
            out.emplace_back(tag + "shared.wk", shared_attn[l].wk);
            out.emplace_back(tag + "shared.wv", shared_attn[l].wv);
            out.emplace_back(tag + "shared.wo", shared_attn[l].wo);
            out.emplace_back(tag + "cross.wq", cross_attn[l].wq);
            out.emplace_back(tag + "cross.wk", cross_attn[l].wk);
            out.emplace_back(tag + "cross.wv", cross_attn[l].wv);
            out.emplace_back(tag + "cross.wo", cross_attn[l].wo);
        }
        out.emplace_back("query_bank", query_bank);
        out.emplace_back("pool_head", pool_head);
        return out;
    }

    void set_requires_grad(bool on) {
        for (auto& t : tensors()) const_cast<Tensor&>(t).set_requires_grad(on);
    }
};

struct NodeEmbedding {
    Tensor fused;   // n_q x d
    Tensor pooled;  // 1 x d
};

// one shared self-attention layer: attention(q=k=v=seq), weights common to
// both modalities
inline Tensor share_attn_layer(Tape& tp, const AttentionParams& p, std::size_t heads, const Tensor& seq) {
    if (seq.rows() == 0) throw InvariantError("share_attn_layer: empty sequence");
    return attention(tp, p, seq, seq, seq, heads);
}

// queries attend over the concatenated img||txt token sequence; output keeps
// the query count regardless of sequence lengths
inline Tensor cross_fuse_layer(Tape& tp, const AttentionParams& p, std::size_t heads, const Tensor& queries,
                               const Tensor& img_seq, const Tensor& txt_seq) {
    if (img_seq.rows() + txt_seq.rows() == 0) throw InvariantError("cross_fuse_layer: both modalities empty");
    Tensor kv = tp.concat_rows({img_seq, txt_seq});
    return attention(tp, p, queries, kv, kv, heads);
}

// Full aligner forward for one node: project both feature sequences into the
// shared dim, then per layer run both through the shared attention and fuse
// into the carried query rows; pooled = pool_head applied to the query mean.
inline NodeEmbedding encode_node(Tape& tp, const AlignerParams& p, const MultimodalGraph& g, NodeId v) {
    g.check_node(v);
    Tensor txt = tp.matmul(g.txt_matrix(v), p.txt_in_proj);
    Tensor img = tp.matmul(g.img_matrix(v), p.img_in_proj);
    Tensor queries = p.query_bank;
    for (std::size_t l = 0; l < p.n_layers(); ++l) {
        txt = share_attn_layer(tp, p.shared_attn[l], p.n_heads, txt);
        img = share_attn_layer(tp, p.shared_attn[l], p.n_heads, img);
        queries = cross_fuse_layer(tp, p.cross_attn[l], p.n_heads, queries, img, txt);
    }
    NodeEmbedding out;
    out.fused = queries;
    out.pooled = tp.matmul(tp.mean_rows(queries), p.pool_head);
    return out;
}

// InfoNCE over a batch of pooled embeddings. `members` stacks the unique
// batch members (anchors and sampled positives); `pairs` lists
// (anchor row, positive row). For each pair the denominator runs over every
// member except the anchor itself; the result is the mean over pairs.
inline Tensor contrastive_loss(Tape& tp, const Tensor& members,
                               const std::vector<std::pair<std::size_t, std::size_t>>& pairs, double tau) {
    const std::size_t m = members.rows();
    if (!(tau > 0.0)) throw ConfigError("contrastive_loss: tau must be > 0");
    if (m < 2) throw InvariantError("contrastive_loss: need at least two batch members");
    if (pairs.empty()) throw InvariantError("contrastive_loss: every anchor needs a positive");
    for (const auto& [i, u] : pairs) {
        if (i >= m || u >= m) throw InvariantError("contrastive_loss: pair index out of range");
        if (i == u) throw InvariantError("contrastive_loss: anchor paired with itself");
    }

    Tensor z = tp.l2_normalize_rows(members);
    Tensor sims = tp.scale(tp.matmul_nt(z, z), 1.0 / tau);
    Tensor mask = Tensor::zeros({m, m});
    for (std::size_t i = 0; i < m; ++i) mask.value()[i * m + i] = -1e30;  // self excluded from B'
    Tensor masked = tp.add(sims, mask);
    Tensor lse = tp.logsumexp_rows(masked);  // m x 1

    std::vector<std::pair<std::size_t, std::size_t>> lse_picks, sim_picks;
    lse_picks.reserve(pairs.size());
    sim_picks.reserve(pairs.size());
    for (const auto& [i, u] : pairs) {
        lse_picks.emplace_back(i, 0);
        sim_picks.emplace_back(i, u);
    }
    Tensor per_pair = tp.sub(tp.gather_entries(lse, lse_picks), tp.gather_entries(masked, sim_picks));
    return tp.scale(tp.sum_all(per_pair), 1.0 / static_cast<double>(pairs.size()));
}

// ----------------------------- pretraining -----------------------------

struct PretrainResult {
    AlignerParams params;
    std::vector<double> loss_history;  // one entry per optimizer step
};

// Contrastive pretraining driver. Epochs shuffle each graph's non-isolated
// train anchors (same shuffle stream per graph, so identical graphs yield
// identical batches), chunk them into batches and interleave the graphs
// round-robin; every batch stays within one graph.
class AlignerTrainer {
public:
    AlignerTrainer(std::vector<const MultimodalGraph*> graphs, AlignerConfig cfg)
        : graphs_(std::move(graphs)), cfg_(cfg) {
        cfg_.check();
        if (graphs_.empty()) throw ConfigError("pretrain: no graphs given");
        const std::size_t d_t = graphs_[0]->d_t, d_i = graphs_[0]->d_i;
        for (const auto* g : graphs_) {
            if (g->d_t != d_t || g->d_i != d_i)
                throw ConfigError("pretrain: graphs disagree on feature dims");
            std::vector<NodeId> anchors;
            for (NodeId v = 0; v < g->num_nodes; ++v)
                if (g->splits[v] == Split::Train && g->degree(v) > 0) anchors.push_back(v);
            if (anchors.empty())
                throw InvariantError("pretrain: a graph has no non-isolated train node to anchor on");
            anchors_.push_back(std::move(anchors));
        }
        Rng init_rng(mix_seed(cfg_.seed, 0xA11));
        params_ = AlignerParams::init(cfg_, d_t, d_i, init_rng);
        adam_ = AdamState(params_.tensors(), AdamConfig{cfg_.lr, 0.9, 0.999, 1e-8});
        build_epoch_schedule();
    }

    const AlignerParams& params() const { return params_; }
    AlignerParams& params() { return params_; }
    const std::vector<double>& history() const { return history_; }
    std::size_t epoch() const { return epoch_; }
    std::size_t last_batch_members() const { return last_batch_members_; }

    bool done() const { return epoch_ >= cfg_.epochs; }

    // one optimizer step over the next scheduled batch; apply=false computes
    // the loss and gradients but skips the parameter update
    double step(bool apply = true) {
        if (done()) throw InvariantError("pretrain: training already finished");
        const auto [gi, batch] = schedule_[cursor_];
        const MultimodalGraph& g = *graphs_[gi];

        Rng pos_rng(mix_seed(cfg_.seed, 0x5AE0 + global_step_));
        std::vector<NodeId> members;
        std::map<NodeId, std::size_t> row_of;
        auto row = [&](NodeId v) {
            auto it = row_of.find(v);
            if (it != row_of.end()) return it->second;
            const std::size_t r = members.size();
            members.push_back(v);
            row_of.emplace(v, r);
            return r;
        };
        std::vector<std::pair<std::size_t, std::size_t>> pairs;
        for (NodeId a : batch) {
            const auto positives = sample_neighbors(g, a, cfg_.neighbors_per_anchor, pos_rng);
            const std::size_t ra = row(a);
            for (NodeId u : positives) pairs.emplace_back(ra, row(u));
        }

        Tape tape;
        std::vector<Tensor> pooled_rows;
        pooled_rows.reserve(members.size());
        for (NodeId v : members) pooled_rows.push_back(encode_node(tape, params_, g, v).pooled);
        Tensor z = tp_concat(tape, pooled_rows);
        Tensor loss = contrastive_loss(tape, z, pairs, cfg_.tau);
        tape.backward(loss);
        if (apply) adam_.step();

        last_batch_members_ = members.size();
        history_.push_back(loss.item());
        ++global_step_;
        advance_cursor();
        return history_.back();
    }

    void run() {
        while (!done()) step();
    }

private:
    static Tensor tp_concat(Tape& tp, const std::vector<Tensor>& rows) {
        return rows.size() == 1 ? rows[0] : tp.concat_rows(rows);
    }

    void build_epoch_schedule() {
        schedule_.clear();
        cursor_ = 0;
        std::vector<std::vector<std::vector<NodeId>>> per_graph;
        for (std::size_t gi = 0; gi < graphs_.size(); ++gi) {
            auto order = anchors_[gi];
            Rng shuffle_rng(mix_seed(cfg_.seed, 0xE90C + epoch_));
            shuffle_rng.shuffle(order);
            std::vector<std::vector<NodeId>> batches;
            for (std::size_t i = 0; i < order.size(); i += cfg_.batch_size) {
                const std::size_t end = std::min(order.size(), i + cfg_.batch_size);
                batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
            }
            per_graph.push_back(std::move(batches));
        }
        bool any = true;
        for (std::size_t round = 0; any; ++round) {
            any = false;
            for (std::size_t gi = 0; gi < per_graph.size(); ++gi)
                if (round < per_graph[gi].size()) {
                    schedule_.emplace_back(gi, std::move(per_graph[gi][round]));
                    any = true;
                }
        }
    }

    void advance_cursor() {
        ++cursor_;
        if (cursor_ >= schedule_.size()) {
            ++epoch_;
            if (!done()) build_epoch_schedule();
        }
    }

    std::vector<const MultimodalGraph*> graphs_;
    AlignerConfig cfg_;
    std::vector<std::vector<NodeId>> anchors_;
    AlignerParams params_;
    AdamState adam_;
    std::vector<std::pair<std::size_t, std::vector<NodeId>>> schedule_;
    std::size_t cursor_ = 0;
    std::size_t epoch_ = 0;
    std::size_t global_step_ = 0;
    std::size_t last_batch_members_ = 0;
    std::vector<double> history_;
};

inline PretrainResult pretrain(const std::vector<const MultimodalGraph*>& graphs, const AlignerConfig& cfg) {
    AlignerTrainer trainer(graphs, cfg);
    trainer.run();
    return {trainer.params(), trainer.history()};
}

// ----------------------------- export -----------------------------

struct EmbeddingTable {
    Tensor pooled;    // num_nodes x d
    Tensor fused;     // (num_nodes * n_q) x d, node-major row blocks
    Tensor img_mean;  // num_nodes x d, mean-pooled image tokens in aligner space
    Tensor img_seq;   // (num_nodes * n_v) x d, per-patch image tokens in aligner space

    std::size_t n_q = 0;
    std::size_t n_v = 0;

    Tensor fused_rows(NodeId v) const {
        std::vector<double> buf(fused.value().begin() + static_cast<std::ptrdiff_t>(v * n_q * fused.cols()),
                                fused.value().begin() + static_cast<std::ptrdiff_t>((v + 1) * n_q * fused.cols()));
        return Tensor::from_vector({n_q, fused.cols()}, std::move(buf));
    }

    Tensor pooled_row(NodeId v) const {
        std::vector<double> buf(pooled.value().begin() + static_cast<std::ptrdiff_t>(v * pooled.cols()),
                                pooled.value().begin() + static_cast<std::ptrdiff_t>((v + 1) * pooled.cols()));
        return Tensor::from_vector({1, pooled.cols()}, std::move(buf));
    }

    Tensor img_mean_row(NodeId v) const {
        std::vector<double> buf(img_mean.value().begin() + static_cast<std::ptrdiff_t>(v * img_mean.cols()),
                                img_mean.value().begin() + static_cast<std::ptrdiff_t>((v + 1) * img_mean.cols()));
        return Tensor::from_vector({1, img_mean.cols()}, std::move(buf));
    }

    Tensor img_seq_rows(NodeId v) const {
        std::vector<double> buf(img_seq.value().begin() + static_cast<std::ptrdiff_t>(v * n_v * img_seq.cols()),
                                img_seq.value().begin() + static_cast<std::ptrdiff_t>((v + 1) * n_v * img_seq.cols()));
        return Tensor::from_vector({n_v, img_seq.cols()}, std::move(buf));
    }
};

inline EmbeddingTable export_embeddings(const AlignerParams& p, const MultimodalGraph& g) {
    if (g.d_t != p.txt_in_proj.rows() || g.d_i != p.img_in_proj.rows())
        throw InvariantError("export_embeddings: aligner dims do not match graph feature dims");
    const std::size_t d = p.dim(), n_q = p.n_queries();
    EmbeddingTable table;
    table.n_q = n_q;
    table.n_v = g.n_v;
    table.pooled = Tensor::zeros({g.num_nodes, d});
    table.fused = Tensor::zeros({g.num_nodes * n_q, d});
    table.img_mean = Tensor::zeros({g.num_nodes, d});
    table.img_seq = Tensor::zeros({g.num_nodes * g.n_v, d});
    Tape tape;
    tape.set_recording(false);
    for (NodeId v = 0; v < g.num_nodes; ++v) {
        auto emb = encode_node(tape, p, g, v);
        std::copy_n(emb.pooled.value().data(), d, table.pooled.value().data() + v * d);
        std::copy_n(emb.fused.value().data(), n_q * d, table.fused.value().data() + v * n_q * d);
        auto seq = tape.matmul(g.img_matrix(v), p.img_in_proj);
        std::copy_n(seq.value().data(), g.n_v * d, table.img_seq.value().data() + v * g.n_v * d);
        auto img = tape.mean_rows(seq);
        std::copy_n(img.value().data(), d, table.img_mean.value().data() + v * d);
    }
    return table;
}

}  // namespace mmgl
