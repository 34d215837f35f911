#pragma once

#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include "mmgl/aligner.hpp"
#include "mmgl/checkpoint.hpp"
#include "mmgl/decoder.hpp"
#include "mmgl/demos.hpp"
#include "mmgl/optim.hpp"
#include "mmgl/prompt.hpp"

namespace mmgl {

struct ProjectorParams {
    Tensor w1, b1;  // d_in x d_dec, 1 x d_dec
    Tensor w2, b2;  // d_dec x d_dec, 1 x d_dec

    static ProjectorParams init(std::size_t d_in, std::size_t d_dec, Rng& rng) {
        if (d_in == 0 || d_dec == 0) throw ConfigError("projector dims must be positive");
        ProjectorParams p;
        p.w1 = Tensor::uniform_init({d_in, d_dec}, d_in, rng);
        p.b1 = Tensor::zeros({1, d_dec}, true);
        p.w2 = Tensor::uniform_init({d_dec, d_dec}, d_dec, rng);
        p.b2 = Tensor::zeros({1, d_dec}, true);
        return p;
    }

    std::size_t d_in() const { return w1.rows(); }
    std::size_t d_out() const { return w2.cols(); }

    std::vector<Tensor> tensors() const { return {w1, b1, w2, b2}; }

    NamedTensorList named() const {
        return {{"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}};
    }

    void set_requires_grad(bool on) {
        for (auto& t : tensors()) t.set_requires_grad(on);
    }
};

// row-wise two-layer GELU map from aligner space into decoder token space
inline Tensor project(Tape& tp, const ProjectorParams& pp, const Tensor& rows) {
    if (rows.cols() != pp.d_in())
        throw InvariantError("project: input dim " + std::to_string(rows.cols()) +
                             " does not match projector " + std::to_string(pp.d_in()));
    return tp.add_row(
        tp.matmul(tp.gelu(tp.add_row(tp.matmul(rows, pp.w1), pp.b1)), pp.w2), pp.b2);
}

struct AssembledInput {
    Tensor embeddings;                 // T x d_dec
    std::vector<std::size_t> targets;  // answer ids then <eos>; empty at inference
    std::size_t first_target_row = 0;  // logits row predicting targets[0]
    std::size_t text_tokens = 0;
    std::size_t graph_rows = 0;
    std::size_t image_rows = 0;
    std::size_t answer_tokens = 0;
};

inline AssembledInput assemble_decoder_input(Tape& tp, const PromptSequence& seq,
                                             const ProjectorParams& pp,
                                             const EmbeddingTable& table,
                                             const FrozenDecoder& dec,
                                             bool image_sequence = false) {
    if (pp.d_out() != dec.cfg.d_dec) throw InvariantError("projector output dim != decoder dim");
    if (seq.segments.empty()) throw InvariantError("cannot assemble an empty prompt");
    const std::size_t n_nodes = table.pooled.rows();

    AssembledInput out;
    std::vector<Tensor> parts;
    for (const auto& s : seq.segments) {
        switch (s.kind) {
            case SegmentKind::Text: {
                auto ids = dec.encode_words(tokenize(s.text));
                if (ids.empty()) break;
                parts.push_back(dec.embed_ids(tp, ids));
                out.text_tokens += ids.size();
                break;
            }
            case SegmentKind::GraphSlot: {
                if (s.ref.u >= n_nodes || s.ref.v >= n_nodes)
                    throw InvariantError("graph slot references a node outside the table");
                Tensor fused = s.ref.is_edge
                                   ? tp.concat_rows({table.fused_rows(s.ref.u), table.fused_rows(s.ref.v)})
                                   : table.fused_rows(s.ref.u);
                parts.push_back(project(tp, pp, fused));
                out.graph_rows += fused.rows();
                break;
            }
            case SegmentKind::ImageSlot: {
                if (s.ref.u >= n_nodes || s.ref.v >= n_nodes)
                    throw InvariantError("image slot references a node outside the table");
                Tensor img;
                if (image_sequence) {
                    img = s.ref.is_edge
                              ? tp.concat_rows({table.img_seq_rows(s.ref.u), table.img_seq_rows(s.ref.v)})
                              : table.img_seq_rows(s.ref.u);
                } else {
                    img = s.ref.is_edge
                              ? tp.scale(tp.add(table.img_mean_row(s.ref.u), table.img_mean_row(s.ref.v)), 0.5)
                              : table.img_mean_row(s.ref.u);
                }
                parts.push_back(project(tp, pp, img));
                out.image_rows += img.rows();
                break;
            }
        }
    }
    if (parts.empty()) throw InvariantError("prompt produced no decoder input rows");

    const auto answer_words = tokenize(seq.answer);
    if (!answer_words.empty()) {
        auto ids = dec.encode_words(answer_words);
        out.targets = ids;
        out.targets.push_back(Vocabulary::kEos);
        out.answer_tokens = out.targets.size();
        parts.push_back(dec.embed_ids(tp, ids));
    }

    out.embeddings = parts.size() == 1 ? parts[0] : tp.concat_rows(parts);
    const std::size_t prompt_rows = out.embeddings.rows() - answer_words.size();
    out.first_target_row = prompt_rows - 1;
    return out;
}

// mean next-token cross-entropy over answer positions only
inline Tensor instruction_loss(Tape& tp, const FrozenDecoder& dec, const AssembledInput& in) {
    if (in.targets.empty()) throw InvariantError("instruction loss needs a nonempty answer");
    auto logits = dec.forward(tp, in.embeddings);
    auto rows = tp.slice_rows(logits, in.first_target_row, in.targets.size());
    return tp.cross_entropy_logits(rows, in.targets);
}

// one training item; NC uses u only, LP uses the (u, v) pair
struct InstructExample {
    TaskKind task = TaskKind::NC;
    NodeId u = 0;
    NodeId v = 0;
    DemonstrationSet demos;
    std::string answer;
};

inline PromptSequence example_prompt(const MultimodalGraph& g, const InstructExample& ex,
                                     PromptMode mode, const PromptTemplates& tpl) {
    if (ex.task == TaskKind::NC) return build_nc_prompt(g, ex.u, ex.demos, mode, tpl);
    return build_lp_prompt(g, ex.u, ex.v, ex.demos, mode, ex.answer, tpl);
}

inline std::vector<InstructExample> make_nc_examples(const MultimodalGraph& g, Split split,
                                                     std::size_t k, const PPRConfig& cfg = {}) {
    std::vector<InstructExample> out;
    for (NodeId v : g.nodes_in_split(split)) {
        if (g.labels[v] < 0) continue;
        InstructExample ex;
        ex.task = TaskKind::NC;
        ex.u = v;
        ex.demos = select_nc_demos(g, v, k, cfg);
        ex.answer = g.label_names[static_cast<std::size_t>(g.labels[v])];
        out.push_back(std::move(ex));
    }
    return out;
}

inline std::vector<InstructExample> make_lp_examples(const MultimodalGraph& g, Split split,
                                                     Rng& rng, const LpDemoOptions& opts = {}) {
    std::vector<InstructExample> out;
    auto emit = [&](const EdgePair& e, bool together) {
        InstructExample ex;
        ex.task = TaskKind::LP;
        ex.u = e.first;
        ex.v = e.second;
        ex.demos = select_lp_demos(g, e.first, e.second, rng, opts);
        ex.answer = together ? "Yes" : "No";
        out.push_back(std::move(ex));
    };
    for (const auto& e : g.edge_splits.pos(split)) emit(e, true);
    for (const auto& e : g.edge_splits.neg(split)) emit(e, false);
    return out;
}

// demo edges visible during tuning must not leak held-out positives
inline std::set<EdgePair> held_out_edges(const MultimodalGraph& g) {
    std::set<EdgePair> out;
    for (auto split : {Split::Val, Split::Test})
        for (const auto& e : g.edge_splits.pos(split)) out.insert(detail::canonical_edge(e.first, e.second));
    return out;
}

struct TuneConfig {
    double lr = 2e-5;
    std::size_t epochs = 4;
    std::size_t batch_size = 6;
    std::uint64_t seed = 5;
    PromptMode mode = PromptMode::WithDemos;
    bool image_sequence = false;  // feed per-patch image rows instead of one pooled vector

    void check() const {
        if (lr <= 0) throw ConfigError("tune lr must be positive");
        if (epochs == 0 || batch_size == 0) throw ConfigError("tune epochs and batch size must be positive");
    }
};

// one graph's tuning material: the graph, its frozen embeddings, its examples
struct TuneUnit {
    const MultimodalGraph* graph = nullptr;
    const EmbeddingTable* table = nullptr;
    std::vector<InstructExample> examples;
};

struct TuneResult {
    ProjectorParams projector;
    std::vector<double> loss_history;  // per optimizer step
};

inline ProjectorParams init_projector(std::size_t d_in, std::size_t d_dec, std::uint64_t seed) {
    Rng rng(mix_seed(seed, 0x9801));
    return ProjectorParams::init(d_in, d_dec, rng);
}

inline TuneResult tune_projector(const FrozenDecoder& dec, const AlignerParams& aligner,
                                 const std::vector<TuneUnit>& units, const TuneConfig& cfg,
                                 const PromptTemplates& tpl = PromptTemplates::builtin()) {
    cfg.check();
    if (!dec.frozen()) throw InvariantError("tune_projector requires a frozen decoder");
    for (const auto& t : dec.tensors())
        if (t.requires_grad()) throw InvariantError("decoder parameter not frozen");
    for (const auto& t : aligner.tensors())
        if (t.requires_grad()) throw InvariantError("aligner parameter not frozen");
    if (units.empty()) throw ConfigError("tune_projector needs at least one graph");
    for (const auto& u : units)
        if (!u.graph || !u.table) throw ConfigError("tune unit missing graph or embedding table");

    const std::uint64_t dec_sum_before = checkpoint_checksum(dec.named());
    const std::uint64_t aln_sum_before = checkpoint_checksum(aligner.named());

    // batches interleave (graph, task) buckets round-robin
    struct Bucket {
        std::size_t unit = 0;
        std::vector<std::size_t> examples;
    };
    std::vector<Bucket> buckets;
    for (std::size_t ui = 0; ui < units.size(); ++ui) {
        for (auto task : {TaskKind::NC, TaskKind::LP}) {
            Bucket b;
            b.unit = ui;
            for (std::size_t ei = 0; ei < units[ui].examples.size(); ++ei)
                if (units[ui].examples[ei].task == task) b.examples.push_back(ei);
            if (!b.examples.empty()) buckets.push_back(std::move(b));
        }
    }
    if (buckets.empty()) throw ConfigError("tune_projector has no training examples");

    TuneResult out;
    out.projector = init_projector(aligner.dim(), dec.cfg.d_dec, cfg.seed);
    AdamConfig acfg;
    acfg.lr = cfg.lr;
    AdamState adam(out.projector.tensors(), acfg);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::vector<std::vector<std::size_t>>> batches(buckets.size());
        std::size_t most = 0;
        for (std::size_t bi = 0; bi < buckets.size(); ++bi) {
            auto order = buckets[bi].examples;
            Rng shuffle_rng(mix_seed(cfg.seed, 0x7E01 + 131 * epoch + bi));
            shuffle_rng.shuffle(order);
            for (std::size_t at = 0; at < order.size(); at += cfg.batch_size) {
                const auto end = std::min(order.size(), at + cfg.batch_size);
                batches[bi].emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            }
            most = std::max(most, batches[bi].size());
        }
        for (std::size_t round = 0; round < most; ++round) {
            for (std::size_t bi = 0; bi < buckets.size(); ++bi) {
                if (round >= batches[bi].size()) continue;
                const auto& unit = units[buckets[bi].unit];
                Tape tp;
                Tensor total = Tensor::zeros({1});
                for (auto ei : batches[bi][round]) {
                    const auto& ex = unit.examples[ei];
                    auto prompt = example_prompt(*unit.graph, ex, cfg.mode, tpl);
                    if (prompt.answer.empty()) throw InvariantError("training example lacks an answer");
                    auto assembled = assemble_decoder_input(tp, prompt, out.projector, *unit.table,
                                                            dec, cfg.image_sequence);
                    total = tp.add(total, instruction_loss(tp, dec, assembled));
                }
                auto loss = tp.scale(total, 1.0 / static_cast<double>(batches[bi][round].size()));
                tp.backward(loss);
                adam.step();
                out.loss_history.push_back(loss.item());
            }
        }
    }

    if (checkpoint_checksum(dec.named()) != dec_sum_before)
        throw InvariantError("decoder parameters changed during projector tuning");
    if (checkpoint_checksum(aligner.named()) != aln_sum_before)
        throw InvariantError("aligner parameters changed during projector tuning");
    return out;
}

inline std::string normalize_answer(const std::string& s) {
    std::string out;
    for (const auto& w : tokenize(s)) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

// greedy decode; stops at <eos> or max_len generated tokens
inline std::string predict(const FrozenDecoder& dec, const ProjectorParams& pp,
                           const PromptSequence& prompt, const EmbeddingTable& table,
                           std::size_t max_len = 4, bool image_sequence = false) {
    if (!prompt.answer.empty()) throw InvariantError("predict expects a prompt without an answer");
    if (max_len == 0) throw ConfigError("predict needs max_len >= 1");
    Tape tp;
    tp.set_recording(false);
    auto assembled = assemble_decoder_input(tp, prompt, pp, table, dec, image_sequence);
    Tensor seq = assembled.embeddings;
    std::vector<std::string> words;
    for (std::size_t step = 0; step < max_len; ++step) {
        auto logits = dec.forward(tp, seq);
        const std::size_t last = logits.rows() - 1;
        std::size_t best = 0;
        double best_v = logits.at(last, 0);
        for (std::size_t j = 1; j < logits.cols(); ++j) {
            if (logits.at(last, j) > best_v) {
                best_v = logits.at(last, j);
                best = j;
            }
        }
        if (best == Vocabulary::kEos) break;
        words.push_back(dec.vocab.word(best));
        seq = tp.concat_rows({seq, dec.embed_ids(tp, {best})});
    }
    std::string out;
    for (const auto& w : words) {
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

inline double evaluate_accuracy(const std::vector<std::string>& predictions,
                                const std::vector<std::string>& truths) {
    if (predictions.size() != truths.size())
        throw InvariantError("evaluate_accuracy: prediction and truth counts differ");
    if (predictions.empty()) throw InvariantError("evaluate_accuracy: empty evaluation set");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (normalize_answer(predictions[i]) == normalize_answer(truths[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

}  // namespace mmgl
