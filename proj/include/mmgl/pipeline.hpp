#pragma once

#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmgl/aligner.hpp"
#include "mmgl/config.hpp"
#include "mmgl/decoder.hpp"
#include "mmgl/demos.hpp"
#include "mmgl/gradcheck.hpp"
#include "mmgl/graph.hpp"
#include "mmgl/instruct.hpp"
#include "mmgl/probe.hpp"

#include "json.hpp"

namespace mmgl {

struct RunPaths {
    std::filesystem::path root;

    std::filesystem::path config_file() const { return root / "config.resolved"; }
    std::filesystem::path graph_dir(std::size_t i) const {
        return root / "graphs" / ("g" + std::to_string(i));
    }
    std::filesystem::path aligner_ckpt() const { return root / "aligner.ckpt"; }
    std::filesystem::path pretrain_loss() const { return root / "pretrain_loss.tsv"; }
    std::filesystem::path embeddings_ckpt(std::size_t i) const {
        return root / "embeddings" / ("g" + std::to_string(i) + ".ckpt");
    }
    std::filesystem::path nc_demos_file(std::size_t i) const {
        return root / "demos" / ("g" + std::to_string(i) + "_nc.jsonl");
    }
    std::filesystem::path lp_demos_file(std::size_t i, Split s) const {
        return root / "demos" / ("g" + std::to_string(i) + "_lp_" + split_name(s) + ".jsonl");
    }
    std::filesystem::path decoder_ckpt() const { return root / "decoder.ckpt"; }
    std::filesystem::path decoder_vocab() const { return root / "decoder_vocab.txt"; }
    std::filesystem::path decoder_loss() const { return root / "decoder_pretrain_loss.tsv"; }
    std::filesystem::path projector_ckpt() const { return root / "projector.ckpt"; }
    std::filesystem::path tune_loss() const { return root / "tune_loss.tsv"; }
    std::filesystem::path metrics() const { return root / "metrics.tsv"; }
    std::filesystem::path predictions(std::size_t i, TaskKind t) const {
        return root / ("predictions_g" + std::to_string(i) + "_" + task_name(t) + ".jsonl");
    }
    std::filesystem::path ablation() const { return root / "ablation.tsv"; }
};

inline RunPaths run_paths(const RunConfig& cfg) {
    return RunPaths{std::filesystem::path(cfg.get("out_root")) / hex64(cfg.hash())};
}

inline void persist_config(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    std::filesystem::create_directories(paths.root);
    write_text_file(paths.config_file(), cfg.serialized());
}

namespace pipe {

inline SynthConfig synth_config(const RunConfig& cfg, std::size_t graph_index) {
    SynthConfig s;
    s.num_nodes = cfg.get_size("num_nodes");
    s.num_classes = cfg.get_size("num_classes");
    s.p_in = cfg.get_double("p_in");
    s.p_out = cfg.get_double("p_out");
    s.d_t = cfg.get_size("d_t");
    s.d_i = cfg.get_size("d_i");
    s.n_t = cfg.get_size("n_t");
    s.n_v = cfg.get_size("n_v");
    s.txt_signal = cfg.get_double("txt_signal");
    s.img_signal = cfg.get_double("img_signal");
    s.noise_sigma = cfg.get_double("noise_sigma");
    s.seed = mix_seed(cfg.get_u64("seed"), 0x59A0 + graph_index);
    return s;
}

inline AlignerConfig aligner_config(const RunConfig& cfg) {
    AlignerConfig a;
    a.d = cfg.get_size("align_d");
    a.n_heads = cfg.get_size("align_heads");
    a.n_layers = cfg.get_size("align_layers");
    a.n_q = cfg.get_size("align_n_q");
    a.tau = cfg.get_double("align_tau");
    a.neighbors_per_anchor = cfg.get_size("align_neighbors");
    a.batch_size = cfg.get_size("align_batch");
    a.lr = cfg.get_double("align_lr");
    a.epochs = cfg.get_size("align_epochs");
    a.seed = cfg.get_u64("seed");
    return a;
}

inline PPRConfig ppr_config(const RunConfig& cfg) {
    PPRConfig p;
    p.alpha = cfg.get_double("ppr_alpha");
    p.tol = cfg.get_double("ppr_tol");
    p.max_iter = cfg.get_size("ppr_max_iter");
    return p;
}

inline DecoderConfig decoder_config(const RunConfig& cfg) {
    DecoderConfig d;
    d.d_dec = cfg.get_size("dec_d");
    d.n_layers = cfg.get_size("dec_layers");
    d.n_heads = cfg.get_size("dec_heads");
    d.ffn_mult = cfg.get_size("dec_ffn_mult");
    d.lr = cfg.get_double("dec_lr");
    d.epochs = cfg.get_size("dec_epochs");
    d.answer_weight = cfg.get_double("dec_answer_weight");
    d.seed = cfg.get_u64("seed");
    return d;
}

inline bool image_sequence_mode(const RunConfig& cfg) {
    const auto mode = cfg.get("image_mode");
    if (mode == "mean") return false;
    if (mode == "sequence") return true;
    throw ConfigError("image_mode must be mean or sequence, got: " + mode);
}

inline TuneConfig tune_config(const RunConfig& cfg) {
    TuneConfig t;
    t.lr = cfg.get_double("tune_lr");
    t.epochs = cfg.get_size("tune_epochs");
    t.batch_size = cfg.get_size("tune_batch");
    t.seed = cfg.get_u64("seed");
    t.mode = prompt_mode_from_name(cfg.get("tune_mode"));
    t.image_sequence = image_sequence_mode(cfg);
    return t;
}

inline std::vector<TaskKind> task_list(const RunConfig& cfg) {
    std::vector<TaskKind> out;
    for (const auto& name : cfg.get_list("tasks")) out.push_back(task_from_name(name));
    if (out.empty()) throw ConfigError("tasks must name at least one of nc, lp");
    return out;
}

inline PromptTemplates templates(const RunConfig& cfg) {
    const auto dir = cfg.get("templates_dir");
    if (dir.empty()) return PromptTemplates::builtin();
    return PromptTemplates::load(dir);
}

inline std::size_t count_graphs(const RunPaths& paths) {
    std::size_t n = 0;
    while (std::filesystem::exists(paths.graph_dir(n) / "graph.meta")) ++n;
    return n;
}

inline std::vector<MultimodalGraph> load_graphs(const RunPaths& paths) {
    const std::size_t n = count_graphs(paths);
    if (n == 0)
        throw MissingArtifactError("no graphs under " + (paths.root / "graphs").string() +
                                   "; run synth or ingest first");
    std::vector<MultimodalGraph> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(load_graph(paths.graph_dir(i)));
    return out;
}

inline AlignerParams load_aligner(const RunConfig& cfg, const RunPaths& paths,
                                  const MultimodalGraph& g) {
    if (!std::filesystem::exists(paths.aligner_ckpt()))
        throw MissingArtifactError("aligner checkpoint missing; run pretrain first");
    Rng rng(0);
    auto params = AlignerParams::init(aligner_config(cfg), g.d_t, g.d_i, rng);
    restore_into(load_checkpoint(paths.aligner_ckpt()), params.named());
    params.set_requires_grad(false);
    return params;
}

inline void save_embedding_table(const std::filesystem::path& path, const EmbeddingTable& t) {
    NamedTensorList items;
    items.emplace_back("pooled", t.pooled);
    items.emplace_back("fused", t.fused);
    items.emplace_back("img_mean", t.img_mean);
    items.emplace_back("img_seq", t.img_seq);
    items.emplace_back("n_q", Tensor::from_vector({1}, {static_cast<double>(t.n_q)}));
    items.emplace_back("n_v", Tensor::from_vector({1}, {static_cast<double>(t.n_v)}));
    save_checkpoint(path, items);
}

inline EmbeddingTable load_embedding_table(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw MissingArtifactError("embedding table missing: " + path.string() + "; run embed first");
    EmbeddingTable t;
    for (auto& [name, tensor] : load_checkpoint(path)) {
        if (name == "pooled")
            t.pooled = tensor;
        else if (name == "fused")
            t.fused = tensor;
        else if (name == "img_mean")
            t.img_mean = tensor;
        else if (name == "img_seq")
            t.img_seq = tensor;
        else if (name == "n_q")
            t.n_q = static_cast<std::size_t>(tensor.item());
        else if (name == "n_v")
            t.n_v = static_cast<std::size_t>(tensor.item());
        else
            throw InvariantError("unexpected entry in embedding table: " + name);
    }
    if (!t.pooled.defined() || !t.fused.defined() || !t.img_mean.defined() ||
        !t.img_seq.defined() || t.n_q == 0 || t.n_v == 0)
        throw InvariantError("embedding table file is incomplete");
    return t;
}

inline void write_loss_tsv(const std::filesystem::path& path, const std::vector<double>& history) {
    std::string out = "step\tloss\n";
    for (std::size_t i = 0; i < history.size(); ++i)
        out += std::to_string(i) + "\t" + format_double(history[i], 9) + "\n";
    write_text_file(path, out);
}

inline std::uint64_t pair_seed(std::uint64_t seed, NodeId u, NodeId v) {
    return mix_seed(mix_seed(seed, 0x1D00 + u), v);
}

// demonstration lookup keyed by anchor (NC) or anchor pair (LP)
struct DemoBank {
    std::map<NodeId, DemonstrationSet> nc;
    std::map<EdgePair, DemonstrationSet> lp;

    const DemonstrationSet& nc_for(NodeId anchor) const {
        auto it = nc.find(anchor);
        if (it == nc.end())
            throw MissingArtifactError("no NC demonstrations for node " + std::to_string(anchor));
        return it->second;
    }
    const DemonstrationSet& lp_for(NodeId u, NodeId v) const {
        auto it = lp.find({u, v});
        if (it == lp.end())
            throw MissingArtifactError("no LP demonstrations for pair " + std::to_string(u) + "," +
                                       std::to_string(v));
        return it->second;
    }
};

inline DemoBank load_demo_bank(const RunPaths& paths, std::size_t graph_index) {
    DemoBank bank;
    const auto nc_path = paths.nc_demos_file(graph_index);
    if (!std::filesystem::exists(nc_path))
        throw MissingArtifactError("demonstrations missing: " + nc_path.string() + "; run demos first");
    for (auto& s : demos_from_jsonl(read_text_file(nc_path))) bank.nc[s.anchor] = std::move(s);
    for (auto split : {Split::Train, Split::Val, Split::Test}) {
        const auto lp_path = paths.lp_demos_file(graph_index, split);
        if (!std::filesystem::exists(lp_path)) continue;
        for (auto& s : demos_from_jsonl(read_text_file(lp_path)))
            bank.lp[{s.anchor, s.anchor_v}] = std::move(s);
    }
    return bank;
}

// examples assembled from stored demonstrations; caps keep runtimes bounded
inline std::vector<InstructExample> bank_examples(const MultimodalGraph& g, const DemoBank& bank,
                                                  TaskKind task, Split split, std::size_t limit,
                                                  std::uint64_t seed) {
    std::vector<InstructExample> out;
    if (task == TaskKind::NC) {
        for (NodeId v : g.nodes_in_split(split)) {
            if (g.labels[v] < 0) continue;
            InstructExample ex;
            ex.task = TaskKind::NC;
            ex.u = v;
            ex.demos = bank.nc_for(v);
            ex.answer = g.label_names[static_cast<std::size_t>(g.labels[v])];
            out.push_back(std::move(ex));
        }
    } else {
        auto emit = [&](const EdgePair& e, bool together) {
            InstructExample ex;
            ex.task = TaskKind::LP;
            ex.u = e.first;
            ex.v = e.second;
            ex.demos = bank.lp_for(e.first, e.second);
            ex.answer = together ? "Yes" : "No";
            out.push_back(std::move(ex));
        };
        for (const auto& e : g.edge_splits.pos(split)) emit(e, true);
        for (const auto& e : g.edge_splits.neg(split)) emit(e, false);
    }
    if (limit > 0 && out.size() > limit) {
        Rng rng(mix_seed(seed, 0x11A7));
        rng.shuffle(out);
        out.resize(limit);
    }
    return out;
}

}  // namespace pipe

inline std::size_t stage_synth(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    const std::size_t n = cfg.get_size("num_graphs");
    if (n == 0) throw ConfigError("num_graphs must be at least 1");
    const std::string labels_mode = cfg.get("labels");
    if (labels_mode != "blocks" && labels_mode != "neighbor_majority")
        throw ConfigError("labels must be blocks or neighbor_majority, got: " + labels_mode);
    for (std::size_t i = 0; i < n; ++i) {
        auto g = synth_graph(pipe::synth_config(cfg, i));
        if (labels_mode == "neighbor_majority") relabel_neighbor_majority(g);
        save_graph(g, paths.graph_dir(i));
    }
    persist_config(cfg);
    return n;
}

inline std::size_t stage_ingest(const RunConfig& cfg) {
    const auto dir = cfg.get("ingest_dir");
    if (dir.empty()) throw ConfigError("ingest requires ingest_dir");
    const auto paths = run_paths(cfg);
    auto g = load_graph(dir);
    const std::size_t index = pipe::count_graphs(paths);
    save_graph(g, paths.graph_dir(index));
    persist_config(cfg);
    return index;
}

inline std::size_t stage_validate(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    auto graphs = pipe::load_graphs(paths);
    std::size_t issues = 0;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        for (const auto& msg : validate(graphs[i])) {
            std::fprintf(stderr, "g%zu: %s\n", i, msg.c_str());
            ++issues;
        }
    }
    if (issues > 0) throw InvariantError(std::to_string(issues) + " validation issue(s)");
    return graphs.size();
}

inline double stage_pretrain(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    auto graphs = pipe::load_graphs(paths);
    std::vector<const MultimodalGraph*> refs;
    for (const auto& g : graphs) refs.push_back(&g);
    auto result = pretrain(refs, pipe::aligner_config(cfg));
    save_checkpoint(paths.aligner_ckpt(), result.params.named());
    pipe::write_loss_tsv(paths.pretrain_loss(), result.loss_history);
    // embeddings are exported here as well so the five-stage chain
    // synth -> pretrain -> demos -> tune -> eval is self-sufficient
    result.params.set_requires_grad(false);
    for (std::size_t i = 0; i < graphs.size(); ++i)
        pipe::save_embedding_table(paths.embeddings_ckpt(i), export_embeddings(result.params, graphs[i]));
    persist_config(cfg);
    return result.loss_history.empty() ? 0.0 : result.loss_history.back();
}

inline std::size_t stage_embed(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    auto graphs = pipe::load_graphs(paths);
    auto params = pipe::load_aligner(cfg, paths, graphs[0]);
    for (std::size_t i = 0; i < graphs.size(); ++i)
        pipe::save_embedding_table(paths.embeddings_ckpt(i), export_embeddings(params, graphs[i]));
    persist_config(cfg);
    return graphs.size();
}

inline std::size_t stage_demos(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    auto graphs = pipe::load_graphs(paths);
    const auto ppr = pipe::ppr_config(cfg);
    const std::size_t k = cfg.get_size("k_demos");
    const std::size_t n_lp = cfg.get_size("lp_demos");
    const bool negatives = cfg.get_bool("lp_negative_demos");
    const std::uint64_t seed = cfg.get_u64("seed");

    std::size_t written = 0;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        const auto& g = graphs[i];
        std::vector<DemonstrationSet> nc_sets;
        for (NodeId v = 0; v < g.num_nodes; ++v)
            if (g.labels[v] >= 0) nc_sets.push_back(select_nc_demos(g, v, k, ppr));
        write_text_file(paths.nc_demos_file(i), demos_to_jsonl(nc_sets));
        ++written;

        // demo edges for training pairs must avoid held-out positives;
        // inference-time pairs may draw from the whole adjacency
        const auto forbidden = held_out_edges(g);
        for (auto split : {Split::Train, Split::Val, Split::Test}) {
            LpDemoOptions opts;
            opts.n_demos = n_lp;
            opts.with_negatives = negatives;
            opts.forbidden = split == Split::Train ? &forbidden : nullptr;
            std::vector<DemonstrationSet> lp_sets;
            auto add = [&](const EdgePair& e) {
                Rng rng(pipe::pair_seed(seed, e.first, e.second));
                lp_sets.push_back(select_lp_demos(g, e.first, e.second, rng, opts));
            };
            for (const auto& e : g.edge_splits.pos(split)) add(e);
            for (const auto& e : g.edge_splits.neg(split)) add(e);
            write_text_file(paths.lp_demos_file(i, split), demos_to_jsonl(lp_sets));
            ++written;
        }
    }
    persist_config(cfg);
    return written;
}

inline FrozenDecoder load_frozen_decoder(const RunConfig& cfg, const RunPaths& paths) {
    if (!std::filesystem::exists(paths.decoder_ckpt()) ||
        !std::filesystem::exists(paths.decoder_vocab()))
        throw MissingArtifactError("decoder artifacts missing; run tune first");
    Vocabulary vocab;
    std::istringstream words(read_text_file(paths.decoder_vocab()));
    std::string w;
    std::size_t line = 0;
    while (std::getline(words, w)) {
        if (line >= 4) vocab.add(w);  // first four lines are the reserved tokens
        ++line;
    }
    Rng rng(0);
    auto dec = FrozenDecoder::init(pipe::decoder_config(cfg), std::move(vocab), rng);
    restore_into(load_checkpoint(paths.decoder_ckpt()), dec.named());
    dec.freeze();
    return dec;
}

inline void save_frozen_decoder(const RunPaths& paths, const FrozenDecoder& dec) {
    save_checkpoint(paths.decoder_ckpt(), dec.named());
    std::string words;
    for (std::size_t i = 0; i < dec.vocab.size(); ++i) words += dec.vocab.word(i) + "\n";
    write_text_file(paths.decoder_vocab(), words);
}

namespace pipe {

// decoder LM corpus: capped training prompts rendered in every mode so the
// vocabulary covers whatever prompts evaluation later builds
// Classification prompts with shuffled demonstration labels and the answer set
// to their majority.  Real anchors repeat with fresh label assignments, so the
// decoder cannot memorize anchor-to-answer pairs and must instead learn to read
// the answer off the demonstration block, which is the behaviour a capable
// pretrained assistant would bring to these prompts.
inline std::vector<PromptSequence> drill_prompts(const RunConfig& cfg, const MultimodalGraph& g,
                                                 const PromptTemplates& tpl,
                                                 std::size_t graph_index) {
    const std::size_t n_drills = cfg.get_size("dec_drills");
    const std::size_t k = cfg.get_size("k_demos");
    const std::uint64_t seed = cfg.get_u64("seed");
    std::vector<PromptSequence> out;
    auto train = g.nodes_in_split(Split::Train);
    std::erase_if(train, [&](NodeId v) { return g.labels[v] < 0; });
    if (train.size() < k + 1 || g.label_names.size() < 2) return out;
    const std::size_t n_classes = g.label_names.size();
    // demonstrations come from a small fixed pool so the same blocks recur
    // under contradictory label assignments; item identity then carries no
    // information about the answer and only the printed labels do
    Rng pool_rng(mix_seed(seed, 0xD81F + graph_index));
    auto pool = train;
    pool_rng.shuffle(pool);
    pool.resize(std::min<std::size_t>(pool.size(), std::max<std::size_t>(k + 2, 8)));
    for (std::size_t d = 0; d < n_drills; ++d) {
        Rng rng(mix_seed(seed, 0xD811 + 9176 * graph_index + d));
        const NodeId anchor = train[rng.below(train.size())];
        DemonstrationSet ds;
        ds.task = TaskKind::NC;
        ds.anchor = anchor;
        std::vector<std::size_t> assigned(n_classes, 0);
        std::size_t guard = 0;
        while (ds.nc_demos.size() < k && ++guard < 1000) {
            const NodeId cand = pool[rng.below(pool.size())];
            if (cand == anchor) continue;
            bool dup = false;
            for (const auto& demo : ds.nc_demos) dup |= demo.node == cand;
            if (dup) continue;
            const std::size_t cls = rng.below(n_classes);
            ds.nc_demos.push_back({cand, g.label_names[cls]});
            ++assigned[cls];
        }
        if (ds.nc_demos.size() < k) continue;
        const std::size_t top = *std::max_element(assigned.begin(), assigned.end());
        std::size_t majority = n_classes;
        for (std::size_t c = 0; c < n_classes; ++c)
            if (assigned[c] == top) majority = (majority == n_classes) ? c : n_classes + 1;
        if (majority >= n_classes) continue;  // tied block has no clean target
        auto seq = build_nc_prompt(g, anchor, ds, PromptMode::WithDemos, tpl);
        seq.answer = g.label_names[majority];
        out.push_back(std::move(seq));
    }
    return out;
}

// one plain stream listing every node text, so item tokens outside the train
// split still enter the vocabulary with lightly trained embeddings
inline PromptSequence vocab_warmup(const MultimodalGraph& g) {
    PromptSequence seq;
    std::string text;
    for (const auto& t : g.node_text) {
        if (!text.empty()) text += ". ";
        text += t;
    }
    seq.segments.push_back({SegmentKind::Text, text, {}});
    return seq;
}

inline std::vector<PromptSequence> decoder_corpus(const RunConfig& cfg,
                                                  const std::vector<MultimodalGraph>& graphs,
                                                  const std::vector<DemoBank>& banks,
                                                  const PromptTemplates& tpl) {
    const std::size_t cap = cfg.get_size("dec_corpus_cap");
    const std::uint64_t seed = cfg.get_u64("seed");
    std::vector<PromptSequence> corpus;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        for (auto task : task_list(cfg)) {
            auto examples = bank_examples(graphs[i], banks[i], task, Split::Train, cap,
                                          mix_seed(seed, 0xC0 + i));
            for (const auto& ex : examples)
                for (auto mode : {PromptMode::WithDemos, PromptMode::NoDemos, PromptMode::MllmBaseline})
                    corpus.push_back(example_prompt(graphs[i], ex, mode, tpl));
        }
        auto drills = drill_prompts(cfg, graphs[i], tpl, i);
        corpus.insert(corpus.end(), std::make_move_iterator(drills.begin()),
                      std::make_move_iterator(drills.end()));
        corpus.push_back(vocab_warmup(graphs[i]));
    }
    return corpus;
}

inline std::vector<TuneUnit> tuning_units(const RunConfig& cfg,
                                          const std::vector<MultimodalGraph>& graphs,
                                          const std::vector<EmbeddingTable>& tables,
                                          const std::vector<DemoBank>& banks) {
    const std::size_t limit = cfg.get_size("train_limit");
    const std::uint64_t seed = cfg.get_u64("seed");
    std::vector<TuneUnit> units;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        TuneUnit unit;
        unit.graph = &graphs[i];
        unit.table = &tables[i];
        for (auto task : task_list(cfg)) {
            auto examples = bank_examples(graphs[i], banks[i], task, Split::Train, limit,
                                          mix_seed(seed, 0x7A + i));
            unit.examples.insert(unit.examples.end(), examples.begin(), examples.end());
        }
        if (!unit.examples.empty()) units.push_back(std::move(unit));
    }
    if (units.empty()) throw InvariantError("no training examples available for tuning");
    return units;
}

}  // namespace pipe

inline double stage_tune(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    auto graphs = pipe::load_graphs(paths);
    auto aligner = pipe::load_aligner(cfg, paths, graphs[0]);
    std::vector<EmbeddingTable> tables;
    std::vector<pipe::DemoBank> banks;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        tables.push_back(pipe::load_embedding_table(paths.embeddings_ckpt(i)));
        banks.push_back(pipe::load_demo_bank(paths, i));
    }
    const auto tpl = pipe::templates(cfg);

    auto corpus = pipe::decoder_corpus(cfg, graphs, banks, tpl);
    auto dec_result = pretrain_decoder(corpus, pipe::decoder_config(cfg));
    save_frozen_decoder(paths, dec_result.decoder);
    pipe::write_loss_tsv(paths.decoder_loss(), dec_result.loss_history);

    auto units = pipe::tuning_units(cfg, graphs, tables, banks);
    auto result = tune_projector(dec_result.decoder, aligner, units, pipe::tune_config(cfg), tpl);
    save_checkpoint(paths.projector_ckpt(), result.projector.named());
    pipe::write_loss_tsv(paths.tune_loss(), result.loss_history);
    persist_config(cfg);
    return result.loss_history.empty() ? 0.0 : result.loss_history.back();
}

struct MetricRow {
    std::string task;
    std::string graph;
    std::string mode;
    double accuracy = 0.0;
};

inline std::string metrics_tsv(std::vector<MetricRow> rows) {
    std::sort(rows.begin(), rows.end(), [](const MetricRow& a, const MetricRow& b) {
        return std::tie(a.task, a.graph, a.mode) < std::tie(b.task, b.graph, b.mode);
    });
    std::string out = "task\tgraph\tmode\taccuracy\n";
    for (const auto& r : rows)
        out += r.task + "\t" + r.graph + "\t" + r.mode + "\t" + format_double(r.accuracy, 6) + "\n";
    return out;
}

inline ProjectorParams load_projector(const RunConfig& cfg, const RunPaths& paths,
                                      std::size_t d_in) {
    if (!std::filesystem::exists(paths.projector_ckpt()))
        throw MissingArtifactError("projector checkpoint missing; run tune first");
    auto pp = init_projector(d_in, cfg.get_size("dec_d"), cfg.get_u64("seed"));
    restore_into(load_checkpoint(paths.projector_ckpt()), pp.named());
    return pp;
}

inline std::vector<MetricRow> stage_eval(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    auto graphs = pipe::load_graphs(paths);
    auto dec = load_frozen_decoder(cfg, paths);
    auto pp = load_projector(cfg, paths, cfg.get_size("align_d"));
    const auto tpl = pipe::templates(cfg);
    const auto mode = prompt_mode_from_name(cfg.get("tune_mode"));
    const bool img_seq = pipe::image_sequence_mode(cfg);
    const std::size_t limit = cfg.get_size("eval_limit");
    const std::size_t max_len = cfg.get_size("eval_max_len");
    const std::uint64_t seed = cfg.get_u64("seed");

    std::vector<MetricRow> rows;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        const auto& g = graphs[i];
        auto table = pipe::load_embedding_table(paths.embeddings_ckpt(i));
        auto bank = pipe::load_demo_bank(paths, i);
        for (auto task : pipe::task_list(cfg)) {
            auto examples = pipe::bank_examples(g, bank, task, Split::Test, limit,
                                                mix_seed(seed, 0xE7A1 + i));
            if (examples.empty()) continue;
            std::vector<std::string> preds, truths;
            std::string jsonl;
            for (const auto& ex : examples) {
                auto prompt = example_prompt(g, ex, mode, tpl);
                prompt.answer.clear();
                auto pred = predict(dec, pp, prompt, table, max_len, img_seq);
                preds.push_back(pred);
                truths.push_back(ex.answer);
                nlohmann::json j;
                j["id"] = "g" + std::to_string(i) + ":" + task_name(task) + ":" +
                          std::to_string(ex.u) +
                          (task == TaskKind::LP ? "-" + std::to_string(ex.v) : "");
                j["prediction"] = pred;
                j["truth"] = ex.answer;
                j["correct"] = normalize_answer(pred) == normalize_answer(ex.answer);
                jsonl += j.dump() + "\n";
            }
            write_text_file(paths.predictions(i, task), jsonl);
            rows.push_back({task_name(task), "g" + std::to_string(i), prompt_mode_name(mode),
                            evaluate_accuracy(preds, truths)});
        }
    }
    if (rows.empty()) throw InvariantError("evaluation produced no metric rows");
    write_text_file(paths.metrics(), metrics_tsv(rows));
    persist_config(cfg);
    return rows;
}

// registered finite-difference checks; shared by the CLI subcommand and the
// acceptance suite
struct GradCheckEntry {
    std::string op;
    double max_err = 0.0;
};

inline std::vector<GradCheckEntry> gradcheck_suite(std::size_t seeds_per_op) {
    if (seeds_per_op == 0) throw ConfigError("gradcheck needs at least one seed");
    std::vector<GradCheckEntry> results;

    auto run = [&](const std::string& name, auto&& builder) {
        double worst = 0.0;
        for (std::size_t s = 0; s < seeds_per_op; ++s) worst = std::max(worst, builder(1000 + 17 * s));
        results.push_back({name, worst});
    };

    run("matmul", [](std::uint64_t seed) {
        Rng rng(seed);
        auto a = Tensor::normal_init({3, 4}, 1.0, rng);
        auto b = Tensor::normal_init({4, 5}, 1.0, rng);
        return finite_diff_check([&](Tape& t) { return t.sum_all(t.matmul(a, b)); }, {a, b});
    });
    run("softmax", [](std::uint64_t seed) {
        Rng rng(seed);
        auto x = Tensor::normal_init({3, 5}, 1.0, rng);
        auto w = Tensor::normal_init({3, 5}, 1.0, rng);
        return finite_diff_check(
            [&](Tape& t) { return t.sum_all(t.mul(t.softmax_rows(x), w)); }, {x});
    });
    run("attention", [](std::uint64_t seed) {
        Rng rng(seed);
        auto p = AttentionParams::init(8, rng);
        auto q = Tensor::normal_init({3, 8}, 1.0, rng);
        auto kv = Tensor::normal_init({4, 8}, 1.0, rng);
        std::vector<Tensor> checked{q, kv};
        for (auto& t : p.tensors()) checked.push_back(t);
        return finite_diff_check(
            [&](Tape& t) { return t.sum_all(attention(t, p, q, kv, kv, 2)); }, checked);
    });
    run("share_attn", [](std::uint64_t seed) {
        Rng rng(seed);
        auto p = AttentionParams::init(8, rng);
        auto seq = Tensor::normal_init({4, 8}, 1.0, rng);
        std::vector<Tensor> checked{seq};
        for (auto& t : p.tensors()) checked.push_back(t);
        return finite_diff_check(
            [&](Tape& t) { return t.sum_all(share_attn_layer(t, p, 2, seq)); }, checked);
    });
    run("cross_fuse", [](std::uint64_t seed) {
        Rng rng(seed);
        auto p = AttentionParams::init(8, rng);
        auto queries = Tensor::normal_init({2, 8}, 1.0, rng);
        auto img = Tensor::normal_init({3, 8}, 1.0, rng);
        auto txt = Tensor::normal_init({4, 8}, 1.0, rng);
        std::vector<Tensor> checked{queries, img, txt};
        for (auto& t : p.tensors()) checked.push_back(t);
        return finite_diff_check(
            [&](Tape& t) { return t.sum_all(cross_fuse_layer(t, p, 2, queries, img, txt)); },
            checked);
    });
    run("pool_head", [](std::uint64_t seed) {
        Rng rng(seed);
        auto fused = Tensor::normal_init({4, 8}, 1.0, rng);
        auto head = Tensor::normal_init({8, 8}, 1.0, rng);
        return finite_diff_check(
            [&](Tape& t) { return t.sum_all(t.matmul(t.mean_rows(fused), head)); }, {fused, head});
    });
    run("contrastive_loss", [](std::uint64_t seed) {
        Rng rng(seed);
        auto members = Tensor::normal_init({5, 6}, 1.0, rng);
        std::vector<std::pair<std::size_t, std::size_t>> pairs{{0, 1}, {2, 4}, {3, 0}};
        return finite_diff_check(
            [&](Tape& t) { return contrastive_loss(t, members, pairs, 0.1); }, {members});
    });
    run("projector", [](std::uint64_t seed) {
        Rng rng(seed);
        auto pp = ProjectorParams::init(6, 8, rng);
        auto rows = Tensor::normal_init({3, 6}, 1.0, rng);
        std::vector<Tensor> checked{rows};
        for (auto& t : pp.tensors()) checked.push_back(t);
        return finite_diff_check(
            [&](Tape& t) { return t.sum_all(project(t, pp, rows)); }, checked);
    });
    run("instruction_loss", [](std::uint64_t seed) {
        Rng rng(seed);
        Vocabulary vocab;
        for (const auto* w : {"alpha", "beta", "gamma", "delta", "yes", "no"}) vocab.add(w);
        DecoderConfig dc;
        dc.d_dec = 8;
        dc.n_layers = 1;
        dc.n_heads = 2;
        auto dec = FrozenDecoder::init(dc, std::move(vocab), rng);
        dec.freeze();
        auto pp = ProjectorParams::init(4, 8, rng);

        EmbeddingTable table;
        table.n_q = 2;
        table.n_v = 2;
        table.pooled = Tensor::normal_init({2, 4}, 1.0, rng);
        table.fused = Tensor::normal_init({4, 4}, 1.0, rng);
        table.img_mean = Tensor::normal_init({2, 4}, 1.0, rng);
        table.img_seq = Tensor::normal_init({4, 4}, 1.0, rng);
        for (auto* t : {&table.pooled, &table.fused, &table.img_mean, &table.img_seq})
            t->set_requires_grad(false);

        PromptSequence seq;
        seq.task = TaskKind::NC;
        seq.segments.push_back({SegmentKind::Text, "alpha beta", {}});
        seq.segments.push_back({SegmentKind::ImageSlot, "", SlotRef::node(0)});
        seq.segments.push_back({SegmentKind::Text, "gamma", {}});
        seq.segments.push_back({SegmentKind::GraphSlot, "", SlotRef::node(1)});
        seq.answer = "yes";

        return finite_diff_check(
            [&](Tape& t) {
                auto assembled = assemble_decoder_input(t, seq, pp, table, dec);
                return instruction_loss(t, dec, assembled);
            },
            pp.tensors());
    });
    return results;
}

inline std::vector<MetricRow> stage_ablate(const RunConfig& cfg) {
    const auto paths = run_paths(cfg);
    auto graphs = pipe::load_graphs(paths);
    auto aligner = pipe::load_aligner(cfg, paths, graphs[0]);
    std::vector<EmbeddingTable> tables;
    std::vector<pipe::DemoBank> banks;
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        tables.push_back(pipe::load_embedding_table(paths.embeddings_ckpt(i)));
        banks.push_back(pipe::load_demo_bank(paths, i));
    }
    const auto tpl = pipe::templates(cfg);

    auto corpus = pipe::decoder_corpus(cfg, graphs, banks, tpl);
    auto dec_result = pretrain_decoder(corpus, pipe::decoder_config(cfg));
    auto units = pipe::tuning_units(cfg, graphs, tables, banks);

    std::vector<MetricRow> rows;
    const std::size_t limit = cfg.get_size("eval_limit");
    const std::size_t max_len = cfg.get_size("eval_max_len");
    const std::uint64_t seed = cfg.get_u64("seed");

    // demonstration ablation: one projector per prompt mode, same decoder
    for (auto mode : {PromptMode::WithDemos, PromptMode::NoDemos, PromptMode::MllmBaseline}) {
        auto tcfg = pipe::tune_config(cfg);
        tcfg.mode = mode;
        auto tuned = tune_projector(dec_result.decoder, aligner, units, tcfg, tpl);
        for (std::size_t i = 0; i < graphs.size(); ++i) {
            for (auto task : pipe::task_list(cfg)) {
                auto examples = pipe::bank_examples(graphs[i], banks[i], task, Split::Test, limit,
                                                    mix_seed(seed, 0xE7A1 + i));
                if (examples.empty()) continue;
                std::vector<std::string> preds, truths;
                for (const auto& ex : examples) {
                    auto prompt = example_prompt(graphs[i], ex, mode, tpl);
                    prompt.answer.clear();
                    preds.push_back(predict(dec_result.decoder, tuned.projector, prompt, tables[i],
                                            max_len, tcfg.image_sequence));
                    truths.push_back(ex.answer);
                }
                rows.push_back({task_name(task) + std::string("_demo_ablation"),
                                "g" + std::to_string(i), prompt_mode_name(mode),
                                evaluate_accuracy(preds, truths)});
            }
        }
    }

    // modality ablation: linear probes on each embedding source
    for (std::size_t i = 0; i < graphs.size(); ++i) {
        auto report = probe_all_sources(graphs[i], aligner);
        const std::string graph = "g" + std::to_string(i);
        rows.push_back({"probe", graph, "txt_only", report.txt_only});
        rows.push_back({"probe", graph, "img_only", report.img_only});
        rows.push_back({"probe", graph, "concat", report.concat});
        rows.push_back({"probe", graph, "fused", report.fused});
    }

    write_text_file(paths.ablation(), metrics_tsv(rows));
    persist_config(cfg);
    return rows;
}

}  // namespace mmgl
