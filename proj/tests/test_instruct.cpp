#include "catch2/catch_amalgamated.hpp"
#include "mmgl/pipeline.hpp"

#include <cmath>

using namespace mmgl;

namespace {

// slot-free prompt; assembled input is then exactly the pretraining stream
PromptSequence text_prompt(const std::string& text, const std::string& answer) {
    PromptSequence seq;
    seq.segments.push_back({SegmentKind::Text, text, {}});
    seq.answer = answer;
    return seq;
}

FrozenDecoder tiny_decoder(std::size_t d = 16, std::uint64_t seed = 3) {
    Vocabulary vocab;
    for (const auto* w : {"alpha", "beta", "gamma", "delta", "yes", "no"}) vocab.add(w);
    DecoderConfig dc;
    dc.d_dec = d;
    dc.n_layers = 1;
    dc.n_heads = 2;
    Rng rng(seed);
    return FrozenDecoder::init(dc, std::move(vocab), rng);
}

EmbeddingTable tiny_table(std::size_t n_nodes, std::size_t d, std::size_t n_q, std::size_t n_v,
                          std::uint64_t seed = 9) {
    Rng rng(seed);
    EmbeddingTable t;
    t.n_q = n_q;
    t.n_v = n_v;
    t.pooled = Tensor::normal_init({n_nodes, d}, 1.0, rng);
    t.fused = Tensor::normal_init({n_nodes * n_q, d}, 1.0, rng);
    t.img_mean = Tensor::normal_init({n_nodes, d}, 1.0, rng);
    t.img_seq = Tensor::normal_init({n_nodes * n_v, d}, 1.0, rng);
    for (auto* x : {&t.pooled, &t.fused, &t.img_mean, &t.img_seq}) x->set_requires_grad(false);
    return t;
}

MultimodalGraph small_graph(std::uint64_t seed = 77, std::size_t nodes = 40) {
    SynthConfig cfg;
    cfg.num_nodes = nodes;
    cfg.num_classes = 3;
    cfg.seed = seed;
    return synth_graph(cfg);
}

}  // namespace

TEST_CASE("projector maps rows and preserves their count") {
    Rng rng(5);
    auto pp = ProjectorParams::init(6, 10, rng);
    CHECK(pp.d_in() == 6);
    CHECK(pp.d_out() == 10);

    Tape tp;
    auto rows = Tensor::normal_init({8, 6}, 1.0, rng);
    auto out = project(tp, pp, rows);
    CHECK(out.rows() == 8);
    CHECK(out.cols() == 10);

    auto bad = Tensor::normal_init({2, 5}, 1.0, rng);
    CHECK_THROWS_AS(project(tp, pp, bad), InvariantError);
}

TEST_CASE("zero projector weights produce zero rows") {
    ProjectorParams pp;
    pp.w1 = Tensor::zeros({4, 6});
    pp.b1 = Tensor::zeros({1, 6});
    pp.w2 = Tensor::zeros({6, 6});
    pp.b2 = Tensor::zeros({1, 6});
    Tape tp;
    Rng rng(2);
    auto out = project(tp, pp, Tensor::normal_init({3, 4}, 1.0, rng));
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j) CHECK(out.at(i, j) == 0.0);
}

TEST_CASE("projector init is deterministic in the seed") {
    auto a = init_projector(6, 8, 42);
    auto b = init_projector(6, 8, 42);
    auto c = init_projector(6, 8, 43);
    CHECK(checkpoint_bytes(a.named()) == checkpoint_bytes(b.named()));
    CHECK(checkpoint_bytes(a.named()) != checkpoint_bytes(c.named()));
}

TEST_CASE("assembled input length follows the slot arithmetic") {
    const auto g = small_graph();
    auto dec = tiny_decoder(12);
    dec.freeze();
    Rng rng(4);
    auto pp = ProjectorParams::init(8, 12, rng);
    const std::size_t n_q = 3, n_v = 4;
    auto table = tiny_table(g.num_nodes, 8, n_q, n_v);

    DemonstrationSet ds;
    ds.task = TaskKind::NC;
    ds.anchor = g.nodes_in_split(Split::Test).at(0);
    for (NodeId v : g.nodes_in_split(Split::Train)) {
        if (g.labels[v] < 0 || v == ds.anchor) continue;
        ds.nc_demos.push_back({v, g.label_names[static_cast<std::size_t>(g.labels[v])]});
        if (ds.nc_demos.size() == 2) break;
    }
    auto seq = build_nc_prompt(g, ds.anchor, ds, PromptMode::WithDemos);

    Tape tp;
    auto in = assemble_decoder_input(tp, seq, pp, table, dec);
    const std::size_t text_tokens = in.text_tokens;
    const std::size_t answer_words = tokenize(seq.answer).size();
    // three node refs: anchor plus two demos
    CHECK(in.graph_rows == 3 * n_q);
    CHECK(in.image_rows == 3);
    CHECK(in.embeddings.rows() == text_tokens + 3 * n_q + 3 + answer_words);
    CHECK(in.targets.size() == answer_words + 1);  // answer then <eos>
    CHECK(in.first_target_row == in.embeddings.rows() - answer_words - 1);

    SECTION("image sequence mode supplies per-patch rows") {
        Tape tp2;
        auto seq_in = assemble_decoder_input(tp2, seq, pp, table, dec, true);
        CHECK(seq_in.image_rows == 3 * n_v);
        CHECK(seq_in.embeddings.rows() == text_tokens + 3 * n_q + 3 * n_v + answer_words);
    }

    SECTION("edge slots concatenate both endpoints") {
        DemonstrationSet lp;
        lp.task = TaskKind::LP;
        const auto& e = g.edge_splits.pos(Split::Train).at(0);
        lp.lp_demos.push_back({e, true});
        const auto& probe = g.edge_splits.pos(Split::Test).at(0);
        auto lp_seq = build_lp_prompt(g, probe.first, probe.second, lp, PromptMode::WithDemos, "Yes");
        Tape tp3;
        auto lp_in = assemble_decoder_input(tp3, lp_seq, pp, table, dec);
        CHECK(lp_in.graph_rows == 2 * 2 * n_q);  // two edge refs, two endpoints each
        CHECK(lp_in.image_rows == 2);
        Tape tp4;
        auto lp_seq_in = assemble_decoder_input(tp4, lp_seq, pp, table, dec, true);
        CHECK(lp_seq_in.image_rows == 2 * 2 * n_v);
    }
}

TEST_CASE("assembly rejects malformed inputs") {
    auto dec = tiny_decoder(12);
    dec.freeze();
    Rng rng(4);
    auto pp = ProjectorParams::init(8, 12, rng);
    auto table = tiny_table(4, 8, 2, 2);

    Tape tp;
    PromptSequence empty;
    CHECK_THROWS_AS(assemble_decoder_input(tp, empty, pp, table, dec), InvariantError);

    PromptSequence out_of_range;
    out_of_range.segments.push_back({SegmentKind::GraphSlot, "", SlotRef::node(9)});
    CHECK_THROWS_AS(assemble_decoder_input(tp, out_of_range, pp, table, dec), InvariantError);

    auto wrong_dim = ProjectorParams::init(8, 10, rng);
    auto seq = text_prompt("alpha beta", "gamma");
    CHECK_THROWS_AS(assemble_decoder_input(tp, seq, wrong_dim, table, dec), InvariantError);

    auto no_answer = assemble_decoder_input(tp, text_prompt("alpha beta", ""), pp, table, dec);
    CHECK_THROWS_AS(instruction_loss(tp, dec, no_answer), InvariantError);
}

TEST_CASE("instruction loss on an untrained decoder sits near log vocabulary size") {
    auto dec = tiny_decoder(32, 11);
    dec.freeze();
    Rng rng(12);
    auto pp = ProjectorParams::init(8, 32, rng);
    auto table = tiny_table(2, 8, 2, 2);

    Tape tp;
    auto in = assemble_decoder_input(tp, text_prompt("alpha beta gamma", "delta"), pp, table, dec);
    auto loss = instruction_loss(tp, dec, in);
    const double ln_v = std::log(static_cast<double>(dec.vocab.size()));
    INFO("loss " << loss.item() << " ln V " << ln_v);
    CHECK(loss.item() > 0.7 * ln_v);
    CHECK(loss.item() < 1.3 * ln_v);
}

TEST_CASE("decoder overfit on one sample drives its instruction loss below 0.01") {
    auto seq = text_prompt("alpha beta gamma delta", "yes");
    DecoderConfig dc;
    dc.d_dec = 16;
    dc.n_layers = 1;
    dc.n_heads = 2;
    dc.lr = 5e-3;
    dc.epochs = 400;
    dc.seed = 21;
    auto result = pretrain_decoder({seq}, dc);
    auto& dec = result.decoder;
    CHECK(dec.frozen());

    Rng rng(1);
    auto pp = ProjectorParams::init(4, 16, rng);
    auto table = tiny_table(2, 4, 2, 2);
    Tape tp;
    auto in = assemble_decoder_input(tp, seq, pp, table, dec);
    auto loss = instruction_loss(tp, dec, in);
    INFO("overfit loss " << loss.item());
    CHECK(loss.item() < 0.01);
}

TEST_CASE("gradients reach the projector and only the projector") {
    const auto g = small_graph();
    auto dec = tiny_decoder(12);
    dec.freeze();
    Rng rng(4);
    auto pp = ProjectorParams::init(8, 12, rng);
    auto table = tiny_table(g.num_nodes, 8, 2, 2);

    DemonstrationSet empty;
    empty.task = TaskKind::NC;
    auto seq = build_nc_prompt(g, g.nodes_in_split(Split::Train).at(0), empty, PromptMode::NoDemos);

    Tape tp;
    auto in = assemble_decoder_input(tp, seq, pp, table, dec);
    auto loss = instruction_loss(tp, dec, in);
    tp.backward(loss);

    double grad_mass = 0;
    for (const auto& t : pp.tensors())
        for (double v : t.grad()) grad_mass += std::abs(v);
    CHECK(grad_mass > 0.0);
    for (const auto& t : dec.tensors()) CHECK_FALSE(t.requires_grad());
    for (auto* t : {&table.pooled, &table.fused, &table.img_mean, &table.img_seq})
        CHECK_FALSE(t->requires_grad());
}

TEST_CASE("tune rejects unfrozen backbones") {
    const auto g = small_graph();
    auto dec = tiny_decoder(12);  // never frozen
    AlignerConfig acfg;
    acfg.d = 8;
    acfg.n_heads = 2;
    acfg.n_layers = 1;
    acfg.n_q = 2;
    Rng rng(5);
    auto aligner = AlignerParams::init(acfg, g.d_t, g.d_i, rng);
    aligner.set_requires_grad(false);
    auto table = tiny_table(g.num_nodes, 8, 2, 2);

    TuneUnit unit;
    unit.graph = &g;
    unit.table = &table;
    InstructExample ex;
    ex.task = TaskKind::NC;
    ex.u = g.nodes_in_split(Split::Train).at(0);
    ex.demos.task = TaskKind::NC;
    ex.answer = g.label_names[static_cast<std::size_t>(g.labels[ex.u])];
    unit.examples.push_back(ex);

    TuneConfig tcfg;
    tcfg.mode = PromptMode::NoDemos;
    tcfg.epochs = 1;
    CHECK_THROWS_AS(tune_projector(dec, aligner, {unit}, tcfg), InvariantError);
}

TEST_CASE("batch mean loss is invariant to duplicating an example") {
    const auto g = small_graph();
    auto dec = tiny_decoder(12);
    dec.freeze();
    AlignerConfig acfg;
    acfg.d = 8;
    acfg.n_heads = 2;
    acfg.n_layers = 1;
    acfg.n_q = 2;
    Rng rng(5);
    auto aligner = AlignerParams::init(acfg, g.d_t, g.d_i, rng);
    aligner.set_requires_grad(false);
    auto table = tiny_table(g.num_nodes, 8, 2, 2);

    InstructExample ex;
    ex.task = TaskKind::NC;
    ex.u = g.nodes_in_split(Split::Train).at(0);
    ex.demos.task = TaskKind::NC;
    ex.answer = g.label_names[static_cast<std::size_t>(g.labels[ex.u])];

    auto run_first_loss = [&](std::size_t copies) {
        TuneUnit unit;
        unit.graph = &g;
        unit.table = &table;
        for (std::size_t i = 0; i < copies; ++i) unit.examples.push_back(ex);
        TuneConfig tcfg;
        tcfg.mode = PromptMode::NoDemos;
        tcfg.epochs = 1;
        tcfg.batch_size = 4;
        tcfg.lr = 1e-3;
        auto result = tune_projector(dec, aligner, {unit}, tcfg);
        REQUIRE(!result.loss_history.empty());
        return result.loss_history.front();
    };
    CHECK(run_first_loss(1) == Catch::Approx(run_first_loss(2)).epsilon(1e-12));
}

TEST_CASE("tuning leaves decoder and aligner checkpoints byte-identical") {
    const auto g = small_graph();
    auto dec = tiny_decoder(12);
    dec.freeze();
    AlignerConfig acfg;
    acfg.d = 8;
    acfg.n_heads = 2;
    acfg.n_layers = 1;
    acfg.n_q = 2;
    Rng rng(5);
    auto aligner = AlignerParams::init(acfg, g.d_t, g.d_i, rng);
    aligner.set_requires_grad(false);
    auto table = tiny_table(g.num_nodes, 8, 2, 2);

    TuneUnit unit;
    unit.graph = &g;
    unit.table = &table;
    for (NodeId v : g.nodes_in_split(Split::Train)) {
        if (g.labels[v] < 0) continue;
        InstructExample ex;
        ex.task = TaskKind::NC;
        ex.u = v;
        ex.demos.task = TaskKind::NC;
        ex.answer = g.label_names[static_cast<std::size_t>(g.labels[v])];
        unit.examples.push_back(ex);
        if (unit.examples.size() == 6) break;
    }

    const auto dec_before = checkpoint_bytes(dec.named());
    const auto aln_before = checkpoint_bytes(aligner.named());
    TuneConfig tcfg;
    tcfg.mode = PromptMode::NoDemos;
    tcfg.epochs = 2;
    tcfg.batch_size = 3;
    tcfg.lr = 1e-3;
    auto result = tune_projector(dec, aligner, {unit}, tcfg);
    CHECK(checkpoint_bytes(dec.named()) == dec_before);
    CHECK(checkpoint_bytes(aligner.named()) == aln_before);
    CHECK(result.loss_history.size() == 2 * 2);  // two epochs, two batches each
}

TEST_CASE("decoder pretraining lowers loss, freezes, and covers the task vocabulary") {
    const auto g = small_graph();
    std::vector<PromptSequence> corpus;
    DemonstrationSet nc;
    nc.task = TaskKind::NC;
    auto anchor = g.nodes_in_split(Split::Train).at(0);
    corpus.push_back(build_nc_prompt(g, anchor, nc, PromptMode::NoDemos));

    // demo blocks carry every label name as a bare token
    DemonstrationSet all_labels;
    all_labels.task = TaskKind::NC;
    auto train = g.nodes_in_split(Split::Train);
    for (std::size_t c = 0; c < g.label_names.size(); ++c)
        all_labels.nc_demos.push_back({train.at(c + 1), g.label_names[c]});
    corpus.push_back(build_nc_prompt(g, anchor, all_labels, PromptMode::WithDemos));

    DemonstrationSet lp;
    lp.task = TaskKind::LP;
    const auto& e = g.edge_splits.pos(Split::Train).at(0);
    lp.lp_demos.push_back({e, true});
    const auto& probe = g.edge_splits.pos(Split::Val).at(0);
    corpus.push_back(build_lp_prompt(g, probe.first, probe.second, lp, PromptMode::WithDemos, "No"));

    DecoderConfig dc;
    dc.d_dec = 16;
    dc.n_layers = 1;
    dc.n_heads = 2;
    dc.epochs = 12;
    auto result = pretrain_decoder(corpus, dc);
    const auto& dec = result.decoder;

    REQUIRE(result.loss_history.size() == 12);
    CHECK(result.loss_history.back() < result.loss_history.front());
    CHECK(dec.frozen());
    for (const auto& t : dec.tensors()) CHECK_FALSE(t.requires_grad());

    for (const auto* w : {"Yes", "No", "<image>", "<graph>", "<unk>"}) CHECK(dec.vocab.contains(w));
    for (const auto& name : g.label_names) CHECK(dec.vocab.contains(name));
    CHECK(dec.vocab.id("never-seen-word") == Vocabulary::kUnk);
}

TEST_CASE("greedy decode is deterministic and respects max_len") {
    auto seq = text_prompt("alpha beta gamma delta", "yes");
    DecoderConfig dc;
    dc.d_dec = 16;
    dc.n_layers = 1;
    dc.n_heads = 2;
    dc.lr = 5e-3;
    dc.epochs = 200;
    dc.seed = 21;
    auto dec = pretrain_decoder({seq}, dc).decoder;

    Rng rng(1);
    auto pp = ProjectorParams::init(4, 16, rng);
    auto table = tiny_table(2, 4, 2, 2);

    auto ask = text_prompt("alpha beta gamma delta", "");
    const auto a = predict(dec, pp, ask, table, 4);
    const auto b = predict(dec, pp, ask, table, 4);
    CHECK(a == b);
    CHECK(a == "yes");

    const auto truncated = predict(dec, pp, ask, table, 1);
    CHECK(tokenize(truncated).size() <= 1);
    CHECK(evaluate_accuracy({truncated}, {"yes please"}) == 0.0);

    auto with_answer = text_prompt("alpha", "yes");
    CHECK_THROWS_AS(predict(dec, pp, with_answer, table, 4), InvariantError);
    CHECK_THROWS_AS(predict(dec, pp, ask, table, 0), ConfigError);
}

TEST_CASE("accuracy is the exact match fraction after whitespace normalization") {
    CHECK(evaluate_accuracy({"a", "b"}, {"a", "b"}) == 1.0);
    CHECK(evaluate_accuracy({"a", "b"}, {"c", "d"}) == 0.0);
    CHECK(evaluate_accuracy({"a", "b", "c", "d"}, {"a", "b", "c", "x"}) == 0.75);
    CHECK(evaluate_accuracy({" Yes  "}, {"Yes"}) == 1.0);
    CHECK_THROWS_AS(evaluate_accuracy({"a"}, {"a", "b"}), InvariantError);
    CHECK_THROWS_AS(evaluate_accuracy({}, {}), InvariantError);
}

TEST_CASE("tuned projector beats the untuned projector on the neighbor majority task") {
    SynthConfig scfg;
    scfg.num_nodes = 60;
    scfg.num_classes = 3;
    scfg.p_in = 0.2;
    scfg.seed = 1234;
    auto g = synth_graph(scfg);
    relabel_neighbor_majority(g);

    AlignerConfig acfg;
    acfg.d = 32;
    acfg.n_heads = 4;
    acfg.n_layers = 2;
    acfg.n_q = 8;
    acfg.batch_size = 8;
    acfg.lr = 2e-3;
    acfg.epochs = 12;
    acfg.neighbors_per_anchor = 3;
    acfg.seed = 7;
    auto aligner = pretrain({&g}, acfg).params;
    aligner.set_requires_grad(false);
    auto table = export_embeddings(aligner, g);

    const auto tpl = PromptTemplates::builtin();
    RunConfig drill_cfg;
    drill_cfg.set("dec_drills", "120");
    std::vector<PromptSequence> corpus = pipe::drill_prompts(drill_cfg, g, tpl, 0);
    DemonstrationSet none;
    none.task = TaskKind::NC;
    for (NodeId v : g.nodes_in_split(Split::Train)) {
        if (g.labels[v] < 0) continue;
        corpus.push_back(build_nc_prompt(g, v, none, PromptMode::NoDemos, tpl));
    }
    corpus.push_back(pipe::vocab_warmup(g));

    DecoderConfig dc;
    dc.d_dec = 64;
    dc.n_layers = 2;
    dc.n_heads = 4;
    dc.epochs = 8;
    dc.seed = 13;
    auto dec = pretrain_decoder(corpus, dc).decoder;

    TuneUnit unit;
    unit.graph = &g;
    unit.table = &table;
    for (NodeId v : g.nodes_in_split(Split::Train)) {
        if (g.labels[v] < 0) continue;
        InstructExample ex;
        ex.task = TaskKind::NC;
        ex.u = v;
        ex.demos.task = TaskKind::NC;
        ex.answer = g.label_names[static_cast<std::size_t>(g.labels[v])];
        unit.examples.push_back(ex);
    }
    TuneConfig tcfg;
    tcfg.mode = PromptMode::NoDemos;
    tcfg.lr = 15e-4;
    tcfg.epochs = 12;
    tcfg.batch_size = 6;
    tcfg.seed = 99;
    auto tuned = tune_projector(dec, aligner, {unit}, tcfg, tpl);
    auto untuned = init_projector(aligner.dim(), dc.d_dec, tcfg.seed);

    auto accuracy_with = [&](const ProjectorParams& pp) {
        std::vector<std::string> preds, truths;
        for (NodeId v : g.nodes_in_split(Split::Test)) {
            if (g.labels[v] < 0) continue;
            auto prompt = build_nc_prompt(g, v, none, PromptMode::NoDemos, tpl);
            prompt.answer.clear();
            preds.push_back(predict(dec, pp, prompt, table, 4));
            truths.push_back(g.label_names[static_cast<std::size_t>(g.labels[v])]);
        }
        return evaluate_accuracy(preds, truths);
    };
    const double acc_tuned = accuracy_with(tuned.projector);
    const double acc_untuned = accuracy_with(untuned);
    INFO("tuned " << acc_tuned << " untuned " << acc_untuned);
    CHECK(acc_tuned > acc_untuned);
}
