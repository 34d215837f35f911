#include "catch2/catch_amalgamated.hpp"
#include "mmgl/pipeline.hpp"

#include <filesystem>

using namespace mmgl;

namespace {

std::filesystem::path fresh_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// minimal settings so the full chain stays in unit-test budget
RunConfig tiny_run(const std::filesystem::path& out_root) {
    RunConfig cfg;
    cfg.set("out_root", out_root.string());
    cfg.set("num_nodes", "50");
    cfg.set("labels", "neighbor_majority");
    cfg.set("align_d", "16");
    cfg.set("align_n_q", "4");
    cfg.set("align_heads", "2");
    cfg.set("align_layers", "1");
    cfg.set("align_epochs", "2");
    cfg.set("align_lr", "1e-3");
    cfg.set("dec_epochs", "2");
    cfg.set("dec_drills", "12");
    cfg.set("tune_epochs", "1");
    return cfg;
}

}  // namespace

TEST_CASE("config rejects unknown keys and malformed values") {
    RunConfig cfg;
    CHECK_THROWS_AS(cfg.set("not_a_key", "1"), ConfigError);
    CHECK_THROWS_AS(cfg.get("not_a_key"), ConfigError);

    cfg.set("labels", "blocks");
    CHECK_THROWS_AS(cfg.get_double("labels"), ConfigError);
    cfg.set("num_nodes", "-3");
    CHECK_THROWS_AS(cfg.get_size("num_nodes"), ConfigError);
    cfg.set("num_nodes", "2.5");
    CHECK_THROWS_AS(cfg.get_size("num_nodes"), ConfigError);
    cfg.set("lp_negative_demos", "perhaps");
    CHECK_THROWS_AS(cfg.get_bool("lp_negative_demos"), ConfigError);

    cfg.set("tasks", "nc,lp");
    const auto tasks = cfg.get_list("tasks");
    REQUIRE(tasks.size() == 2);
    CHECK(tasks[0] == "nc");
    CHECK(tasks[1] == "lp");
}

TEST_CASE("config files parse with comments, trimming, and last-wins overrides") {
    const auto dir = fresh_dir("mmgl_cfg_parse");
    const auto path = dir / "run.cfg";
    write_text_file(path,
                    "# experiment\n"
                    "seed=4\n"
                    "  num_nodes = 80  # trailing comment\n"
                    "seed=9\n"
                    "\n");
    auto cfg = RunConfig::from_file(path);
    CHECK(cfg.get_u64("seed") == 9);
    CHECK(cfg.get("num_nodes") == "80");
    CHECK(cfg.get_size("num_nodes") == 80);

    write_text_file(path, "mystery=1\n");
    CHECK_THROWS_AS(RunConfig::from_file(path), ConfigError);
    write_text_file(path, "just a line\n");
    CHECK_THROWS_AS(RunConfig::from_file(path), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_file(dir / "absent.cfg"), MissingArtifactError);
    std::filesystem::remove_all(dir);
}

TEST_CASE("config hash tracks values and serialization round trips") {
    RunConfig a, b;
    CHECK(a.hash() == b.hash());
    b.set("seed", "77");
    CHECK(a.hash() != b.hash());
    b.set("seed", a.get("seed"));
    CHECK(a.hash() == b.hash());

    const auto dir = fresh_dir("mmgl_cfg_rt");
    const auto path = dir / "resolved.cfg";
    a.set("tasks", "nc,lp");
    a.set("tune_lr", "3e-4");
    write_text_file(path, a.serialized());
    CHECK(RunConfig::from_file(path).hash() == a.hash());
    std::filesystem::remove_all(dir);
}

TEST_CASE("run directory is named by the config hash") {
    RunConfig cfg;
    cfg.set("out_root", "/tmp/mmgl_anywhere");
    const auto paths = run_paths(cfg);
    CHECK(paths.root == std::filesystem::path("/tmp/mmgl_anywhere") / hex64(cfg.hash()));
}

TEST_CASE("synth stage writes validated graphs and the resolved config") {
    const auto dir = fresh_dir("mmgl_stage_synth");
    auto cfg = tiny_run(dir);
    cfg.set("num_graphs", "2");
    CHECK(stage_synth(cfg) == 2);

    const auto paths = run_paths(cfg);
    REQUIRE(std::filesystem::exists(paths.config_file()));
    CHECK(RunConfig::from_file(paths.config_file()).hash() == cfg.hash());

    for (std::size_t i = 0; i < 2; ++i) {
        auto g = load_graph(paths.graph_dir(i));
        CHECK(validate(g).empty());
        CHECK(g.num_nodes == 50);
    }
    CHECK(stage_validate(cfg) == 2);

    // the two graphs come from distinct per-index seeds
    auto g0 = load_graph(paths.graph_dir(0));
    auto g1 = load_graph(paths.graph_dir(1));
    CHECK(g0.txt_features != g1.txt_features);
    std::filesystem::remove_all(dir);
}

TEST_CASE("synth stage rejects bad settings") {
    auto cfg = tiny_run("/tmp/mmgl_never_written");
    cfg.set("num_graphs", "0");
    CHECK_THROWS_AS(stage_synth(cfg), ConfigError);
    cfg.set("num_graphs", "1");
    cfg.set("labels", "mystery");
    CHECK_THROWS_AS(stage_synth(cfg), ConfigError);
}

TEST_CASE("ingest stage copies an external graph into the run") {
    const auto dir = fresh_dir("mmgl_stage_ingest");
    const auto src = dir / "external";
    SynthConfig scfg;
    scfg.num_nodes = 30;
    scfg.seed = 50;
    save_graph(synth_graph(scfg), src);

    auto cfg = tiny_run(dir / "runs");
    CHECK_THROWS_AS(stage_ingest(cfg), ConfigError);  // ingest_dir unset
    cfg.set("ingest_dir", src.string());
    CHECK(stage_ingest(cfg) == 0);  // index of the newly added graph
    CHECK(stage_ingest(cfg) == 1);
    auto g = load_graph(run_paths(cfg).graph_dir(0));
    CHECK(validate(g).empty());
    CHECK(g.num_nodes == 30);
    std::filesystem::remove_all(dir);
}

TEST_CASE("stages demand their upstream artifacts") {
    const auto dir = fresh_dir("mmgl_stage_deps");
    auto cfg = tiny_run(dir);
    CHECK_THROWS_AS(stage_pretrain(cfg), MissingArtifactError);  // no graphs
    stage_synth(cfg);
    CHECK_THROWS_AS(stage_tune(cfg), MissingArtifactError);  // no aligner or demos
    CHECK_THROWS_AS(stage_eval(cfg), MissingArtifactError);  // no decoder or projector
    std::filesystem::remove_all(dir);
}

TEST_CASE("metrics tsv rows are sorted and fixed precision") {
    std::vector<MetricRow> rows{{"nc", "g1", "with_demos", 0.5},
                                {"lp", "g0", "no_demos", 1.0 / 3.0},
                                {"nc", "g0", "with_demos", 0.25}};
    CHECK(metrics_tsv(rows) ==
          "task\tgraph\tmode\taccuracy\n"
          "lp\tg0\tno_demos\t0.333333\n"
          "nc\tg0\twith_demos\t0.250000\n"
          "nc\tg1\twith_demos\t0.500000\n");
}

TEST_CASE("drill prompts answer with the printed majority label") {
    SynthConfig scfg;
    scfg.num_nodes = 40;
    scfg.seed = 88;
    auto g = synth_graph(scfg);

    RunConfig cfg;
    cfg.set("dec_drills", "25");
    const auto tpl = PromptTemplates::builtin();
    auto drills = pipe::drill_prompts(cfg, g, tpl, 0);
    REQUIRE(!drills.empty());
    CHECK(drills.size() <= 25);  // tied blocks are skipped

    for (const auto& seq : drills) {
        const auto text = render_text(seq);
        std::map<std::string, int> counts;
        std::size_t pos = 0;
        const std::string marker = "it belongs to: ";
        while ((pos = text.find(marker, pos)) != std::string::npos) {
            pos += marker.size();
            const auto end = text.find('\n', pos);
            counts[text.substr(pos, end - pos)]++;
        }
        REQUIRE(counts.size() >= 1);
        int best = 0;
        std::string majority;
        bool tied = false;
        for (const auto& [label, n] : counts) {
            if (n > best) {
                best = n;
                majority = label;
                tied = false;
            } else if (n == best) {
                tied = true;
            }
        }
        CHECK_FALSE(tied);
        CHECK(seq.answer == majority);
        CHECK(std::find(g.label_names.begin(), g.label_names.end(), seq.answer) !=
              g.label_names.end());
    }

    // deterministic generation
    auto again = pipe::drill_prompts(cfg, g, tpl, 0);
    REQUIRE(again.size() == drills.size());
    for (std::size_t i = 0; i < drills.size(); ++i) {
        CHECK(render_text(again[i]) == render_text(drills[i]));
        CHECK(again[i].answer == drills[i].answer);
    }
}

TEST_CASE("vocabulary warmup lists every node text") {
    SynthConfig scfg;
    scfg.num_nodes = 12;
    scfg.seed = 3;
    auto g = synth_graph(scfg);
    const auto seq = pipe::vocab_warmup(g);
    REQUIRE(seq.segments.size() == 1);
    const auto& text = seq.segments[0].text;
    for (const auto& t : g.node_text) CHECK(text.find(t) != std::string::npos);
    CHECK(seq.answer.empty());
}

TEST_CASE("the staged pipeline runs end to end and reproduces its metrics") {
    const auto dir = fresh_dir("mmgl_stage_e2e");
    auto cfg = tiny_run(dir);

    stage_synth(cfg);
    stage_pretrain(cfg);
    stage_demos(cfg);
    stage_tune(cfg);
    auto rows = stage_eval(cfg);
    REQUIRE(!rows.empty());

    const auto paths = run_paths(cfg);
    for (const auto& p :
         {paths.aligner_ckpt(), paths.pretrain_loss(), paths.embeddings_ckpt(0),
          paths.nc_demos_file(0), paths.decoder_ckpt(), paths.decoder_vocab(),
          paths.decoder_loss(), paths.projector_ckpt(), paths.tune_loss(), paths.metrics(),
          paths.predictions(0, TaskKind::NC)}) {
        INFO("artifact: " << p.string());
        CHECK(std::filesystem::exists(p));
    }

    const auto metrics_bytes = read_text_file(paths.metrics());
    stage_eval(cfg);
    CHECK(read_text_file(paths.metrics()) == metrics_bytes);

    // embeddings reload to the exported values
    auto g = load_graph(paths.graph_dir(0));
    auto aligner = pipe::load_aligner(cfg, paths, g);
    auto table = pipe::load_embedding_table(paths.embeddings_ckpt(0));
    auto fresh = export_embeddings(aligner, g);
    CHECK(table.pooled.value() == fresh.pooled.value());
    CHECK(table.img_seq.value() == fresh.img_seq.value());
    CHECK(table.n_q == fresh.n_q);
    CHECK(table.n_v == fresh.n_v);
    std::filesystem::remove_all(dir);
}
