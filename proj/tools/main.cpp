#include <cstdio>
#include <string>
#include <vector>

#include "mmgl/pipeline.hpp"

namespace {

constexpr const char* kUsage =
    "usage: mmgl <subcommand> [--config FILE] [--key value ...]\n"
    "\n"
    "subcommands:\n"
    "  synth      generate synthetic multimodal graphs\n"
    "  ingest     import a graph directory (set ingest_dir)\n"
    "  validate   check stored graphs against the format invariants\n"
    "  pretrain   contrastive-pretrain the aligner and export embeddings\n"
    "  embed      re-export node embeddings from the aligner checkpoint\n"
    "  demos      select and store demonstration sets\n"
    "  tune       pretrain the frozen decoder and tune the projector\n"
    "  eval       evaluate test-split accuracy, write metrics.tsv\n"
    "  ablate     demonstration-mode and modality ablations\n"
    "  gradcheck  finite-difference checks for every differentiable op\n"
    "\n"
    "config is key=value lines; --key value overrides win, last writer wins.\n"
    "artifacts land in <out_root>/<config-hash>/ beside the resolved config.\n";

int dispatch(const std::string& cmd, const mmgl::RunConfig& cfg) {
    using namespace mmgl;
    const auto paths = run_paths(cfg);
    if (cmd == "synth") {
        const auto n = stage_synth(cfg);
        std::printf("synth: wrote %zu graph(s) under %s\n", n, paths.root.c_str());
    } else if (cmd == "ingest") {
        const auto idx = stage_ingest(cfg);
        std::printf("ingest: stored graph g%zu under %s\n", idx, paths.root.c_str());
    } else if (cmd == "validate") {
        const auto n = stage_validate(cfg);
        std::printf("validate: %zu graph(s) ok\n", n);
    } else if (cmd == "pretrain") {
        const double last = stage_pretrain(cfg);
        std::printf("pretrain: final contrastive loss %.6f\n", last);
    } else if (cmd == "embed") {
        const auto n = stage_embed(cfg);
        std::printf("embed: exported %zu embedding table(s)\n", n);
    } else if (cmd == "demos") {
        const auto n = stage_demos(cfg);
        std::printf("demos: wrote %zu demonstration file(s)\n", n);
    } else if (cmd == "tune") {
        const double last = stage_tune(cfg);
        std::printf("tune: final batch loss %.6f\n", last);
    } else if (cmd == "eval") {
        for (const auto& r : stage_eval(cfg))
            std::printf("eval: %s %s %s accuracy %.4f\n", r.task.c_str(), r.graph.c_str(),
                        r.mode.c_str(), r.accuracy);
    } else if (cmd == "ablate") {
        for (const auto& r : stage_ablate(cfg))
            std::printf("ablate: %s %s %s %.4f\n", r.task.c_str(), r.graph.c_str(),
                        r.mode.c_str(), r.accuracy);
    } else if (cmd == "gradcheck") {
        bool ok = true;
        for (const auto& e : gradcheck_suite(20)) {
            const bool pass = e.max_err <= 1e-4;
            ok = ok && pass;
            std::printf("gradcheck: %-18s max_err %.3e %s\n", e.op.c_str(), e.max_err,
                        pass ? "pass" : "FAIL");
        }
        if (!ok) throw NumericError("gradient check failed");
        std::printf("gradcheck: all ops within 1e-4\n");
    } else {
        throw ConfigError("unknown subcommand: " + cmd + " (see --help)");
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace mmgl;
    std::vector<std::string> args(argv + 1, argv + argc);
    if (args.empty() || args[0] == "--help" || args[0] == "-h") {
        std::fputs(kUsage, args.empty() ? stderr : stdout);
        return args.empty() ? 2 : 0;
    }

    try {
        const std::string cmd = args[0];
        std::string config_path;
        std::vector<std::pair<std::string, std::string>> overrides;
        std::size_t i = 1;
        while (i < args.size()) {
            const auto& a = args[i];
            if (a == "--help" || a == "-h") {
                std::fputs(kUsage, stdout);
                return 0;
            }
            if (a.rfind("--", 0) != 0)
                throw ConfigError("expected --key value, got: " + a);
            if (i + 1 >= args.size()) throw ConfigError("missing value for " + a);
            const std::string key = a.substr(2);
            const std::string& value = args[i + 1];
            if (key == "config")
                config_path = value;
            else
                overrides.emplace_back(key, value);
            i += 2;
        }
        // file first, then command-line overrides in order; last writer wins
        RunConfig cfg = config_path.empty() ? RunConfig() : RunConfig::from_file(config_path);
        for (const auto& [key, value] : overrides) cfg.set(key, value);
        return dispatch(cmd, cfg);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const MissingArtifactError& e) {
        std::fprintf(stderr, "missing artifact: %s\n", e.what());
        return 3;
    } catch (const InvariantError& e) {
        std::fprintf(stderr, "invariant violation: %s\n", e.what());
        return 4;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 5;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
