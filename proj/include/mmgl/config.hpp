#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mmgl/common.hpp"

namespace mmgl {

// flat key=value run configuration; every knob of every stage lives here so a
// single resolved file reproduces a run
class RunConfig {
public:
    static const std::map<std::string, std::string>& defaults() {
        static const std::map<std::string, std::string> d = {
            {"seed", "1"},
            {"out_root", "runs"},
            {"templates_dir", ""},

            // synthetic corpus
            {"num_graphs", "1"},
            {"num_nodes", "200"},
            {"num_classes", "3"},
            {"p_in", "0.15"},
            {"p_out", "0.01"},
            {"d_t", "16"},
            {"d_i", "16"},
            {"n_t", "6"},
            {"n_v", "4"},
            {"txt_signal", "0.5"},
            {"img_signal", "0.5"},
            {"noise_sigma", "1.0"},
            {"labels", "blocks"},  // blocks | neighbor_majority
            {"ingest_dir", ""},

            // aligner pretraining
            {"align_d", "32"},
            {"align_heads", "4"},
            {"align_layers", "2"},
            {"align_n_q", "8"},
            {"align_tau", "0.1"},
            {"align_neighbors", "3"},
            {"align_batch", "16"},
            {"align_lr", "2e-3"},
            {"align_epochs", "15"},

            // demonstration selection
            {"ppr_alpha", "0.15"},
            {"ppr_tol", "1e-10"},
            {"ppr_max_iter", "1000"},
            {"k_demos", "3"},
            {"lp_demos", "1"},
            {"lp_negative_demos", "false"},

            // frozen decoder
            {"dec_d", "64"},
            {"dec_layers", "2"},
            {"dec_heads", "4"},
            {"dec_ffn_mult", "2"},
            {"dec_lr", "1e-3"},
            {"dec_epochs", "12"},
            {"dec_corpus_cap", "40"},
            {"dec_drills", "200"},
            {"dec_answer_weight", "10"},

            // projector tuning and evaluation
            {"tasks", "nc"},  // nc | lp | nc,lp
            {"tune_lr", "1e-3"},
            {"tune_epochs", "3"},
            {"tune_batch", "6"},
            {"tune_mode", "with_demos"},
            {"image_mode", "mean"},  // mean | sequence
            {"train_limit", "0"},
            {"eval_limit", "0"},
            {"eval_max_len", "4"},
        };
        return d;
    }

    RunConfig() : values_(defaults()) {}

    static RunConfig from_file(const std::filesystem::path& path) {
        if (!std::filesystem::exists(path))
            throw MissingArtifactError("config file not found: " + path.string());
        RunConfig cfg;
        std::istringstream in(read_text_file(path));
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            while (!line.empty() && (line.back() == ' ' || line.back() == '\t' || line.back() == '\r'))
                line.pop_back();
            std::size_t start = 0;
            while (start < line.size() && (line[start] == ' ' || line[start] == '\t')) ++start;
            line.erase(0, start);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ConfigError("config line " + std::to_string(lineno) + " is not key=value: " + line);
            auto key = line.substr(0, eq);
            auto value = line.substr(eq + 1);
            while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
            std::size_t vstart = 0;
            while (vstart < value.size() && (value[vstart] == ' ' || value[vstart] == '\t')) ++vstart;
            cfg.set(key, value.substr(vstart));
        }
        return cfg;
    }

    void set(const std::string& key, const std::string& value) {
        if (!defaults().count(key)) throw ConfigError("unknown config key: " + key);
        values_[key] = value;
    }

    const std::string& get(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown config key: " + key);
        return it->second;
    }

    double get_double(const std::string& key) const {
        const auto& s = get(key);
        try {
            std::size_t used = 0;
            const double v = std::stod(s, &used);
            if (used != s.size()) throw std::invalid_argument(s);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + " is not a number: " + s);
        }
    }

    std::size_t get_size(const std::string& key) const {
        const double v = get_double(key);
        if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
            throw ConfigError("config key " + key + " is not a nonnegative integer: " + get(key));
        return static_cast<std::size_t>(v);
    }

    std::uint64_t get_u64(const std::string& key) const {
        return static_cast<std::uint64_t>(get_size(key));
    }

    bool get_bool(const std::string& key) const {
        const auto& s = get(key);
        if (s == "true" || s == "1" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "no") return false;
        throw ConfigError("config key " + key + " is not a boolean: " + s);
    }

    // comma-separated list accessor
    std::vector<std::string> get_list(const std::string& key) const {
        std::vector<std::string> out;
        const auto& s = get(key);
        std::size_t at = 0;
        while (at <= s.size()) {
            const auto comma = s.find(',', at);
            const auto piece = s.substr(at, comma == std::string::npos ? comma : comma - at);
            if (!piece.empty()) out.push_back(piece);
            if (comma == std::string::npos) break;
            at = comma + 1;
        }
        return out;
    }

    std::string serialized() const {
        std::string out;
        for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
        return out;
    }

    std::uint64_t hash() const { return fnv1a(serialized()); }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace mmgl
