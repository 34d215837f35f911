#pragma once

#include <vector>

#include "mmgl/aligner.hpp"
#include "mmgl/graph.hpp"
#include "mmgl/optim.hpp"

namespace mmgl {

struct ProbeConfig {
    std::size_t epochs = 300;  // full-batch steps
    double lr = 0.05;
    double l2 = 1e-4;
};

// Multinomial logistic regression on z-scored features: trained full-batch on
// train-split rows, scored as exact-match accuracy on test-split rows.
// Deterministic (zero init, no sampling).
inline double linear_probe_accuracy(const Tensor& features, const std::vector<int>& labels,
                                    const std::vector<Split>& splits, std::size_t num_classes,
                                    const ProbeConfig& cfg = {}) {
    const std::size_t n = features.rows(), f = features.cols();
    if (labels.size() != n || splits.size() != n)
        throw InvariantError("linear_probe: row count mismatch between features, labels, splits");
    if (num_classes < 2) throw ConfigError("linear_probe: need at least two classes");

    std::vector<std::size_t> train_rows, test_rows;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0) continue;
        if (splits[i] == Split::Train) train_rows.push_back(i);
        if (splits[i] == Split::Test) test_rows.push_back(i);
    }
    if (train_rows.empty() || test_rows.empty())
        throw InvariantError("linear_probe: train and test splits must both be nonempty");
    std::size_t first_class = static_cast<std::size_t>(labels[train_rows[0]]);
    bool multi = false;
    for (auto r : train_rows)
        if (static_cast<std::size_t>(labels[r]) != first_class) multi = true;
    if (!multi) throw InvariantError("linear_probe: train split holds a single class");

    // z-score with train statistics
    std::vector<double> mean(f, 0.0), stdev(f, 0.0);
    for (auto r : train_rows)
        for (std::size_t j = 0; j < f; ++j) mean[j] += features.value()[r * f + j];
    for (std::size_t j = 0; j < f; ++j) mean[j] /= static_cast<double>(train_rows.size());
    for (auto r : train_rows)
        for (std::size_t j = 0; j < f; ++j) {
            const double d = features.value()[r * f + j] - mean[j];
            stdev[j] += d * d;
        }
    for (std::size_t j = 0; j < f; ++j) {
        stdev[j] = std::sqrt(stdev[j] / static_cast<double>(train_rows.size()));
        if (stdev[j] < 1e-12) stdev[j] = 1.0;
    }
    auto standardized = [&](const std::vector<std::size_t>& rows) {
        Tensor out = Tensor::zeros({rows.size(), f});
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < f; ++j)
                out.value()[i * f + j] = (features.value()[rows[i] * f + j] - mean[j]) / stdev[j];
        return out;
    };
    Tensor x_train = standardized(train_rows);
    Tensor x_test = standardized(test_rows);
    std::vector<std::size_t> y_train;
    for (auto r : train_rows) y_train.push_back(static_cast<std::size_t>(labels[r]));

    Tensor w = Tensor::zeros({f, num_classes}, true);
    Tensor b = Tensor::zeros({1, num_classes}, true);
    AdamState adam({w, b}, AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    for (std::size_t it = 0; it < cfg.epochs; ++it) {
        Tape tape;
        Tensor logits = tape.add_row(tape.matmul(x_train, w), b);
        Tensor loss = tape.cross_entropy_logits(logits, y_train);
        if (cfg.l2 > 0.0) loss = tape.add(loss, tape.scale(tape.sum_all(tape.mul(w, w)), cfg.l2));
        tape.backward(loss);
        adam.step();
    }

    Tape tape;
    tape.set_recording(false);
    Tensor logits = tape.add_row(tape.matmul(x_test, w), b);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < test_rows.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < num_classes; ++c)
            if (logits.at(i, c) > logits.at(i, best)) best = c;
        if (static_cast<int>(best) == labels[test_rows[i]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(test_rows.size());
}

// ----------------------------- feature sources -----------------------------
// The four probe inputs: raw per-modality token means, their concatenation,
// and the aligner's pooled output.

inline Tensor txt_mean_features(const MultimodalGraph& g) {
    Tensor out = Tensor::zeros({g.num_nodes, g.d_t});
    for (NodeId v = 0; v < g.num_nodes; ++v)
        for (std::size_t t = 0; t < g.n_t; ++t)
            for (std::size_t j = 0; j < g.d_t; ++j)
                out.value()[v * g.d_t + j] += g.txt_features[(v * g.n_t + t) * g.d_t + j] / static_cast<double>(g.n_t);
    return out;
}

inline Tensor img_mean_features(const MultimodalGraph& g) {
    Tensor out = Tensor::zeros({g.num_nodes, g.d_i});
    for (NodeId v = 0; v < g.num_nodes; ++v)
        for (std::size_t t = 0; t < g.n_v; ++t)
            for (std::size_t j = 0; j < g.d_i; ++j)
                out.value()[v * g.d_i + j] += g.img_features[(v * g.n_v + t) * g.d_i + j] / static_cast<double>(g.n_v);
    return out;
}

inline Tensor concat_mean_features(const MultimodalGraph& g) {
    Tensor txt = txt_mean_features(g);
    Tensor img = img_mean_features(g);
    const std::size_t w = g.d_t + g.d_i;
    Tensor out = Tensor::zeros({g.num_nodes, w});
    for (NodeId v = 0; v < g.num_nodes; ++v) {
        std::copy_n(txt.value().data() + v * g.d_t, g.d_t, out.value().data() + v * w);
        std::copy_n(img.value().data() + v * g.d_i, g.d_i, out.value().data() + v * w + g.d_t);
    }
    return out;
}

struct ProbeReport {
    double txt_only = 0.0;
    double img_only = 0.0;
    double concat = 0.0;
    double fused = 0.0;
};

inline ProbeReport probe_all_sources(const MultimodalGraph& g, const AlignerParams& params,
                                     const ProbeConfig& cfg = {}) {
    ProbeReport r;
    const std::size_t c = g.label_names.size();
    r.txt_only = linear_probe_accuracy(txt_mean_features(g), g.labels, g.splits, c, cfg);
    r.img_only = linear_probe_accuracy(img_mean_features(g), g.labels, g.splits, c, cfg);
    r.concat = linear_probe_accuracy(concat_mean_features(g), g.labels, g.splits, c, cfg);
    r.fused = linear_probe_accuracy(export_embeddings(params, g).pooled, g.labels, g.splits, c, cfg);
    return r;
}

}  // namespace mmgl
