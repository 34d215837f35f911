#pragma once

#include <cmath>
#include <vector>

#include "mmgl/graph.hpp"

namespace mmgl {

struct PPRConfig {
    double alpha = 0.15;  // teleport probability
    double tol = 1e-10;   // L1 convergence tolerance
    std::size_t max_iter = 1000;

    void check() const {
        if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("ppr: alpha must lie in (0,1]");
        if (!(tol > 0.0)) throw ConfigError("ppr: tol must be > 0");
        if (max_iter < 1) throw ConfigError("ppr: max_iter must be >= 1");
    }
};

// Personalized PageRank by power iteration: pi <- alpha * e_anchor +
// (1-alpha) * P^T pi with P the row-stochastic random-walk matrix. Dangling
// rows send their mass back to the anchor, which keeps the iterate a
// probability vector. Starts from e_anchor, stops when the L1 change drops
// below tol.
inline std::vector<double> ppr_scores(const MultimodalGraph& g, NodeId anchor, const PPRConfig& cfg = {}) {
    cfg.check();
    g.check_node(anchor);
    const std::size_t n = g.num_nodes;
    std::vector<double> pi(n, 0.0), next(n);
    pi[anchor] = 1.0;
    if (cfg.alpha == 1.0) return pi;

    const double follow = 1.0 - cfg.alpha;
    double residual = 0.0;
    for (std::size_t iter = 0; iter < cfg.max_iter; ++iter) {
        std::fill(next.begin(), next.end(), 0.0);
        next[anchor] += cfg.alpha;
        for (NodeId u = 0; u < n; ++u) {
            if (pi[u] == 0.0) continue;
            const std::size_t deg = g.degree(u);
            if (deg == 0) {
                next[anchor] += follow * pi[u];
                continue;
            }
            const double share = follow * pi[u] / static_cast<double>(deg);
            for (auto it = g.neighbor_begin(u); it != g.neighbor_end(u); ++it) next[*it] += share;
        }
        residual = 0.0;
        for (std::size_t i = 0; i < n; ++i) residual += std::abs(next[i] - pi[i]);
        pi.swap(next);
        if (residual < cfg.tol) return pi;
    }
    throw NumericError("ppr did not converge within " + std::to_string(cfg.max_iter) +
                       " iterations (residual " + std::to_string(residual) + ")");
}

// Exact PPR via Gaussian elimination on (I - (1-alpha) P^T) pi = alpha e.
// Test oracle for ppr_scores; dense, so capped at 2000 nodes.
inline std::vector<double> ppr_oracle_dense(const MultimodalGraph& g, NodeId anchor, double alpha) {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("ppr oracle: alpha must lie in (0,1]");
    g.check_node(anchor);
    const std::size_t n = g.num_nodes;
    if (n > 2000) throw ConfigError("ppr oracle: dense solve capped at 2000 nodes");

    // A = I - (1-alpha) P^T, column u of P^T built from u's out-edges
    std::vector<double> a(n * n, 0.0), b(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) a[i * n + i] = 1.0;
    const double follow = 1.0 - alpha;
    for (NodeId u = 0; u < n; ++u) {
        const std::size_t deg = g.degree(u);
        if (deg == 0) {
            a[static_cast<std::size_t>(anchor) * n + u] -= follow;  // dangling mass to anchor
            continue;
        }
        const double share = follow / static_cast<double>(deg);
        for (auto it = g.neighbor_begin(u); it != g.neighbor_end(u); ++it)
            a[static_cast<std::size_t>(*it) * n + u] -= share;
    }
    b[anchor] = alpha;

    // partial-pivot elimination
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t best = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a[perm[r] * n + col]) > std::abs(a[perm[best] * n + col])) best = r;
        std::swap(perm[col], perm[best]);
        const double pivot = a[perm[col] * n + col];
        if (std::abs(pivot) < 1e-14) throw NumericError("ppr oracle: singular system");
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a[perm[r] * n + col] / pivot;
            if (f == 0.0) continue;
            a[perm[r] * n + col] = 0.0;
            for (std::size_t c = col + 1; c < n; ++c) a[perm[r] * n + c] -= f * a[perm[col] * n + c];
            b[perm[r]] -= f * b[perm[col]];
        }
    }
    std::vector<double> pi(n);
    for (std::size_t ri = n; ri > 0; --ri) {
        const std::size_t r = ri - 1;
        double s = b[perm[r]];
        for (std::size_t c = r + 1; c < n; ++c) s -= a[perm[r] * n + c] * pi[c];
        pi[r] = s / a[perm[r] * n + r];
    }
    return pi;
}

}  // namespace mmgl
