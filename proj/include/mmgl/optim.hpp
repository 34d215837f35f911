#pragma once

#include <cmath>
#include <vector>

#include "mmgl/tensor.hpp"

namespace mmgl {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Standard Adam with bias correction. Holds first/second moment arrays per
// parameter; step() applies the update and zeroes the gradients afterwards.
class AdamState {
public:
    AdamState() = default;

    AdamState(std::vector<Tensor> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            if (!p.requires_grad()) throw InvariantError("adam over a frozen parameter");
            m_.emplace_back(p.numel(), 0.0);
            v_.emplace_back(p.numel(), 0.0);
        }
    }

    long step_count() const { return step_; }
    const AdamConfig& config() const { return cfg_; }

    void step() {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto& p = params_[pi];
            if (p.grad().size() != p.numel()) throw InvariantError("adam: parameter/state shape mismatch");
            auto& val = p.value();
            auto& g = p.grad();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < val.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                val[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                if (!std::isfinite(val[i])) throw NumericError("adam produced a non-finite parameter");
                g[i] = 0.0;
            }
        }
    }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    long step_ = 0;
    AdamConfig cfg_;
};

inline void adam_step(AdamState& state) { state.step(); }

}  // namespace mmgl
