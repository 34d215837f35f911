#pragma once

#include <functional>
#include <vector>

#include "mmgl/tensor.hpp"

namespace mmgl {

// Central-difference gradient verification. `f` must rebuild the scalar loss
// from scratch on the given tape and be deterministic; `checked` are the
// leaves whose recorded gradients are compared against
// (f(x+h e) - f(x-h e)) / 2h. Returns max over components of
// |numeric - analytic| / max(1, |analytic|).
inline double finite_diff_check(const std::function<Tensor(Tape&)>& f, const std::vector<Tensor>& checked,
                                double h = 1e-5) {
    for (auto& t : checked) const_cast<Tensor&>(t).zero_grad();

    Tape tape;
    Tensor loss = f(tape);
    if (loss.numel() != 1) throw InvariantError("finite_diff_check: loss must be scalar");
    tape.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(checked.size());
    for (const auto& t : checked) analytic.push_back(t.grad());

    auto eval = [&f]() {
        Tape t2;
        t2.set_recording(false);
        return f(t2).item();
    };

    double max_err = 0.0;
    for (std::size_t ti = 0; ti < checked.size(); ++ti) {
        auto& vals = const_cast<Tensor&>(checked[ti]).value();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double lp = eval();
            vals[i] = orig - h;
            const double lm = eval();
            vals[i] = orig;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[ti][i];
            const double err = std::abs(numeric - a) / std::max(1.0, std::abs(a));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace mmgl
