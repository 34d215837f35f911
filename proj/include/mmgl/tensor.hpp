#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mmgl/common.hpp"

namespace mmgl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major f64 tensor. Handle with shared ownership; ops on a Tape
// produce new tensors and record backward closures. Leaf tensors (parameters,
// inputs) keep their gradients across backward calls; gradients of tape
// intermediates are reset at the start of every backward pass.
class Tensor {
public:
    struct Data {
        Shape shape;
        std::vector<double> value;
        std::vector<double> grad;  // allocated iff requires_grad
        bool requires_grad = false;
        bool leaf = true;
    };

    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->value.assign(shape_numel(t.d_->shape), 0.0);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (values.size() != shape_numel(shape))
            throw InvariantError("tensor data length does not match shape " + shape_str(shape));
        Tensor t;
        t.d_ = std::make_shared<Data>();
        t.d_->shape = std::move(shape);
        t.d_->value = std::move(values);
        t.set_requires_grad(requires_grad);
        return t;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_vector({1}, {v}, requires_grad);
    }

    // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init
    static Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Tensor t = zeros(std::move(shape), true);
        for (auto& v : t.d_->value) v = rng.uniform(-bound, bound);
        return t;
    }

    static Tensor normal_init(Shape shape, double stddev, Rng& rng) {
        Tensor t = zeros(std::move(shape), true);
        for (auto& v : t.d_->value) v = rng.normal(0.0, stddev);
        return t;
    }

    bool defined() const { return d_ != nullptr; }
    const Shape& shape() const { return d_->shape; }
    std::size_t numel() const { return d_->value.size(); }
    std::size_t rows() const { return d_->shape.size() >= 1 ? d_->shape[0] : 1; }
    std::size_t cols() const { return d_->shape.size() >= 2 ? d_->shape[1] : 1; }

    std::vector<double>& value() { return d_->value; }
    const std::vector<double>& value() const { return d_->value; }
    std::vector<double>& grad() {
        if (!d_->requires_grad) throw InvariantError("grad requested on a tensor without gradient");
        return d_->grad;
    }
    const std::vector<double>& grad() const {
        if (!d_->requires_grad) throw InvariantError("grad requested on a tensor without gradient");
        return d_->grad;
    }

    double at(std::size_t i, std::size_t j) const { return d_->value[i * cols() + j]; }
    double& at(std::size_t i, std::size_t j) { return d_->value[i * cols() + j]; }
    double item() const { return d_->value[0]; }

    bool requires_grad() const { return d_->requires_grad; }

    void set_requires_grad(bool on) {
        d_->requires_grad = on;
        if (on)
            d_->grad.assign(d_->value.size(), 0.0);
        else {
            d_->grad.clear();
            d_->grad.shrink_to_fit();
        }
    }

    void zero_grad() {
        if (d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
    }

    bool is_leaf() const { return d_->leaf; }

    std::shared_ptr<Data> data_ptr() const { return d_; }

    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

    void check_finite(const char* op) const {
        for (double v : d_->value)
            if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
    }

private:
    std::shared_ptr<Data> d_;
    friend class Tape;
};

namespace detail {

// C += A(m x k) * B(k x n)
inline void mm_nn(double* c, const double* a, const double* b, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// C += A(m x k) * B(n x k)^T
inline void mm_nt(double* c, const double* a, const double* b, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        double* ci = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] += s;
        }
    }
}

// C += A(m x k)^T * B(m x n), C is k x n
inline void mm_tn(double* c, const double* a, const double* b, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * k;
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

}  // namespace detail

// Ordered record of executed differentiable operations. backward() traverses
// it exactly once in reverse; clear() recycles it between steps.
class Tape {
public:
    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    std::size_t size() const { return steps_.size(); }

    void clear() {
        steps_.clear();
        produced_.clear();
    }

    // Seeds d(loss)/d(loss)=1 and walks the tape backwards. Gradients of tape
    // intermediates are rebuilt from zero each call; leaf gradients accumulate.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1) throw InvariantError("backward requires a scalar loss");
        if (!loss.requires_grad()) throw InvariantError("backward on a tensor with no gradient path");
        for (auto& w : produced_) {
            if (auto p = w.lock())
                if (p->requires_grad) std::fill(p->grad.begin(), p->grad.end(), 0.0);
        }
        loss.data_ptr()->grad[0] += 1.0;
        for (std::size_t i = steps_.size(); i > 0; --i) steps_[i - 1]();
    }

    // ----------------------------- arithmetic -----------------------------

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.cols() != b.rows())
            throw InvariantError("matmul dim mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
        const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
        Tensor out = Tensor::zeros({m, n});
        detail::mm_nn(out.value().data(), a.value().data(), b.value().data(), m, k, n);
        out.check_finite("matmul");
        record(out, {a, b}, [a, b, out, m, k, n]() {
            const auto& g = out.data_ptr()->grad;
            if (a.requires_grad()) detail::mm_nt(a.data_ptr()->grad.data(), g.data(), b.value().data(), m, n, k);
            if (b.requires_grad()) detail::mm_tn(b.data_ptr()->grad.data(), a.value().data(), g.data(), m, k, n);
        });
        return out;
    }

    // a(m x k) * b(n x k)^T -> (m x n)
    Tensor matmul_nt(const Tensor& a, const Tensor& b) {
        if (a.cols() != b.cols())
            throw InvariantError("matmul_nt dim mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()) + "^T");
        const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
        Tensor out = Tensor::zeros({m, n});
        detail::mm_nt(out.value().data(), a.value().data(), b.value().data(), m, k, n);
        out.check_finite("matmul_nt");
        record(out, {a, b}, [a, b, out, m, k, n]() {
            const auto& g = out.data_ptr()->grad;
            // dA += G * B ; dB += G^T * A
            if (a.requires_grad()) detail::mm_nn(a.data_ptr()->grad.data(), g.data(), b.value().data(), m, n, k);
            if (b.requires_grad()) detail::mm_tn(b.data_ptr()->grad.data(), g.data(), a.value().data(), m, n, k);
        });
        return out;
    }

    Tensor add(const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape()) throw InvariantError("add shape mismatch");
        Tensor out = Tensor::zeros(a.shape());
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] + b.value()[i];
        out.check_finite("add");
        record(out, {a, b}, [a, b, out, n]() {
            const auto& g = out.data_ptr()->grad;
            if (a.requires_grad())
                for (std::size_t i = 0; i < n; ++i) a.data_ptr()->grad[i] += g[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n; ++i) b.data_ptr()->grad[i] += g[i];
        });
        return out;
    }

    Tensor sub(const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape()) throw InvariantError("sub shape mismatch");
        Tensor out = Tensor::zeros(a.shape());
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] - b.value()[i];
        out.check_finite("sub");
        record(out, {a, b}, [a, b, out, n]() {
            const auto& g = out.data_ptr()->grad;
            if (a.requires_grad())
                for (std::size_t i = 0; i < n; ++i) a.data_ptr()->grad[i] += g[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n; ++i) b.data_ptr()->grad[i] -= g[i];
        });
        return out;
    }

    Tensor mul(const Tensor& a, const Tensor& b) {
        if (a.shape() != b.shape()) throw InvariantError("mul shape mismatch");
        Tensor out = Tensor::zeros(a.shape());
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * b.value()[i];
        out.check_finite("mul");
        record(out, {a, b}, [a, b, out, n]() {
            const auto& g = out.data_ptr()->grad;
            if (a.requires_grad())
                for (std::size_t i = 0; i < n; ++i) a.data_ptr()->grad[i] += g[i] * b.value()[i];
            if (b.requires_grad())
                for (std::size_t i = 0; i < n; ++i) b.data_ptr()->grad[i] += g[i] * a.value()[i];
        });
        return out;
    }

    Tensor scale(const Tensor& a, double c) {
        Tensor out = Tensor::zeros(a.shape());
        const std::size_t n = a.numel();
        for (std::size_t i = 0; i < n; ++i) out.value()[i] = c * a.value()[i];
        out.check_finite("scale");
        record(out, {a}, [a, out, c, n]() {
            const auto& g = out.data_ptr()->grad;
            if (a.requires_grad())
                for (std::size_t i = 0; i < n; ++i) a.data_ptr()->grad[i] += c * g[i];
        });
        return out;
    }

    // broadcast row vector (1 x n) over every row of x (m x n); the only
    // broadcasting form in the engine
    Tensor add_row(const Tensor& x, const Tensor& r) {
        if (r.rows() != 1 || r.cols() != x.cols()) throw InvariantError("add_row expects a 1 x cols(x) bias row");
        const std::size_t m = x.rows(), n = x.cols();
        Tensor out = Tensor::zeros({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.value()[i * n + j] = x.value()[i * n + j] + r.value()[j];
        out.check_finite("add_row");
        record(out, {x, r}, [x, r, out, m, n]() {
            const auto& g = out.data_ptr()->grad;
            if (x.requires_grad())
                for (std::size_t i = 0; i < m * n; ++i) x.data_ptr()->grad[i] += g[i];
            if (r.requires_grad())
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) r.data_ptr()->grad[j] += g[i * n + j];
        });
        return out;
    }

    // ----------------------------- shape ops -----------------------------

    Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t width) {
        if (c0 + width > x.cols()) throw InvariantError("slice_cols out of range");
        const std::size_t m = x.rows(), n = x.cols();
        Tensor out = Tensor::zeros({m, width});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < width; ++j) out.value()[i * width + j] = x.value()[i * n + c0 + j];
        record(out, {x}, [x, out, c0, width, m, n]() {
            if (!x.requires_grad()) return;
            const auto& g = out.data_ptr()->grad;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < width; ++j) x.data_ptr()->grad[i * n + c0 + j] += g[i * width + j];
        });
        return out;
    }

    Tensor slice_rows(const Tensor& x, std::size_t r0, std::size_t count) {
        if (r0 + count > x.rows()) throw InvariantError("slice_rows out of range");
        const std::size_t n = x.cols();
        Tensor out = Tensor::zeros({count, n});
        std::copy_n(x.value().data() + r0 * n, count * n, out.value().data());
        record(out, {x}, [x, out, r0, count, n]() {
            if (!x.requires_grad()) return;
            const auto& g = out.data_ptr()->grad;
            for (std::size_t i = 0; i < count * n; ++i) x.data_ptr()->grad[r0 * n + i] += g[i];
        });
        return out;
    }

    Tensor concat_cols(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw InvariantError("concat_cols of nothing");
        const std::size_t m = parts[0].rows();
        std::size_t total = 0;
        for (const auto& p : parts) {
            if (p.rows() != m) throw InvariantError("concat_cols row mismatch");
            total += p.cols();
        }
        Tensor out = Tensor::zeros({m, total});
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t w = p.cols();
            for (std::size_t i = 0; i < m; ++i)
                std::copy_n(p.value().data() + i * w, w, out.value().data() + i * total + off);
            off += w;
        }
        record(out, parts, [parts, out, m, total]() {
            const auto& g = out.data_ptr()->grad;
            std::size_t off2 = 0;
            for (const auto& p : parts) {
                const std::size_t w = p.cols();
                if (p.requires_grad())
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j) p.data_ptr()->grad[i * w + j] += g[i * total + off2 + j];
                off2 += w;
            }
        });
        return out;
    }

    // rows stacked top to bottom; parts with zero rows are legal and skipped
    Tensor concat_rows(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw InvariantError("concat_rows of nothing");
        std::size_t n = 0, total = 0;
        for (const auto& p : parts) {
            if (p.rows() == 0) continue;
            if (n == 0)
                n = p.cols();
            else if (p.cols() != n)
                throw InvariantError("concat_rows col mismatch");
            total += p.rows();
        }
        if (total == 0) throw InvariantError("concat_rows: all parts empty");
        Tensor out = Tensor::zeros({total, n});
        std::size_t off = 0;
        for (const auto& p : parts) {
            if (p.rows() == 0) continue;
            std::copy_n(p.value().data(), p.numel(), out.value().data() + off * n);
            off += p.rows();
        }
        record(out, parts, [parts, out, n]() {
            const auto& g = out.data_ptr()->grad;
            std::size_t off2 = 0;
            for (const auto& p : parts) {
                if (p.rows() == 0) continue;
                if (p.requires_grad())
                    for (std::size_t i = 0; i < p.numel(); ++i) p.data_ptr()->grad[i] += g[off2 * n + i];
                off2 += p.rows();
            }
        });
        return out;
    }

    Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& ids) {
        const std::size_t d = table.cols();
        Tensor out = Tensor::zeros({ids.size(), d});
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= table.rows()) throw InvariantError("gather_rows id out of range");
            std::copy_n(table.value().data() + ids[i] * d, d, out.value().data() + i * d);
        }
        record(out, {table}, [table, out, ids, d]() {
            if (!table.requires_grad()) return;
            const auto& g = out.data_ptr()->grad;
            for (std::size_t i = 0; i < ids.size(); ++i)
                for (std::size_t j = 0; j < d; ++j) table.data_ptr()->grad[ids[i] * d + j] += g[i * d + j];
        });
        return out;
    }

    // picks x[r,c] for each (r,c) pair into a (p x 1) column
    Tensor gather_entries(const Tensor& x, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
        const std::size_t n = x.cols();
        Tensor out = Tensor::zeros({pairs.size(), 1});
        for (std::size_t i = 0; i < pairs.size(); ++i) {
            if (pairs[i].first >= x.rows() || pairs[i].second >= n) throw InvariantError("gather_entries out of range");
            out.value()[i] = x.value()[pairs[i].first * n + pairs[i].second];
        }
        record(out, {x}, [x, out, pairs, n]() {
            if (!x.requires_grad()) return;
            const auto& g = out.data_ptr()->grad;
            for (std::size_t i = 0; i < pairs.size(); ++i)
                x.data_ptr()->grad[pairs[i].first * n + pairs[i].second] += g[i];
        });
        return out;
    }

    Tensor mean_rows(const Tensor& x) {
        const std::size_t m = x.rows(), n = x.cols();
        if (m == 0) throw InvariantError("mean_rows of empty tensor");
        Tensor out = Tensor::zeros({1, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out.value()[j] += x.value()[i * n + j];
        for (std::size_t j = 0; j < n; ++j) out.value()[j] /= static_cast<double>(m);
        out.check_finite("mean_rows");
        record(out, {x}, [x, out, m, n]() {
            if (!x.requires_grad()) return;
            const auto& g = out.data_ptr()->grad;
            const double inv = 1.0 / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) x.data_ptr()->grad[i * n + j] += g[j] * inv;
        });
        return out;
    }

    Tensor sum_all(const Tensor& x) {
        Tensor out = Tensor::zeros({1});
        double s = 0.0;
        for (double v : x.value()) s += v;
        out.value()[0] = s;
        out.check_finite("sum_all");
        record(out, {x}, [x, out]() {
            if (!x.requires_grad()) return;
            const double g = out.data_ptr()->grad[0];
            for (auto& gv : x.data_ptr()->grad) gv += g;
        });
        return out;
    }

    // ----------------------------- nonlinearities -----------------------------

    Tensor softmax_rows(const Tensor& x) {
        const std::size_t m = x.rows(), n = x.cols();
        Tensor out = Tensor::zeros({m, n});
        for (std::size_t i = 0; i < m; ++i) {
            const double* xi = x.value().data() + i * n;
            double* yi = out.value().data() + i * n;
            double mx = xi[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
            double denom = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                yi[j] = std::exp(xi[j] - mx);
                denom += yi[j];
            }
            for (std::size_t j = 0; j < n; ++j) yi[j] /= denom;
        }
        out.check_finite("softmax_rows");
        record(out, {x}, [x, out, m, n]() {
            if (!x.requires_grad()) return;
            const auto& g = out.data_ptr()->grad;
            const auto& y = out.value();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    x.data_ptr()->grad[i * n + j] += y[i * n + j] * (g[i * n + j] - dot);
            }
        });
        return out;
    }

    Tensor logsumexp_rows(const Tensor& x) {
        const std::size_t m = x.rows(), n = x.cols();
        Tensor out = Tensor::zeros({m, 1});
        for (std::size_t i = 0; i < m; ++i) {
            const double* xi = x.value().data() + i * n;
            double mx = xi[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += std::exp(xi[j] - mx);
            out.value()[i] = mx + std::log(s);
        }
        out.check_finite("logsumexp_rows");
        record(out, {x}, [x, out, m, n]() {
            if (!x.requires_grad()) return;
            const auto& g = out.data_ptr()->grad;
            for (std::size_t i = 0; i < m; ++i) {
                const double* xi = x.value().data() + i * n;
                const double lse = out.value()[i];
                for (std::size_t j = 0; j < n; ++j)
                    x.data_ptr()->grad[i * n + j] += g[i] * std::exp(xi[j] - lse);
            }
        });
        return out;
    }

    Tensor gelu(const Tensor& x) {
        const std::size_t n = x.numel();
        Tensor out = Tensor::zeros(x.shape());
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = x.value()[i];
            out.value()[i] = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
        }
        out.check_finite("gelu");
        record(out, {x}, [x, out, n]() {
            if (!x.requires_grad()) return;
            constexpr double inv_sqrt2pi = 0.39894228040143267794;
            constexpr double inv_sqrt2b = 0.70710678118654752440;
            const auto& g = out.data_ptr()->grad;
            for (std::size_t i = 0; i < n; ++i) {
                const double v = x.value()[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2b));
                const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                x.data_ptr()->grad[i] += g[i] * (cdf + v * pdf);
            }
        });
        return out;
    }

    // row-wise layer norm with learned gain/bias rows (1 x n)
    Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
        const std::size_t m = x.rows(), n = x.cols();
        if (gain.cols() != n || bias.cols() != n) throw InvariantError("layer_norm gain/bias dim mismatch");
        Tensor out = Tensor::zeros({m, n});
        std::vector<double> inv_sigma(m), xhat(m * n);
        for (std::size_t i = 0; i < m; ++i) {
            const double* xi = x.value().data() + i * n;
            double mu = 0.0;
            for (std::size_t j = 0; j < n; ++j) mu += xi[j];
            mu /= static_cast<double>(n);
            double var = 0.0;
            for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
            var /= static_cast<double>(n);
            const double is = 1.0 / std::sqrt(var + eps);
            inv_sigma[i] = is;
            for (std::size_t j = 0; j < n; ++j) {
                xhat[i * n + j] = (xi[j] - mu) * is;
                out.value()[i * n + j] = gain.value()[j] * xhat[i * n + j] + bias.value()[j];
            }
        }
        out.check_finite("layer_norm");
        record(out, {x, gain, bias},
               [x, gain, bias, out, m, n, inv_sigma = std::move(inv_sigma), xhat = std::move(xhat)]() {
                   const auto& g = out.data_ptr()->grad;
                   for (std::size_t i = 0; i < m; ++i) {
                       double mean_h = 0.0, mean_hx = 0.0;
                       for (std::size_t j = 0; j < n; ++j) {
                           const double h = g[i * n + j] * gain.value()[j];
                           mean_h += h;
                           mean_hx += h * xhat[i * n + j];
                       }
                       mean_h /= static_cast<double>(n);
                       mean_hx /= static_cast<double>(n);
                       if (x.requires_grad())
                           for (std::size_t j = 0; j < n; ++j) {
                               const double h = g[i * n + j] * gain.value()[j];
                               x.data_ptr()->grad[i * n + j] +=
                                   (h - mean_h - xhat[i * n + j] * mean_hx) * inv_sigma[i];
                           }
                       if (gain.requires_grad())
                           for (std::size_t j = 0; j < n; ++j)
                               gain.data_ptr()->grad[j] += g[i * n + j] * xhat[i * n + j];
                       if (bias.requires_grad())
                           for (std::size_t j = 0; j < n; ++j) bias.data_ptr()->grad[j] += g[i * n + j];
                   }
               });
        return out;
    }

    // each row divided by its L2 norm; zero rows are an error (cosine undefined)
    Tensor l2_normalize_rows(const Tensor& x) {
        const std::size_t m = x.rows(), n = x.cols();
        Tensor out = Tensor::zeros({m, n});
        std::vector<double> norms(m);
        for (std::size_t i = 0; i < m; ++i) {
            const double* xi = x.value().data() + i * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += xi[j] * xi[j];
            const double nr = std::sqrt(s);
            if (nr == 0.0) throw NumericError("l2_normalize_rows: zero row");
            norms[i] = nr;
            for (std::size_t j = 0; j < n; ++j) out.value()[i * n + j] = xi[j] / nr;
        }
        out.check_finite("l2_normalize_rows");
        record(out, {x}, [x, out, m, n, norms = std::move(norms)]() {
            if (!x.requires_grad()) return;
            const auto& g = out.data_ptr()->grad;
            const auto& y = out.value();
            for (std::size_t i = 0; i < m; ++i) {
                double dot = 0.0;
                for (std::size_t j = 0; j < n; ++j) dot += g[i * n + j] * y[i * n + j];
                for (std::size_t j = 0; j < n; ++j)
                    x.data_ptr()->grad[i * n + j] += (g[i * n + j] - dot * y[i * n + j]) / norms[i];
            }
        });
        return out;
    }

    // mean over rows of -log softmax(logits)[target]
    Tensor cross_entropy_logits(const Tensor& logits, const std::vector<std::size_t>& targets) {
        const std::size_t m = logits.rows(), v = logits.cols();
        if (targets.size() != m) throw InvariantError("cross_entropy_logits: one target per row required");
        for (auto t : targets)
            if (t >= v) throw InvariantError("cross_entropy_logits: target out of range");
        Tensor out = Tensor::zeros({1});
        std::vector<double> lse(m);
        for (std::size_t i = 0; i < m; ++i) {
            const double* xi = logits.value().data() + i * v;
            double mx = xi[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
            double s = 0.0;
            for (std::size_t j = 0; j < v; ++j) s += std::exp(xi[j] - mx);
            lse[i] = mx + std::log(s);
            out.value()[0] += lse[i] - xi[targets[i]];
        }
        out.value()[0] /= static_cast<double>(m);
        out.check_finite("cross_entropy_logits");
        record(out, {logits}, [logits, out, targets, m, v, lse = std::move(lse)]() {
            if (!logits.requires_grad()) return;
            const double g = out.data_ptr()->grad[0] / static_cast<double>(m);
            for (std::size_t i = 0; i < m; ++i) {
                const double* xi = logits.value().data() + i * v;
                double* gi = logits.data_ptr()->grad.data() + i * v;
                for (std::size_t j = 0; j < v; ++j) {
                    const double p = std::exp(xi[j] - lse[i]);
                    gi[j] += g * (p - (j == targets[i] ? 1.0 : 0.0));
                }
            }
        });
        return out;
    }

private:
    void record(Tensor& out, const std::vector<Tensor>& inputs, std::function<void()> back) {
        out.d_->leaf = false;
        if (!recording_) return;
        bool needs = false;
        for (const auto& in : inputs)
            if (in.requires_grad()) {
                needs = true;
                break;
            }
        if (!needs) return;
        out.d_->requires_grad = true;
        out.d_->grad.assign(out.d_->value.size(), 0.0);
        produced_.push_back(out.d_);
        steps_.push_back(std::move(back));
    }

    bool recording_ = true;
    std::vector<std::function<void()>> steps_;
    std::vector<std::weak_ptr<Tensor::Data>> produced_;
};

}  // namespace mmgl
