#pragma once

#include <cmath>
#include <vector>

#include "mmgl/tensor.hpp"

namespace mmgl {

// Input projections W_q/W_k/W_v plus output projection W_o for one multi-head
// attention layer. All maps are d x d; heads act on contiguous column groups.
struct AttentionParams {
    Tensor wq, wk, wv, wo;

    static AttentionParams init(std::size_t dim, Rng& rng) {
        AttentionParams p;
        p.wq = Tensor::uniform_init({dim, dim}, dim, rng);
        p.wk = Tensor::uniform_init({dim, dim}, dim, rng);
        p.wv = Tensor::uniform_init({dim, dim}, dim, rng);
        p.wo = Tensor::uniform_init({dim, dim}, dim, rng);
        return p;
    }

    std::size_t dim() const { return wq.rows(); }

    std::vector<Tensor> tensors() const { return {wq, wk, wv, wo}; }
};

// lower-triangular additive mask: position i may attend to j <= i
inline Tensor causal_mask(std::size_t len) {
    Tensor m = Tensor::zeros({len, len});
    for (std::size_t i = 0; i < len; ++i)
        for (std::size_t j = i + 1; j < len; ++j) m.value()[i * len + j] = -1e30;
    return m;
}

// Scaled dot-product attention with multiple heads: q (a x d), k/v (b x d),
// scale 1/sqrt(d/heads) per head, heads concatenated, then W_o. The optional
// mask (a x b) is added to every head's score matrix before the softmax.
inline Tensor attention(Tape& tp, const AttentionParams& p, const Tensor& q, const Tensor& k, const Tensor& v,
                        std::size_t heads, const Tensor* mask = nullptr) {
    const std::size_t d = p.dim();
    if (q.cols() != d || k.cols() != d || v.cols() != d) throw InvariantError("attention: input dim mismatch");
    if (k.rows() != v.rows()) throw InvariantError("attention: key/value row mismatch");
    if (heads == 0 || d % heads != 0) throw InvariantError("attention: dim not divisible by head count");
    const std::size_t hd = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor qp = tp.matmul(q, p.wq);
    Tensor kp = tp.matmul(k, p.wk);
    Tensor vp = tp.matmul(v, p.wv);

    std::vector<Tensor> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor qh = tp.slice_cols(qp, h * hd, hd);
        Tensor kh = tp.slice_cols(kp, h * hd, hd);
        Tensor vh = tp.slice_cols(vp, h * hd, hd);
        Tensor scores = tp.scale(tp.matmul_nt(qh, kh), inv_scale);
        if (mask != nullptr) scores = tp.add(scores, *mask);
        Tensor weights = tp.softmax_rows(scores);
        head_out.push_back(tp.matmul(weights, vh));
    }
    Tensor merged = heads == 1 ? head_out[0] : tp.concat_cols(head_out);
    return tp.matmul(merged, p.wo);
}

}  // namespace mmgl
