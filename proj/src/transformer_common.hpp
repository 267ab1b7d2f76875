#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "lst/rng.hpp"
#include "lst/tensor.hpp"

// Building blocks shared by the LST and the baseline transformers so the
// pure-text equivalence between them holds op for op.
namespace lst::model::detail {

inline ad::Tensor gaussian(Rng& rng, std::vector<std::int64_t> shape, double scale) {
    ad::Tensor t = ad::Tensor::zeros(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) {
        const double u1 = 1.0 - rng.unit();  // (0, 1]
        const double u2 = rng.unit();
        t[i] = scale * std::sqrt(-2.0 * std::log(u1)) *
               std::cos(6.283185307179586 * u2);
    }
    return t;
}

inline std::shared_ptr<ad::MaskMatrix> causal_mask(std::int64_t T) {
    auto m = std::make_shared<ad::MaskMatrix>(ad::MaskMatrix::all(T, T, false));
    for (std::int64_t i = 0; i < T; ++i)
        for (std::int64_t j = 0; j <= i; ++j) m->at(i, j) = 1;
    return m;
}

// Window of W positions ending at self; W == 0 leaves every row empty.
inline std::shared_ptr<ad::MaskMatrix> window_causal_mask(std::int64_t T, std::int64_t W) {
    auto m = std::make_shared<ad::MaskMatrix>(ad::MaskMatrix::all(T, T, false));
    for (std::int64_t i = 0; i < T; ++i)
        for (std::int64_t j = std::max<std::int64_t>(0, i - W + 1); j <= i && W > 0; ++j)
            m->at(i, j) = 1;
    return m;
}

struct AttnParams {
    ad::Var wq, wk, wv, wo;
};

// Multi-head attention; queries from xq, keys/values from xkv. RoPE applies
// per head when positions are given.
inline ad::Var attention(ad::Tape& t, ad::Var xq, ad::Var xkv, const AttnParams& w,
                         std::int64_t n_heads, std::shared_ptr<const ad::MaskMatrix> mask,
                         const std::vector<std::int64_t>* pos_q,
                         const std::vector<std::int64_t>* pos_k, double theta) {
    ad::Var q = t.matmul(xq, w.wq);
    ad::Var k = t.matmul(xkv, w.wk);
    ad::Var v = t.matmul(xkv, w.wv);
    const std::int64_t d = q.value().cols();
    const std::int64_t dh = d / n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> heads;
    heads.reserve(n_heads);
    for (std::int64_t h = 0; h < n_heads; ++h) {
        ad::Var qh = t.slice_cols(q, h * dh, (h + 1) * dh);
        ad::Var kh = t.slice_cols(k, h * dh, (h + 1) * dh);
        ad::Var vh = t.slice_cols(v, h * dh, (h + 1) * dh);
        if (pos_q) qh = t.rotary_position_embed(qh, *pos_q, theta);
        if (pos_k) kh = t.rotary_position_embed(kh, *pos_k, theta);
        ad::Var scores = t.scale(t.matmul(qh, t.transpose(kh)), inv_sqrt);
        ad::Var probs = t.masked_softmax(scores, mask);
        heads.push_back(t.matmul(probs, vh));
    }
    return t.matmul(t.concat_cols(heads), w.wo);
}

// SiLU-gated feed-forward: (silu(x w1) * (x w3)) w2
inline ad::Var ffn(ad::Tape& t, ad::Var x, ad::Var w1, ad::Var w3, ad::Var w2) {
    return t.matmul(t.mul(t.silu(t.matmul(x, w1)), t.matmul(x, w3)), w2);
}

}  // namespace lst::model::detail
