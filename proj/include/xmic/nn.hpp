#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "xmic/tensor.hpp"

namespace xmic {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline constexpr std::size_t kNumHeads = 8;
inline constexpr Scalar kInitStddev = 0.02;

// One pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
// The MLP bottleneck is D/4 with QuickGELU.
struct TransformerBlockParams {
    std::size_t dim = 0;
    Tensor Wq, bq, Wk, bk, Wv, bv, Wo, bo;
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Tensor W1, b1, W2, b2;

    NamedParams named(const std::string& prefix) const {
        return {{prefix + ".Wq", Wq}, {prefix + ".bq", bq}, {prefix + ".Wk", Wk},
                {prefix + ".bk", bk}, {prefix + ".Wv", Wv}, {prefix + ".bv", bv},
                {prefix + ".Wo", Wo}, {prefix + ".bo", bo}, {prefix + ".ln1_gain", ln1_gain},
                {prefix + ".ln1_bias", ln1_bias}, {prefix + ".ln2_gain", ln2_gain},
                {prefix + ".ln2_bias", ln2_bias}, {prefix + ".W1", W1}, {prefix + ".b1", b1},
                {prefix + ".W2", W2}, {prefix + ".b2", b2}};
    }
};

// Gaussian(0.02) projections, zero biases, unit layer-norm gains. With
// zero_init the MHA output projection and the MLP up-projection start at
// zero, so the whole block is the identity at initialization.
inline TransformerBlockParams make_transformer_block(std::size_t dim, Rng& rng,
                                                     bool zero_init = true,
                                                     bool requires_grad = true) {
    if (dim % kNumHeads != 0)
        throw BadShapeError("transformer dim " + std::to_string(dim) + " not divisible by " +
                            std::to_string(kNumHeads) + " heads");
    std::size_t hidden = dim / 4;
    if (hidden == 0) throw BadShapeError("transformer dim too small for D/4 bottleneck");
    TransformerBlockParams p;
    p.dim = dim;
    auto mat = [&](std::size_t r, std::size_t c) {
        return Tensor::randn({r, c}, rng, kInitStddev, requires_grad);
    };
    p.Wq = mat(dim, dim);
    p.bq = Tensor::zeros({dim}, requires_grad);
    p.Wk = mat(dim, dim);
    p.bk = Tensor::zeros({dim}, requires_grad);
    p.Wv = mat(dim, dim);
    p.bv = Tensor::zeros({dim}, requires_grad);
    p.Wo = zero_init ? Tensor::zeros({dim, dim}, requires_grad) : mat(dim, dim);
    p.bo = Tensor::zeros({dim}, requires_grad);
    p.ln1_gain = Tensor::full({dim}, 1.0, requires_grad);
    p.ln1_bias = Tensor::zeros({dim}, requires_grad);
    p.ln2_gain = Tensor::full({dim}, 1.0, requires_grad);
    p.ln2_bias = Tensor::zeros({dim}, requires_grad);
    p.W1 = mat(dim, hidden);
    p.b1 = Tensor::zeros({hidden}, requires_grad);
    p.W2 = zero_init ? Tensor::zeros({hidden, dim}, requires_grad) : mat(hidden, dim);
    p.b2 = Tensor::zeros({dim}, requires_grad);
    return p;
}

inline Tensor multi_head_attention(const Tensor& seq, const TransformerBlockParams& p) {
    if (seq.rank() != 2) throw BadShapeError("multi_head_attention expects [L, D]");
    std::size_t l = seq.dim(0), d = seq.dim(1);
    if (l == 0) throw EmptySequenceError("multi_head_attention on empty sequence");
    if (d != p.dim) throw DimMismatchError("sequence width " + std::to_string(d) +
                                           " vs block dim " + std::to_string(p.dim));
    if (d % kNumHeads != 0)
        throw BadShapeError("width " + std::to_string(d) + " not divisible by " +
                            std::to_string(kNumHeads) + " heads");
    std::size_t dh = d / kNumHeads;
    Tensor q = add_rowvec(matmul(seq, p.Wq), p.bq);
    Tensor k = add_rowvec(matmul(seq, p.Wk), p.bk);
    Tensor v = add_rowvec(matmul(seq, p.Wv), p.bv);
    Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(dh));
    std::vector<Tensor> heads;
    heads.reserve(kNumHeads);
    for (std::size_t h = 0; h < kNumHeads; ++h) {
        Tensor qh = slice_cols(q, h * dh, dh);
        Tensor kh = slice_cols(k, h * dh, dh);
        Tensor vh = slice_cols(v, h * dh, dh);
        Tensor attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt));
        heads.push_back(matmul(attn, vh));
    }
    return add_rowvec(matmul(concat_cols(heads), p.Wo), p.bo);
}

inline Tensor mlp_forward(const Tensor& x, const TransformerBlockParams& p) {
    Tensor hidden = quick_gelu(add_rowvec(matmul(x, p.W1), p.b1));
    return add_rowvec(matmul(hidden, p.W2), p.b2);
}

inline Tensor transformer_block(const Tensor& seq, const TransformerBlockParams& p) {
    Tensor x = add(seq, multi_head_attention(layer_norm(seq, p.ln1_gain, p.ln1_bias), p));
    return add(x, mlp_forward(layer_norm(x, p.ln2_gain, p.ln2_bias), p));
}

}  // namespace xmic
