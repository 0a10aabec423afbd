#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <xmic/nn.hpp>
#include <xmic/rng.hpp>

using namespace xmic;

namespace {

bool all_close(const Tensor& t, const std::vector<Scalar>& want, Scalar tol) {
    if (t.numel() != want.size()) return false;
    for (std::size_t i = 0; i < want.size(); ++i)
        if (std::abs(t.data()[i] - want[i]) > tol) return false;
    return true;
}

// Straight-line multi-head attention over raw arrays; no tensor ops.
std::vector<Scalar> mha_reference(const std::vector<Scalar>& x, std::size_t l, std::size_t d,
                                  const TransformerBlockParams& p) {
    std::size_t dh = d / kNumHeads;
    auto project = [&](const Tensor& w, const Tensor& b) {
        std::vector<Scalar> out(l * d, 0.0);
        for (std::size_t i = 0; i < l; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                Scalar s = b.data()[j];
                for (std::size_t k = 0; k < d; ++k) s += x[i * d + k] * w.data()[k * d + j];
                out[i * d + j] = s;
            }
        return out;
    };
    std::vector<Scalar> q = project(p.Wq, p.bq);
    std::vector<Scalar> k = project(p.Wk, p.bk);
    std::vector<Scalar> v = project(p.Wv, p.bv);
    std::vector<Scalar> mixed(l * d, 0.0);
    Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(dh));
    for (std::size_t h = 0; h < kNumHeads; ++h) {
        for (std::size_t i = 0; i < l; ++i) {
            std::vector<Scalar> score(l, 0.0);
            for (std::size_t j = 0; j < l; ++j) {
                Scalar s = 0.0;
                for (std::size_t c = 0; c < dh; ++c)
                    s += q[i * d + h * dh + c] * k[j * d + h * dh + c];
                score[j] = s * inv_sqrt;
            }
            Scalar m = *std::max_element(score.begin(), score.end());
            Scalar z = 0.0;
            for (Scalar& s : score) {
                s = std::exp(s - m);
                z += s;
            }
            for (Scalar& s : score) s /= z;
            for (std::size_t c = 0; c < dh; ++c) {
                Scalar s = 0.0;
                for (std::size_t j = 0; j < l; ++j) s += score[j] * v[j * d + h * dh + c];
                mixed[i * d + h * dh + c] = s;
            }
        }
    }
    std::vector<Scalar> out(l * d, 0.0);
    for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            Scalar s = p.bo.data()[j];
            for (std::size_t c = 0; c < d; ++c) s += mixed[i * d + c] * p.Wo.data()[c * d + j];
            out[i * d + j] = s;
        }
    return out;
}

}  // namespace

TEST_CASE("multi_head_attention matches per-head brute force") {
    Rng rng = make_rng(42);
    TransformerBlockParams p = make_transformer_block(8, rng, /*zero_init=*/false);
    Tensor x = Tensor::randn({3, 8}, rng);
    Tensor got = multi_head_attention(x, p);
    std::vector<Scalar> want = mha_reference(x.data(), 3, 8, p);
    REQUIRE(all_close(got, want, 1e-12));

    SECTION("wider block, more rows") {
        TransformerBlockParams p16 = make_transformer_block(16, rng, false);
        Tensor x16 = Tensor::randn({5, 16}, rng);
        REQUIRE(all_close(multi_head_attention(x16, p16),
                          mha_reference(x16.data(), 5, 16, p16), 1e-12));
    }
}

TEST_CASE("attention reductions") {
    Rng rng = make_rng(7);
    TransformerBlockParams p = make_transformer_block(8, rng, false);

    SECTION("zero value projection collapses the output to the bias") {
        std::fill(p.Wv.mutable_data().begin(), p.Wv.mutable_data().end(), 0.0);
        std::fill(p.bv.mutable_data().begin(), p.bv.mutable_data().end(), 0.0);
        Tensor x = Tensor::randn({4, 8}, rng);
        Tensor y = multi_head_attention(x, p);
        REQUIRE(all_close(y, std::vector<Scalar>(4 * 8, 0.0), 1e-15));
    }

    SECTION("single token attends only to itself") {
        Tensor x = Tensor::randn({1, 8}, rng);
        Tensor y = multi_head_attention(x, p);
        // softmax over one key is 1, so the result is Wo(Wv x + bv) + bo
        Tensor v = add_rowvec(matmul(x, p.Wv), p.bv);
        Tensor want = add_rowvec(matmul(v, p.Wo), p.bo);
        REQUIRE(all_close(y, want.data(), 1e-12));
    }
}

TEST_CASE("attention shape errors") {
    Rng rng = make_rng(9);
    TransformerBlockParams p = make_transformer_block(8, rng);
    REQUIRE_THROWS_AS(multi_head_attention(Tensor::zeros({8}), p), BadShapeError);
    REQUIRE_THROWS_AS(multi_head_attention(Tensor::zeros({0, 8}), p), EmptySequenceError);
    REQUIRE_THROWS_AS(multi_head_attention(Tensor::zeros({2, 16}), p), DimMismatchError);
    REQUIRE_THROWS_AS(make_transformer_block(12, rng), BadShapeError);
}

TEST_CASE("mlp matches brute force") {
    Rng rng = make_rng(13);
    TransformerBlockParams p = make_transformer_block(8, rng, false);
    Tensor x = Tensor::randn({2, 8}, rng);
    Tensor y = mlp_forward(x, p);
    std::size_t hidden = 2;
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            Scalar s = p.b2.data()[j];
            for (std::size_t h = 0; h < hidden; ++h) {
                Scalar a = p.b1.data()[h];
                for (std::size_t k = 0; k < 8; ++k) a += x.at(i, k) * p.W1.data()[k * hidden + h];
                Scalar g = a / (1.0 + std::exp(-1.702 * a));
                s += g * p.W2.data()[h * 8 + j];
            }
            REQUIRE(std::abs(y.at(i, j) - s) < 1e-12);
        }
}

TEST_CASE("zero-init transformer block is the identity") {
    Rng rng = make_rng(17);
    TransformerBlockParams p = make_transformer_block(16, rng, /*zero_init=*/true);
    Tensor x = Tensor::randn({4, 16}, rng);
    Tensor y = transformer_block(x, p);
    REQUIRE(y.data() == x.data());
}

TEST_CASE("transformer block matches sublayer composition") {
    Rng rng = make_rng(19);
    TransformerBlockParams p = make_transformer_block(8, rng, false);
    // make the residual branches nontrivial
    Rng fill = make_rng(20);
    fill_normal(fill, p.Wo.mutable_data(), 0.05);
    fill_normal(fill, p.W2.mutable_data(), 0.05);
    Tensor x = Tensor::randn({3, 8}, rng);
    Tensor mid = add(x, multi_head_attention(layer_norm(x, p.ln1_gain, p.ln1_bias), p));
    Tensor want = add(mid, mlp_forward(layer_norm(mid, p.ln2_gain, p.ln2_bias), p));
    Tensor got = transformer_block(x, p);
    REQUIRE(got.data() == want.data());
}

TEST_CASE("transformer block is permutation equivariant") {
    Rng rng = make_rng(23);
    TransformerBlockParams p = make_transformer_block(8, rng, false);
    Rng fill = make_rng(24);
    fill_normal(fill, p.Wo.mutable_data(), 0.05);
    fill_normal(fill, p.W2.mutable_data(), 0.05);
    Tensor x = Tensor::randn({5, 8}, rng);
    std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
    std::vector<Scalar> permuted(5 * 8);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 8; ++j) permuted[i * 8 + j] = x.at(perm[i], j);
    Tensor y = transformer_block(x, p);
    Tensor yp = transformer_block(Tensor::from({5, 8}, std::move(permuted)), p);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 8; ++j)
            REQUIRE(std::abs(yp.at(i, j) - y.at(perm[i], j)) < 1e-9);
}

TEST_CASE("block parameter bookkeeping") {
    Rng rng = make_rng(29);
    TransformerBlockParams p = make_transformer_block(8, rng);
    NamedParams named = p.named("blk");
    REQUIRE(named.size() == 16);
    REQUIRE(named[0].first == "blk.Wq");
    for (const auto& [name, t] : named) {
        REQUIRE(t.defined());
        REQUIRE(t.requires_grad());
    }
    TransformerBlockParams frozen = make_transformer_block(8, rng, true, /*requires_grad=*/false);
    for (const auto& [name, t] : frozen.named("f")) REQUIRE_FALSE(t.requires_grad());
}
