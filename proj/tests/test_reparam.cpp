// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "coqmoe/reparam.hpp"
#include "coqmoe/synthetic.hpp"

using namespace coqmoe;

namespace {

QuantParams per_channel(Vector s, std::vector<std::int32_t> z, int bits = 8) {
    QuantParams p;
    p.bits = bits;
    p.symmetric = false;
    p.granularity = Granularity::per_channel;
    p.scales = std::move(s);
    p.zero_points = std::move(z);
    return p;
}

QuantParams random_params(std::size_t d, Rng& rng, int bits = 8) {
    Vector s(d);
    std::vector<std::int32_t> z(d);
    for (std::size_t c = 0; c < d; ++c) {
        s[c] = std::exp(rng.uniform(std::log(1e-3), std::log(2.0)));
        z[c] = static_cast<std::int32_t>(rng.below(std::uint64_t{1} << bits));
    }
    return per_channel(std::move(s), std::move(z), bits);
}

Vector normal_vector_for_test(std::size_t n, Rng& rng) {
    Vector v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

double rel(const Matrix& a, const Matrix& b) { return max_rel_diff(a, b); }

}  // namespace

TEST(Factors, HandExample) {
    const ReparamFactors f = compute_factors(per_channel({0.1, 0.3}, {100, 150}));
    EXPECT_DOUBLE_EQ(f.s_tilde, 0.2);
    EXPECT_DOUBLE_EQ(f.r1[0], 0.5);
    EXPECT_DOUBLE_EQ(f.r1[1], 1.5);
    EXPECT_EQ(f.r2, (std::vector<std::int32_t>{-28, 22}));
}

TEST(Factors, EqualScalesMidZeroIsIdentity) {
    const ReparamFactors f = compute_factors(per_channel({0.75, 0.75, 0.75}, {128, 128, 128}));
    for (double r : f.r1) EXPECT_EQ(r, 1.0);
    for (auto r : f.r2) EXPECT_EQ(r, 0);
}

TEST(Factors, SingleChannel) {
    const ReparamFactors f = compute_factors(per_channel({0.37}, {3}));
    EXPECT_EQ(f.s_tilde, 0.37);
    EXPECT_EQ(f.r1[0], 1.0);
    EXPECT_EQ(f.r2[0], 3 - 128);
}

TEST(Factors, GeometricMean) {
    const ReparamFactors f = compute_factors(per_channel({0.1, 0.4}, {0, 0}), ScaleMean::geometric);
    EXPECT_NEAR(f.s_tilde, 0.2, 1e-15);
}

TEST(Factors, RejectsWrongParams) {
    QuantParams p;
    p.scales = {0.1};
    EXPECT_THROW(compute_factors(p), std::invalid_argument);
    QuantParams q = per_channel({0.1}, {0});
    q.granularity = Granularity::per_layer;
    EXPECT_THROW(compute_factors(q), std::invalid_argument);
}

TEST(RewriteLayerNorm, Examples) {
    const auto id = compute_factors(per_channel({0.2, 0.2}, {128, 128}));
    auto [g0, b0] = rewrite_layernorm(Vector{1.3, 0.4}, Vector{0.2, -1.0}, id);
    EXPECT_EQ(g0, (Vector{1.3, 0.4}));
    EXPECT_EQ(b0, (Vector{0.2, -1.0}));

    const auto f = compute_factors(per_channel({0.1, 0.3}, {128, 128}));
    auto [g1, b1] = rewrite_layernorm(Vector{1, 1}, Vector{0, 0}, f);
    EXPECT_DOUBLE_EQ(g1[0], 2.0);
    EXPECT_DOUBLE_EQ(g1[1], 2.0 / 3.0);
    EXPECT_EQ(b1, (Vector{0, 0}));

    const auto h = compute_factors(per_channel({0.5}, {130}));
    auto [g2, b2] = rewrite_layernorm(Vector{1}, Vector{1}, h);
    EXPECT_EQ(g2[0], 1.0);
    EXPECT_EQ(b2[0], 2.0);
    EXPECT_THROW(rewrite_layernorm(Vector{1, 1}, Vector{1}, h), std::invalid_argument);
}

TEST(RewriteLayerNorm, OutputEqualsTransformedActivation) {
    Rng rng(2);
    const std::size_t d = 12;
    const QuantParams p = random_params(d, rng);
    const ReparamFactors f = compute_factors(p);
    const Matrix x = random_normal(5, d, rng, 3.0);
    const Vector g = normal_vector_for_test(d, rng);
    const Vector b = normal_vector_for_test(d, rng);
    auto [gp, bp] = rewrite_layernorm(g, b, f);
    EXPECT_LE(rel(layernorm(x, gp, bp), apply_reparam(layernorm(x, g, b), f)), 1e-12);
}

TEST(RewriteNextLinear, Examples) {
    const auto id = compute_factors(per_channel({0.3}, {128}));
    auto [w0, b0] = rewrite_next_linear(Matrix::from_rows({{2, 3}}), Vector{1, -1}, id);
    EXPECT_EQ(w0, Matrix::from_rows({{2, 3}}));
    EXPECT_EQ(b0, (Vector{1, -1}));

    const auto f = compute_factors(per_channel({0.5}, {130}));
    auto [w1, b1] = rewrite_next_linear(Matrix::from_rows({{2}}), Vector{1}, f);
    EXPECT_EQ(w1, Matrix::from_rows({{2}}));
    EXPECT_EQ(b1[0], -1.0);
    EXPECT_THROW(rewrite_next_linear(Matrix(2, 1), Vector{1}, f), std::invalid_argument);
}

TEST(RewriteNextLinear, FunctionalEquivalence) {
    Rng rng(4);
    for (int t = 0; t < 200; ++t) {
        const std::size_t d = 1 + rng.below(40), k = 1 + rng.below(20);
        const ReparamFactors f = compute_factors(random_params(d, rng));
        const Matrix x = random_normal(3, d, rng, 2.0);
        const Matrix w = random_normal(d, k, rng);
        Vector b(k);
        for (double& v : b) v = rng.normal();
        auto [wp, bp] = rewrite_next_linear(w, b, f);
        EXPECT_LE(rel(affine(apply_reparam(x, f), wp, bp), affine(x, w, b)), 1e-10);
    }
}

TEST(CodeEquivalence, SymmetricCodesOfTransformedEqualShiftedAsymmetricCodes) {
    Rng rng(5);
    for (int bits : {4, 8}) {
        for (int t = 0; t < 200; ++t) {
            const std::size_t d = 1 + rng.below(64);
            const QuantParams p = random_params(d, rng, bits);
            const ReparamFactors f = compute_factors(p);
            const Matrix x = random_normal(4, d, rng, 2.0);
            const IntMatrix a = quantize(x, p).codes;
            const IntMatrix s = quantize(apply_reparam(x, f), f.unified_params()).codes;
            const std::int32_t half = 1 << (bits - 1);
            for (std::size_t i = 0; i < a.size(); ++i) ASSERT_EQ(s.data()[i], a.data()[i] - half);
        }
    }
}

TEST(RoundTrip, InverseRecoversParameters) {
    Rng rng(6);
    const std::size_t d = 16;
    const ReparamFactors f = compute_factors(random_params(d, rng));
    const Matrix w = random_normal(d, 7, rng);
    Vector b(7, 0.25), g(d, 1.5), be(d, -0.5);
    auto [wp, bp] = rewrite_next_linear(w, b, f);
    auto [w2, b2] = restore_next_linear(wp, bp, f);
    EXPECT_LE(max_abs_diff(w, w2), 1e-12);
    for (std::size_t c = 0; c < b.size(); ++c) EXPECT_NEAR(b[c], b2[c], 1e-12);
    auto [gp, bep] = rewrite_layernorm(g, be, f);
    auto [g2, be2] = restore_layernorm(gp, bep, f);
    for (std::size_t c = 0; c < d; ++c) {
        EXPECT_NEAR(g2[c], g[c], 1e-12);
        EXPECT_NEAR(be2[c], be[c], 1e-12);
    }
    const Matrix x = random_normal(3, d, rng);
    EXPECT_LE(max_abs_diff(undo_reparam(apply_reparam(x, f), f), x), 1e-12);
}

TEST(RewriteBlock, MoeIdentityFactorsLeaveWeightsUnchanged) {
    const ModelConfig c;
    const ModelWeights w = make_synthetic_weights(c, 3);
    const auto id = compute_factors(per_channel(Vector(c.dim, 0.125), std::vector<std::int32_t>(c.dim, 128)));
    const BlockWeights r = rewrite_block(w.blocks[1], LnSite::ln2, id);
    EXPECT_EQ(r.moe().w_gate, w.blocks[1].moe().w_gate);
    EXPECT_EQ(r.moe().b_gate, w.blocks[1].moe().b_gate);
    for (std::size_t j = 0; j < c.n_experts; ++j) {
        EXPECT_EQ(r.moe().experts[j].w1, w.blocks[1].moe().experts[j].w1);
        EXPECT_EQ(r.moe().experts[j].b1, w.blocks[1].moe().experts[j].b1);
    }
    EXPECT_EQ(r.ln2_gamma, w.blocks[1].ln2_gamma);
}

TEST(RewriteBlock, MoeScalesEveryExpertAndGateRow) {
    ModelConfig c;
    c.n_experts = 2;
    c.top_k = 1;
    const ModelWeights w = make_synthetic_weights(c, 8);
    Rng rng(9);
    const ReparamFactors f = compute_factors(random_params(c.dim, rng));
    const BlockWeights r = rewrite_block(w.blocks[1], LnSite::ln2, f);
    const auto& m0 = w.blocks[1].moe();
    const auto& m1 = r.moe();
    for (std::size_t i = 0; i < c.dim; ++i) {
        for (std::size_t j = 0; j < c.n_experts; ++j) EXPECT_DOUBLE_EQ(m1.w_gate(i, j), f.r1[i] * m0.w_gate(i, j));
        for (std::size_t e = 0; e < 2; ++e)
            for (std::size_t j = 0; j < c.hidden(); ++j)
                EXPECT_DOUBLE_EQ(m1.experts[e].w1(i, j), f.r1[i] * m0.experts[e].w1(i, j));
    }
    // fc2 is not a consumer of the LayerNorm output.
    EXPECT_EQ(m1.experts[0].w2, m0.experts[0].w2);
}

TEST(RewriteBlock, Ln1RewritesQkvOnly) {
    const ModelConfig c;
    const ModelWeights w = make_synthetic_weights(c, 3);
    Rng rng(10);
    const ReparamFactors f = compute_factors(random_params(c.dim, rng));
    const BlockWeights r = rewrite_block(w.blocks[0], LnSite::ln1, f);
    EXPECT_NE(r.w_qkv, w.blocks[0].w_qkv);
    EXPECT_EQ(r.w_o, w.blocks[0].w_o);
    EXPECT_EQ(r.mlp().w1, w.blocks[0].mlp().w1);
    EXPECT_EQ(r.ln2_gamma, w.blocks[0].ln2_gamma);
}

TEST(RewriteBlock, GateLogitsAndRoutingInvariant) {
    const ModelConfig c;
    Rng rng(11);
    for (int t = 0; t < 50; ++t) {
        const ModelWeights w = make_synthetic_weights(c, 100 + t);
        const ReparamFactors f = compute_factors(random_params(c.dim, rng));
        const BlockWeights r = rewrite_block(w.blocks[1], LnSite::ln2, f);
        const Matrix y = random_normal(c.n_tokens, c.dim, rng, 2.0);
        const Matrix yp = apply_reparam(y, f);
        for (std::size_t n = 0; n < c.n_tokens; ++n) {
            const Vector a = gate_logits(y.row(n), w.blocks[1].moe().w_gate, w.blocks[1].moe().b_gate);
            const Vector b = gate_logits(yp.row(n), r.moe().w_gate, r.moe().b_gate);
            double num = 0, den = 0;
            for (std::size_t j = 0; j < a.size(); ++j) {
                num = std::max(num, std::abs(a[j] - b[j]));
                den = std::max(den, std::abs(a[j]));
            }
            EXPECT_LE(num / den, 1e-10);
            EXPECT_EQ(top_k_from_logits(a, c.top_k).experts, top_k_from_logits(b, c.top_k).experts);
        }
        EXPECT_LE(rel(moe_forward(yp, r.moe(), c.top_k).out, moe_forward(y, w.blocks[1].moe(), c.top_k).out), 1e-10);
    }
}
