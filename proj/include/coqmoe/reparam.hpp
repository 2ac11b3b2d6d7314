// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "coqmoe/model.hpp"
#include "coqmoe/quant.hpp"

namespace coqmoe {

/// How the unified per-layer scale is derived from the channel scales.
enum class ScaleMean { arithmetic, geometric };

/// Factors that turn per-channel asymmetric codes of a LayerNorm output X into
/// per-layer symmetric codes of X' = (X + s * r2) / r1 with one scale s_tilde.
///
/// r1 = s / s_tilde and r2 = z - 2^(b-1). Then X' / s_tilde = X / s + r2, and
/// since r2 is an integer the rounding commutes:
///   clip(round(X' / s_tilde), -2^(b-1), 2^(b-1)-1) == clip(round(X / s) + z, 0, 2^b-1) - 2^(b-1).
struct ReparamFactors {
    Vector r1;
    std::vector<std::int32_t> r2;
    double s_tilde = 1.0;
    QuantParams source;  // the per-channel asymmetric params

    [[nodiscard]] std::size_t channels() const noexcept { return r1.size(); }

    /// s * r2, the additive shift applied before division by r1.
    [[nodiscard]] Vector shift() const {
        Vector out(r1.size());
        for (std::size_t c = 0; c < out.size(); ++c) out[c] = source.scales[c] * static_cast<double>(r2[c]);
        return out;
    }

    /// Per-layer symmetric params with scale s_tilde, same bit width.
    [[nodiscard]] QuantParams unified_params() const {
        QuantParams p;
        p.bits = source.bits;
        p.symmetric = true;
        p.granularity = Granularity::per_layer;
        p.scales = {s_tilde};
        return p;
    }
};

inline ReparamFactors compute_factors(const QuantParams& p, ScaleMean mean = ScaleMean::arithmetic) {
    validate(p);
    if (p.granularity != Granularity::per_channel || p.symmetric)
        throw std::invalid_argument("compute_factors: params must be per-channel asymmetric");
    ReparamFactors f;
    f.source = p;
    const double n = static_cast<double>(p.scales.size());
    if (mean == ScaleMean::arithmetic) {
        double s = 0.0;
        for (double v : p.scales) s += v;
        f.s_tilde = s / n;
    } else {
        double s = 0.0;
        for (double v : p.scales) s += std::log(v);
        f.s_tilde = std::exp(s / n);
    }
    const std::int32_t half = std::int32_t{1} << (p.bits - 1);
    f.r1.resize(p.scales.size());
    f.r2.resize(p.scales.size());
    for (std::size_t c = 0; c < p.scales.size(); ++c) {
        f.r1[c] = p.scales[c] / f.s_tilde;
        f.r2[c] = p.zero_points[c] - half;
    }
    return f;
}

/// X' = (X + s * r2) / r1, column-wise.
inline Matrix apply_reparam(const Matrix& x, const ReparamFactors& f) {
    if (x.cols() != f.channels()) throw std::invalid_argument("apply_reparam: width mismatch");
    const Vector sh = f.shift();
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) out(r, c) = (x(r, c) + sh[c]) / f.r1[c];
    return out;
}

/// Inverse of apply_reparam: X = X' * r1 - s * r2.
inline Matrix undo_reparam(const Matrix& xp, const ReparamFactors& f) {
    if (xp.cols() != f.channels()) throw std::invalid_argument("undo_reparam: width mismatch");
    const Vector sh = f.shift();
    Matrix out(xp.rows(), xp.cols());
    for (std::size_t r = 0; r < xp.rows(); ++r)
        for (std::size_t c = 0; c < xp.cols(); ++c) out(r, c) = xp(r, c) * f.r1[c] - sh[c];
    return out;
}

/// beta' = (beta + s * r2) / r1, gamma' = gamma / r1.
inline std::pair<Vector, Vector> rewrite_layernorm(std::span<const double> gamma, std::span<const double> beta,
                                                   const ReparamFactors& f) {
    if (gamma.size() != f.channels() || beta.size() != f.channels())
        throw std::invalid_argument("rewrite_layernorm: length mismatch");
    const Vector sh = f.shift();
    Vector g(gamma.size()), b(beta.size());
    for (std::size_t c = 0; c < g.size(); ++c) {
        g[c] = gamma[c] / f.r1[c];
        b[c] = (beta[c] + sh[c]) / f.r1[c];
    }
    return {std::move(g), std::move(b)};
}

inline std::pair<Vector, Vector> restore_layernorm(std::span<const double> gamma_r, std::span<const double> beta_r,
                                                   const ReparamFactors& f) {
    if (gamma_r.size() != f.channels() || beta_r.size() != f.channels())
        throw std::invalid_argument("restore_layernorm: length mismatch");
    const Vector sh = f.shift();
    Vector g(gamma_r.size()), b(beta_r.size());
    for (std::size_t c = 0; c < g.size(); ++c) {
        g[c] = gamma_r[c] * f.r1[c];
        b[c] = beta_r[c] * f.r1[c] - sh[c];
    }
    return {std::move(g), std::move(b)};
}

/// W' = diag(r1) W, b' = b - W^T (s * r2), so that X' W' + b' == X W + b.
inline std::pair<Matrix, Vector> rewrite_next_linear(const Matrix& w, std::span<const double> bias,
                                                     const ReparamFactors& f) {
    if (w.rows() != f.channels() || bias.size() != w.cols())
        throw std::invalid_argument("rewrite_next_linear: shape mismatch");
    const Vector sh = f.shift();
    Matrix wp(w.rows(), w.cols());
    Vector bp(bias.begin(), bias.end());
    for (std::size_t r = 0; r < w.rows(); ++r)
        for (std::size_t c = 0; c < w.cols(); ++c) {
            wp(r, c) = f.r1[r] * w(r, c);
            bp[c] -= w(r, c) * sh[r];
        }
    return {std::move(wp), std::move(bp)};
}

inline std::pair<Matrix, Vector> restore_next_linear(const Matrix& wp, std::span<const double> bias_p,
                                                     const ReparamFactors& f) {
    if (wp.rows() != f.channels() || bias_p.size() != wp.cols())
        throw std::invalid_argument("restore_next_linear: shape mismatch");
    const Vector sh = f.shift();
    Matrix w(wp.rows(), wp.cols());
    Vector b(bias_p.begin(), bias_p.end());
    for (std::size_t r = 0; r < wp.rows(); ++r)
        for (std::size_t c = 0; c < wp.cols(); ++c) {
            w(r, c) = wp(r, c) / f.r1[r];
            b[c] += w(r, c) * sh[r];
        }
    return {std::move(w), std::move(b)};
}

enum class LnSite { ln1, ln2 };

/// Rewrites one LayerNorm and every linear layer that consumes its output:
/// ln1 feeds W_qkv; ln2 feeds the MLP fc1, or for an MoE block the gate and
/// the fc1 of every expert.
inline BlockWeights rewrite_block(const BlockWeights& bw, LnSite site, const ReparamFactors& f) {
    BlockWeights out = bw;
    if (site == LnSite::ln1) {
        std::tie(out.ln1_gamma, out.ln1_beta) = rewrite_layernorm(bw.ln1_gamma, bw.ln1_beta, f);
        std::tie(out.w_qkv, out.b_qkv) = rewrite_next_linear(bw.w_qkv, bw.b_qkv, f);
        return out;
    }
    std::tie(out.ln2_gamma, out.ln2_beta) = rewrite_layernorm(bw.ln2_gamma, bw.ln2_beta, f);
    if (out.is_moe()) {
        auto& m = out.moe();
        std::tie(m.w_gate, m.b_gate) = rewrite_next_linear(m.w_gate, m.b_gate, f);
        for (auto& e : m.experts) std::tie(e.w1, e.b1) = rewrite_next_linear(e.w1, e.b1, f);
    } else {
        auto& m = out.mlp();
        std::tie(m.w1, m.b1) = rewrite_next_linear(m.w1, m.b1, f);
    }
    return out;
}

}  // namespace coqmoe
