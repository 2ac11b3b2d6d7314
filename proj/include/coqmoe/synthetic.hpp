// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "coqmoe/model.hpp"

namespace coqmoe {

struct SyntheticOptions {
    /// Stddev of log(gamma); 0 gives gamma == 1. Large values reproduce the strong
    /// inter-channel variance of real post-LayerNorm activations.
    double gamma_log_sigma = 0.25;
    double beta_stddev = 0.5;
    double bias_stddev = 0.02;
};

inline constexpr double kHighGammaSigma = 1.5;

namespace detail {
inline Matrix fan_in_normal(std::size_t rows, std::size_t cols, Rng rng) {
    return random_normal(rows, cols, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
}
inline Vector normal_vector(std::size_t n, Rng rng, double stddev) {
    Vector v(n);
    for (double& x : v) x = rng.normal(0.0, stddev);
    return v;
}
inline Vector lognormal_vector(std::size_t n, Rng rng, double sigma) {
    Vector v(n);
    for (double& x : v) x = std::exp(sigma * rng.normal());
    return v;
}
inline MlpWeights synthetic_mlp(std::size_t d, std::size_t h, const Rng& r, const SyntheticOptions& o) {
    return MlpWeights{fan_in_normal(d, h, r.fork(1)), normal_vector(h, r.fork(2), o.bias_stddev),
                      fan_in_normal(h, d, r.fork(3)), normal_vector(d, r.fork(4), o.bias_stddev)};
}
}  // namespace detail

/// Gaussian weights scaled by 1/sqrt(fan_in), log-normal LayerNorm gammas.
/// Every tensor draws from its own forked stream, so adding a block does not
/// perturb the others.
inline ModelWeights make_synthetic_weights(const ModelConfig& cfg, std::uint64_t seed,
                                           const SyntheticOptions& opt = {}) {
    validate(cfg);
    const Rng root(seed);
    const std::size_t d = cfg.dim;
    ModelWeights w;
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        const Rng br = root.fork(1000 + i);
        BlockWeights b;
        b.ln1_gamma = detail::lognormal_vector(d, br.fork(1), opt.gamma_log_sigma);
        b.ln1_beta = detail::normal_vector(d, br.fork(2), opt.beta_stddev);
        b.w_qkv = detail::fan_in_normal(d, 3 * d, br.fork(3));
        b.b_qkv = detail::normal_vector(3 * d, br.fork(4), opt.bias_stddev);
        b.w_o = detail::fan_in_normal(d, d, br.fork(5));
        b.b_o = detail::normal_vector(d, br.fork(6), opt.bias_stddev);
        b.ln2_gamma = detail::lognormal_vector(d, br.fork(7), opt.gamma_log_sigma);
        b.ln2_beta = detail::normal_vector(d, br.fork(8), opt.beta_stddev);
        if (cfg.is_moe(i)) {
            MoeWeights m;
            m.w_gate = detail::fan_in_normal(d, cfg.n_experts, br.fork(9));
            m.b_gate = detail::normal_vector(cfg.n_experts, br.fork(10), opt.bias_stddev);
            for (std::size_t j = 0; j < cfg.n_experts; ++j)
                m.experts.push_back(detail::synthetic_mlp(d, cfg.hidden(), br.fork(100 + j), opt));
            b.ffn = std::move(m);
        } else {
            b.ffn = detail::synthetic_mlp(d, cfg.hidden(), br.fork(11), opt);
        }
        w.blocks.push_back(std::move(b));
    }
    w.head_w = detail::fan_in_normal(d, cfg.n_classes, root.fork(7));
    w.head_b = detail::normal_vector(cfg.n_classes, root.fork(8), opt.bias_stddev);
    return w;
}

/// Pre-embedded token matrices with standard-normal entries.
inline std::vector<Matrix> make_synthetic_inputs(const ModelConfig& cfg, std::size_t count, std::uint64_t seed) {
    const Rng root(seed);
    std::vector<Matrix> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng r = root.fork(i);
        out.push_back(random_normal(cfg.n_tokens, cfg.dim, r));
    }
    return out;
}

/// A model with every parameter zero (shapes from `cfg`).
inline ModelWeights make_zero_weights(const ModelConfig& cfg) {
    validate(cfg);
    const std::size_t d = cfg.dim, h = cfg.hidden();
    auto zmlp = [&] { return MlpWeights{Matrix(d, h), Vector(h), Matrix(h, d), Vector(d)}; };
    ModelWeights w;
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        BlockWeights b{Vector(d), Vector(d), Matrix(d, 3 * d), Vector(3 * d), Matrix(d, d), Vector(d),
                       Vector(d), Vector(d), MlpWeights{}};
        if (cfg.is_moe(i)) {
            MoeWeights m{Matrix(d, cfg.n_experts), Vector(cfg.n_experts), {}};
            for (std::size_t j = 0; j < cfg.n_experts; ++j) m.experts.push_back(zmlp());
            b.ffn = std::move(m);
        } else {
            b.ffn = zmlp();
        }
        w.blocks.push_back(std::move(b));
    }
    w.head_w = Matrix(d, cfg.n_classes);
    w.head_b = Vector(cfg.n_classes);
    return w;
}

}  // namespace coqmoe
