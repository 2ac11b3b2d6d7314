// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "coqmoe/numerics.hpp"

namespace coqmoe {

struct ModelConfig {
    std::size_t n_tokens = 8;
    std::size_t dim = 16;
    std::size_t n_heads = 2;
    std::size_t head_dim = 8;
    std::size_t n_blocks = 2;
    std::size_t mlp_ratio = 4;
    std::size_t n_experts = 4;
    std::size_t top_k = 2;
    std::vector<std::size_t> moe_blocks{1};  // sorted, unique
    std::size_t n_classes = 10;

    [[nodiscard]] std::size_t hidden() const noexcept { return mlp_ratio * dim; }

    [[nodiscard]] bool is_moe(std::size_t block) const noexcept {
        return std::binary_search(moe_blocks.begin(), moe_blocks.end(), block);
    }

    /// Odd-indexed blocks become MoE blocks.
    static std::vector<std::size_t> alternating_moe(std::size_t n_blocks) {
        std::vector<std::size_t> out;
        for (std::size_t i = 1; i < n_blocks; i += 2) out.push_back(i);
        return out;
    }

    bool operator==(const ModelConfig&) const = default;
};

/// Throws std::invalid_argument naming the first violated constraint.
inline void validate(const ModelConfig& c) {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid ModelConfig: " + m); };
    if (c.n_tokens < 1) fail("n_tokens must be >= 1");
    if (c.dim < 1) fail("dim must be >= 1");
    if (c.n_heads < 1 || c.head_dim < 1) fail("n_heads and head_dim must be >= 1");
    if (c.n_heads * c.head_dim != c.dim)
        fail("n_heads * head_dim (" + std::to_string(c.n_heads * c.head_dim) + ") != dim (" +
             std::to_string(c.dim) + ")");
    if (c.mlp_ratio < 1) fail("mlp_ratio must be >= 1");
    if (c.n_classes < 1) fail("n_classes must be >= 1");
    if (!std::is_sorted(c.moe_blocks.begin(), c.moe_blocks.end()) ||
        std::adjacent_find(c.moe_blocks.begin(), c.moe_blocks.end()) != c.moe_blocks.end())
        fail("moe_blocks must be sorted and unique");
    for (std::size_t b : c.moe_blocks)
        if (b >= c.n_blocks) fail("moe block index " + std::to_string(b) + " out of range");
    if (!c.moe_blocks.empty() && (c.top_k < 1 || c.top_k > c.n_experts))
        fail("top_k must satisfy 1 <= k <= n_experts");
}

struct MlpWeights {
    Matrix w1;  // D x H
    Vector b1;
    Matrix w2;  // H x D
    Vector b2;
};

struct MoeWeights {
    Matrix w_gate;  // D x m
    Vector b_gate;
    std::vector<MlpWeights> experts;
};

/// One transformer block. `w_qkv` columns are laid out [Q | K | V], each
/// section D wide; head i owns columns [i*Dh, (i+1)*Dh) of every section.
struct BlockWeights {
    Vector ln1_gamma, ln1_beta;
    Matrix w_qkv;  // D x 3D
    Vector b_qkv;
    Matrix w_o;  // D x D
    Vector b_o;
    Vector ln2_gamma, ln2_beta;
    std::variant<MlpWeights, MoeWeights> ffn;

    [[nodiscard]] bool is_moe() const noexcept { return std::holds_alternative<MoeWeights>(ffn); }
    MlpWeights& mlp() { return std::get<MlpWeights>(ffn); }
    const MlpWeights& mlp() const { return std::get<MlpWeights>(ffn); }
    MoeWeights& moe() { return std::get<MoeWeights>(ffn); }
    const MoeWeights& moe() const { return std::get<MoeWeights>(ffn); }
};

struct ModelWeights {
    std::vector<BlockWeights> blocks;
    Matrix head_w;  // D x n_classes, applied to the token mean
    Vector head_b;
};

namespace detail {
inline void expect_shape(const Matrix& m, std::size_t r, std::size_t c, const std::string& what) {
    if (m.rows() != r || m.cols() != c)
        throw std::invalid_argument(what + ": expected " + std::to_string(r) + "x" + std::to_string(c) +
                                    ", got " + std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
}
inline void expect_len(const Vector& v, std::size_t n, const std::string& what) {
    if (v.size() != n)
        throw std::invalid_argument(what + ": expected length " + std::to_string(n) + ", got " +
                                    std::to_string(v.size()));
}
inline void check_mlp(const MlpWeights& m, std::size_t d, std::size_t h, const std::string& p) {
    expect_shape(m.w1, d, h, p + ".w1");
    expect_len(m.b1, h, p + ".b1");
    expect_shape(m.w2, h, d, p + ".w2");
    expect_len(m.b2, d, p + ".b2");
}
}  // namespace detail

inline void check_weights(const ModelWeights& w, const ModelConfig& c) {
    validate(c);
    if (w.blocks.size() != c.n_blocks) throw std::invalid_argument("weights: block count differs from config");
    const std::size_t d = c.dim;
    for (std::size_t i = 0; i < w.blocks.size(); ++i) {
        const auto& b = w.blocks[i];
        const std::string p = "block" + std::to_string(i);
        detail::expect_len(b.ln1_gamma, d, p + ".ln1_gamma");
        detail::expect_len(b.ln1_beta, d, p + ".ln1_beta");
        detail::expect_shape(b.w_qkv, d, 3 * d, p + ".w_qkv");
        detail::expect_len(b.b_qkv, 3 * d, p + ".b_qkv");
        detail::expect_shape(b.w_o, d, d, p + ".w_o");
        detail::expect_len(b.b_o, d, p + ".b_o");
        detail::expect_len(b.ln2_gamma, d, p + ".ln2_gamma");
        detail::expect_len(b.ln2_beta, d, p + ".ln2_beta");
        if (b.is_moe() != c.is_moe(i)) throw std::invalid_argument(p + ": MoE/MLP kind differs from config");
        if (b.is_moe()) {
            const auto& m = b.moe();
            detail::expect_shape(m.w_gate, d, c.n_experts, p + ".w_gate");
            detail::expect_len(m.b_gate, c.n_experts, p + ".b_gate");
            if (m.experts.size() != c.n_experts) throw std::invalid_argument(p + ": expert count mismatch");
            for (std::size_t j = 0; j < m.experts.size(); ++j)
                detail::check_mlp(m.experts[j], d, c.hidden(), p + ".expert" + std::to_string(j));
        } else {
            detail::check_mlp(b.mlp(), d, c.hidden(), p + ".mlp");
        }
    }
    detail::expect_shape(w.head_w, d, c.n_classes, "head_w");
    detail::expect_len(w.head_b, c.n_classes, "head_b");
}

/// Routing decision for one token: k distinct experts, weights positive and summing to 1.
struct GateDecision {
    std::vector<std::size_t> experts;
    std::vector<double> weights;

    bool operator==(const GateDecision&) const = default;
};

/// Per-block gate decisions (empty vector for dense MLP blocks).
using GateTrace = std::vector<std::vector<GateDecision>>;

/// Keeps the k largest logits (ties to the lower index) and applies softmax
/// over the retained logits only.
inline GateDecision top_k_from_logits(std::span<const double> logits, std::size_t k) {
    if (k < 1 || k > logits.size()) throw std::invalid_argument("top_k: k out of range");
    std::vector<std::size_t> idx(logits.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
    idx.resize(k);
    Vector kept(k);
    for (std::size_t i = 0; i < k; ++i) kept[i] = logits[idx[i]];
    return GateDecision{std::move(idx), softmax_row(kept)};
}

inline Vector gate_logits(std::span<const double> y_row, const Matrix& w_g, std::span<const double> b_g) {
    if (y_row.size() != w_g.rows() || b_g.size() != w_g.cols())
        throw std::invalid_argument("gate: shape mismatch");
    Vector logits(b_g.begin(), b_g.end());
    for (std::size_t d = 0; d < y_row.size(); ++d)
        for (std::size_t j = 0; j < w_g.cols(); ++j) logits[j] += y_row[d] * w_g(d, j);
    return logits;
}

inline GateDecision top_k_gate(std::span<const double> y_row, const Matrix& w_g, std::span<const double> b_g,
                               std::size_t k) {
    const Vector logits = gate_logits(y_row, w_g, b_g);
    return top_k_from_logits(logits, k);
}

/// Activations of one GELU-MLP, restricted to the token rows it processed.
struct MlpTrace {
    std::vector<std::size_t> token_rows;
    Matrix fc1_out;  // pre-GELU
    Matrix hidden;   // post-GELU, fc2 input
    Matrix fc2_out;
};

/// Every activation site of one block, recorded for calibration.
struct BlockTrace {
    Matrix ln1_out;
    Matrix q, k, v;               // N x D each, head-major columns
    std::vector<Matrix> probs;    // per head, N x N
    Matrix attn;                  // concatenated heads, W^o input
    Matrix msa_out;
    Matrix ln2_out;
    std::vector<MlpTrace> mlps;   // one for a dense block, one per expert for MoE
    std::vector<GateDecision> gates;
    Matrix ffn_out;
};

inline Matrix mlp_forward(const Matrix& y, const MlpWeights& w, MlpTrace* trace = nullptr) {
    Matrix h = affine(y, w.w1, w.b1);
    if (trace) trace->fc1_out = h;
    for (double& v : h.data()) v = gelu(v);
    Matrix out = affine(h, w.w2, w.b2);
    if (trace) {
        trace->hidden = std::move(h);
        trace->fc2_out = out;
    }
    return out;
}

struct MsaParts {
    Matrix q, k, v;
    std::vector<Matrix> probs;
    Matrix attn;
    Matrix out;
};

inline MsaParts msa_parts(const Matrix& x_norm, const BlockWeights& bw, const ModelConfig& cfg) {
    const std::size_t n = x_norm.rows(), d = cfg.dim, dh = cfg.head_dim;
    if (x_norm.cols() != d) throw std::invalid_argument("msa_forward: input width != dim");
    if (bw.w_qkv.rows() != d || bw.w_qkv.cols() != 3 * d)
        throw std::invalid_argument("msa_forward: w_qkv shape mismatch");
    const Matrix qkv = affine(x_norm, bw.w_qkv, bw.b_qkv);
    MsaParts p;
    p.q = column_slice(qkv, 0, d);
    p.k = column_slice(qkv, d, d);
    p.v = column_slice(qkv, 2 * d, d);
    p.attn = Matrix(n, d);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const std::size_t off = h * dh;
        Matrix probs(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            Vector s(n);
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dh; ++c) acc += p.q(i, off + c) * p.k(j, off + c);
                s[j] = acc * inv_sqrt;
            }
            const Vector pr = softmax_row(s);
            std::copy(pr.begin(), pr.end(), probs.row(i).begin());
            for (std::size_t c = 0; c < dh; ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < n; ++j) acc += pr[j] * p.v(j, off + c);
                p.attn(i, off + c) = acc;
            }
        }
        p.probs.push_back(std::move(probs));
    }
    p.out = affine(p.attn, bw.w_o, bw.b_o);
    return p;
}

inline Matrix msa_forward(const Matrix& x_norm, const BlockWeights& bw, const ModelConfig& cfg) {
    return msa_parts(x_norm, bw, cfg).out;
}

struct MoeOutput {
    Matrix out;
    std::vector<GateDecision> gates;
};

/// Routes each token to its top-k experts and returns the gate-weighted sum.
/// When `traces` is given it receives one MlpTrace per expert (routed rows only).
inline MoeOutput moe_forward(const Matrix& y, const MoeWeights& w, std::size_t k,
                             std::vector<MlpTrace>* traces = nullptr) {
    const std::size_t n = y.rows(), m = w.experts.size();
    if (m == 0) throw std::invalid_argument("moe_forward: no experts");
    MoeOutput res;
    res.gates.reserve(n);
    for (std::size_t t = 0; t < n; ++t) res.gates.push_back(top_k_gate(y.row(t), w.w_gate, w.b_gate, k));

    const std::size_t d_out = w.experts.front().w2.cols();
    res.out = Matrix(n, d_out);
    if (traces) traces->assign(m, MlpTrace{});
    for (std::size_t j = 0; j < m; ++j) {
        std::vector<std::size_t> rows;
        std::vector<double> weight;
        for (std::size_t t = 0; t < n; ++t) {
            const auto& g = res.gates[t];
            for (std::size_t s = 0; s < g.experts.size(); ++s)
                if (g.experts[s] == j) {
                    rows.push_back(t);
                    weight.push_back(g.weights[s]);
                }
        }
        if (rows.empty()) {
            if (traces) (*traces)[j].token_rows = {};
            continue;
        }
        Matrix sub(rows.size(), y.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) std::copy(y.row(rows[r]).begin(), y.row(rows[r]).end(), sub.row(r).begin());
        MlpTrace* tr = traces ? &(*traces)[j] : nullptr;
        const Matrix e = mlp_forward(sub, w.experts[j], tr);
        if (tr) tr->token_rows = rows;
        for (std::size_t r = 0; r < rows.size(); ++r)
            for (std::size_t c = 0; c < d_out; ++c) res.out(rows[r], c) += weight[r] * e(r, c);
    }
    return res;
}

inline Vector classify_head(const Matrix& x, const Matrix& head_w, std::span<const double> head_b) {
    Vector pooled(x.cols(), 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) pooled[c] += x(r, c);
    for (double& v : pooled) v /= static_cast<double>(x.rows());
    Vector logits(head_b.begin(), head_b.end());
    for (std::size_t c = 0; c < pooled.size(); ++c)
        for (std::size_t j = 0; j < logits.size(); ++j) logits[j] += pooled[c] * head_w(c, j);
    return logits;
}

struct ForwardResult {
    Vector logits;
    GateTrace gates;                 // per block
    std::vector<BlockTrace> blocks;  // empty unless tracing was requested
};

/// Pre-norm residual stack: x += MSA(LN1(x)); x += FFN(LN2(x)); then mean-pool + linear head.
inline ForwardResult forward(const Matrix& x0, const ModelWeights& w, const ModelConfig& cfg,
                             bool record_trace = false) {
    validate(cfg);
    if (x0.rows() != cfg.n_tokens || x0.cols() != cfg.dim)
        throw std::invalid_argument("forward: input must be n_tokens x dim");
    if (w.blocks.size() != cfg.n_blocks) throw std::invalid_argument("forward: block count mismatch");
    Matrix x = x0;
    ForwardResult res;
    res.gates.resize(cfg.n_blocks);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        const auto& bw = w.blocks[i];
        BlockTrace bt;
        Matrix xn = layernorm(x, bw.ln1_gamma, bw.ln1_beta);
        MsaParts msa = msa_parts(xn, bw, cfg);
        for (std::size_t e = 0; e < x.size(); ++e) x.data()[e] += msa.out.data()[e];

        Matrix yn = layernorm(x, bw.ln2_gamma, bw.ln2_beta);
        Matrix ffn;
        if (bw.is_moe()) {
            MoeOutput mo = moe_forward(yn, bw.moe(), cfg.top_k, record_trace ? &bt.mlps : nullptr);
            ffn = std::move(mo.out);
            res.gates[i] = mo.gates;
            if (record_trace) bt.gates = std::move(mo.gates);
        } else {
            MlpTrace mt;
            ffn = mlp_forward(yn, bw.mlp(), record_trace ? &mt : nullptr);
            if (record_trace) {
                mt.token_rows.resize(yn.rows());
                std::iota(mt.token_rows.begin(), mt.token_rows.end(), std::size_t{0});
                bt.mlps.push_back(std::move(mt));
            }
        }
        for (std::size_t e = 0; e < x.size(); ++e) x.data()[e] += ffn.data()[e];

        if (record_trace) {
            bt.ln1_out = std::move(xn);
            bt.q = std::move(msa.q);
            bt.k = std::move(msa.k);
            bt.v = std::move(msa.v);
            bt.probs = std::move(msa.probs);
            bt.attn = std::move(msa.attn);
            bt.msa_out = std::move(msa.out);
            bt.ln2_out = std::move(yn);
            bt.ffn_out = std::move(ffn);
            res.blocks.push_back(std::move(bt));
        }
    }
    res.logits = classify_head(x, w.head_w, w.head_b);
    return res;
}

inline std::size_t argmax(std::span<const double> v) {
    if (v.empty()) throw std::invalid_argument("argmax: empty");
    return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace coqmoe
