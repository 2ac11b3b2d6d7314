// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "coqmoe/logquant.hpp"
#include "coqmoe/model.hpp"
#include "coqmoe/quant.hpp"
#include "coqmoe/reparam.hpp"

namespace coqmoe {

struct QuantOptions {
    int weight_bits = 8;
    int act_bits = 8;
    int attn_bits = kDefaultAttnBits;
    bool reparam = true;
    ScaleMean scale_mean = ScaleMean::arithmetic;
    bool per_channel_weights = true;

    bool operator==(const QuantOptions&) const = default;
};

/// A linear layer with quantized weights and an integer bias at the
/// accumulator scale of its (fixed, calibrated) input quantizer.
struct QLinear {
    QuantParams input;
    QTensor weight;
    std::vector<std::int64_t> bias_q;
    Vector acc_scale;  // s_in * s_w[c]

    [[nodiscard]] AccMatrix apply(const QTensor& x) const {
        if (x.params.scales != input.scales || x.params.bits != input.bits)
            throw std::invalid_argument("QLinear: input quantizer differs from the calibrated one");
        IntMatmul r = int_matmul(x, weight);
        add_bias(r.acc, bias_q);
        return std::move(r.acc);
    }
};

inline QLinear make_qlinear(const Matrix& w, std::span<const double> b, const QuantParams& input,
                            const QuantOptions& opt) {
    QLinear l;
    l.input = input;
    const QuantParams wp = calibrate(w, opt.weight_bits, true,
                                     opt.per_channel_weights ? Granularity::per_channel : Granularity::per_layer);
    l.weight = quantize(w, wp);
    l.acc_scale.resize(w.cols());
    for (std::size_t c = 0; c < w.cols(); ++c) l.acc_scale[c] = input.scale(0) * wp.scale(c);
    l.bias_q = quantize_bias(b, l.acc_scale, accumulator_bits(input.bits, opt.weight_bits));
    return l;
}

struct QMlp {
    QLinear fc1;
    QuantParams fc1_out;
    QuantParams fc2_in;
    QLinear fc2;
    QuantParams fc2_out;
};

/// The gate stays in double precision (rewritten weights), fed by the
/// dequantized post-LayerNorm codes.
struct QMoe {
    Matrix w_gate;
    Vector b_gate;
    std::vector<QMlp> experts;
};

struct QBlock {
    Vector ln1_gamma, ln1_beta;
    QuantParams ln1_act;
    std::optional<ReparamFactors> ln1_factors;
    QLinear qkv;
    QuantParams q_act, k_act, v_act;
    QuantParams attn_act;
    QLinear o;
    QuantParams o_out;
    Vector ln2_gamma, ln2_beta;
    QuantParams ln2_act;
    std::optional<ReparamFactors> ln2_factors;
    std::variant<QMlp, QMoe> ffn;

    [[nodiscard]] bool is_moe() const noexcept { return std::holds_alternative<QMoe>(ffn); }
};

struct QuantizedModel {
    ModelConfig config;
    QuantOptions options;
    std::vector<QBlock> blocks;
    Matrix head_w;
    Vector head_b;
};

/// Factors recorded for one block (absent when reparameterization is off).
struct BlockFactors {
    std::optional<ReparamFactors> ln1, ln2;
};

struct ReparamModel {
    ModelWeights weights;  // float weights with every post-LN consumer rewritten
    std::vector<BlockFactors> factors;
    std::vector<ForwardResult> calib_traces;  // float traces of the original model
};

namespace detail {
inline std::vector<Matrix> non_empty(std::vector<Matrix> v) {
    std::erase_if(v, [](const Matrix& m) { return m.rows() == 0; });
    return v;
}

inline QuantParams calibrate_sym(const std::vector<Matrix>& samples, int bits) {
    const auto s = non_empty(samples);
    if (s.empty()) throw std::invalid_argument("calibration site received no activations");
    return calibrate(std::span<const Matrix>(s), bits, true, Granularity::per_layer);
}

inline void check_calibration(std::span<const Matrix> calib, const ModelConfig& cfg) {
    if (calib.empty()) throw std::invalid_argument("build_quantized: empty calibration set");
    for (const auto& m : calib)
        if (m.rows() != cfg.n_tokens || m.cols() != cfg.dim)
            throw std::invalid_argument("build_quantized: calibration inputs must be n_tokens x dim");
}

inline Matrix gather_rows(const Matrix& m, std::span<const std::size_t> rows) {
    Matrix out(rows.size(), m.cols());
    for (std::size_t r = 0; r < rows.size(); ++r) std::copy(m.row(rows[r]).begin(), m.row(rows[r]).end(), out.row(r).begin());
    return out;
}

inline QTensor gather_rows(const QTensor& q, std::span<const std::size_t> rows) {
    QTensor out{IntMatrix(rows.size(), q.codes.cols()), q.params};
    for (std::size_t r = 0; r < rows.size(); ++r)
        std::copy(q.codes.row(rows[r]).begin(), q.codes.row(rows[r]).end(), out.codes.row(r).begin());
    return out;
}

inline QTensor columns(const QTensor& q, std::size_t first, std::size_t count) {
    return QTensor{column_slice(q.codes, first, count), q.params};
}
}  // namespace detail

/// Traces the float model on the calibration set, calibrates every post-LayerNorm
/// site per channel (asymmetric) and folds the resulting factors into the
/// LayerNorm and its consumers.
inline ReparamModel reparameterize_model(const ModelWeights& w, const ModelConfig& cfg, std::span<const Matrix> calib,
                                         const QuantOptions& opt) {
    check_weights(w, cfg);
    detail::check_calibration(calib, cfg);
    ReparamModel rm;
    rm.weights = w;
    rm.factors.resize(cfg.n_blocks);
    for (const auto& x : calib) rm.calib_traces.push_back(forward(x, w, cfg, true));
    if (!opt.reparam) return rm;
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        std::vector<Matrix> ln1, ln2;
        for (const auto& t : rm.calib_traces) {
            ln1.push_back(t.blocks[i].ln1_out);
            ln2.push_back(t.blocks[i].ln2_out);
        }
        const auto p1 = calibrate(std::span<const Matrix>(ln1), opt.act_bits, false, Granularity::per_channel);
        const auto p2 = calibrate(std::span<const Matrix>(ln2), opt.act_bits, false, Granularity::per_channel);
        auto f1 = compute_factors(p1, opt.scale_mean);
        auto f2 = compute_factors(p2, opt.scale_mean);
        rm.weights.blocks[i] = rewrite_block(rewrite_block(rm.weights.blocks[i], LnSite::ln1, f1), LnSite::ln2, f2);
        rm.factors[i] = BlockFactors{std::move(f1), std::move(f2)};
    }
    return rm;
}

/// Builds the W/A/Attn quantized model: post-LN sites use the reparameterized
/// per-layer symmetric quantizer (or plain per-layer symmetric min-max when
/// reparameterization is off), every other activation site per-layer symmetric,
/// weights symmetric per output channel, attention maps the log-sqrt(2) quantizer.
inline QuantizedModel build_quantized(const ModelWeights& w, const ModelConfig& cfg, std::span<const Matrix> calib,
                                      const QuantOptions& opt = {}) {
    for (int b : {opt.weight_bits, opt.act_bits})
        if (b < 2 || b > 16) throw std::invalid_argument("build_quantized: bit widths must be in [2, 16]");
    if (opt.attn_bits < 1 || opt.attn_bits > 16) throw std::invalid_argument("build_quantized: attention bits in [1, 16]");
    ReparamModel rm = reparameterize_model(w, cfg, calib, opt);

    std::vector<ForwardResult> traces;
    if (opt.reparam) {
        for (const auto& x : calib) traces.push_back(forward(x, rm.weights, cfg, true));
    } else {
        traces = std::move(rm.calib_traces);
    }

    const int ab = opt.act_bits;
    QuantizedModel qm;
    qm.config = cfg;
    qm.options = opt;
    qm.head_w = w.head_w;
    qm.head_b = w.head_b;
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        const BlockWeights& bw = rm.weights.blocks[i];
        auto site = [&](auto get) {
            std::vector<Matrix> v;
            for (const auto& t : traces) v.push_back(get(t.blocks[i]));
            return v;
        };
        QBlock qb;
        qb.ln1_gamma = bw.ln1_gamma;
        qb.ln1_beta = bw.ln1_beta;
        qb.ln2_gamma = bw.ln2_gamma;
        qb.ln2_beta = bw.ln2_beta;
        qb.ln1_factors = rm.factors[i].ln1;
        qb.ln2_factors = rm.factors[i].ln2;
        qb.ln1_act = qb.ln1_factors ? qb.ln1_factors->unified_params()
                                    : detail::calibrate_sym(site([](const BlockTrace& b) { return b.ln1_out; }), ab);
        qb.ln2_act = qb.ln2_factors ? qb.ln2_factors->unified_params()
                                    : detail::calibrate_sym(site([](const BlockTrace& b) { return b.ln2_out; }), ab);

        qb.qkv = make_qlinear(bw.w_qkv, bw.b_qkv, qb.ln1_act, opt);
        qb.q_act = detail::calibrate_sym(site([](const BlockTrace& b) { return b.q; }), ab);
        qb.k_act = detail::calibrate_sym(site([](const BlockTrace& b) { return b.k; }), ab);
        qb.v_act = detail::calibrate_sym(site([](const BlockTrace& b) { return b.v; }), ab);
        qb.attn_act = detail::calibrate_sym(site([](const BlockTrace& b) { return b.attn; }), ab);
        qb.o = make_qlinear(bw.w_o, bw.b_o, qb.attn_act, opt);
        qb.o_out = detail::calibrate_sym(site([](const BlockTrace& b) { return b.msa_out; }), ab);

        auto make_qmlp = [&](const MlpWeights& m, const std::vector<Matrix>& fc1_out, const std::vector<Matrix>& hidden,
                             const std::vector<Matrix>& fc2_out) {
            QMlp q;
            q.fc1 = make_qlinear(m.w1, m.b1, qb.ln2_act, opt);
            q.fc1_out = detail::calibrate_sym(fc1_out, ab);
            q.fc2_in = detail::calibrate_sym(hidden, ab);
            q.fc2 = make_qlinear(m.w2, m.b2, q.fc2_in, opt);
            q.fc2_out = detail::calibrate_sym(fc2_out, ab);
            return q;
        };

        if (bw.is_moe()) {
            const MoeWeights& mw = bw.moe();
            QMoe qmoe{mw.w_gate, mw.b_gate, {}};
            for (std::size_t j = 0; j < mw.experts.size(); ++j) {
                std::vector<Matrix> f1, h, f2;
                for (const auto& t : traces) {
                    const MlpTrace& mt = t.blocks[i].mlps[j];
                    if (mt.token_rows.empty()) continue;
                    f1.push_back(mt.fc1_out);
                    h.push_back(mt.hidden);
                    f2.push_back(mt.fc2_out);
                }
                if (f1.empty()) {
                    // Expert never selected during calibration: calibrate it on every token.
                    for (const auto& t : traces) {
                        MlpTrace mt;
                        mlp_forward(t.blocks[i].ln2_out, mw.experts[j], &mt);
                        f1.push_back(mt.fc1_out);
                        h.push_back(mt.hidden);
                        f2.push_back(mt.fc2_out);
                    }
                }
                qmoe.experts.push_back(make_qmlp(mw.experts[j], f1, h, f2));
            }
            qb.ffn = std::move(qmoe);
        } else {
            qb.ffn = make_qmlp(bw.mlp(), site([](const BlockTrace& b) { return b.mlps.front().fc1_out; }),
                               site([](const BlockTrace& b) { return b.mlps.front().hidden; }),
                               site([](const BlockTrace& b) { return b.mlps.front().fc2_out; }));
        }
        qm.blocks.push_back(std::move(qb));
    }
    return qm;
}

/// Dequantized activation of one site, mapped back to the original (un-rewritten)
/// domain so it is comparable with the float model.
struct SiteActivations {
    Matrix ln1, q, k, v, attn, msa_out, ln2, ffn_out;
};

inline const std::vector<std::string>& site_names() {
    static const std::vector<std::string> names{"ln1", "q", "k", "v", "attn", "msa_out", "ln2", "ffn_out"};
    return names;
}

struct QuantForward {
    Vector logits;
    GateTrace gates;
    std::vector<SiteActivations> sites;
    std::map<std::string, double> site_mse;  // "b<i>.<site>" -> MSE vs float; filled when a reference is given
};

namespace detail {
inline Matrix mlp_quantized(const QTensor& x, const QMlp& m) {
    const AccMatrix a1 = m.fc1.apply(x);
    Matrix h = dequantize(requantize(a1, m.fc1.acc_scale, m.fc1_out));
    for (double& v : h.data()) v = gelu(v);
    const AccMatrix a2 = m.fc2.apply(quantize(h, m.fc2_in));
    return dequantize(requantize(a2, m.fc2.acc_scale, m.fc2_out));
}

inline Matrix ln_site_original(const QTensor& xq, const std::optional<ReparamFactors>& f) {
    Matrix x = dequantize(xq);
    return f ? undo_reparam(x, *f) : x;
}
}  // namespace detail

/// Integer-arithmetic forward pass. LayerNorm, softmax exponentials, GELU, the
/// gate and the residual stream run in double; every linear layer is an
/// integer matmul with an integer bias followed by requantization; the
/// attention-value product goes through the shift-only fused softmax.
/// With `reference` the float model is traced alongside and per-site MSE filled in.
inline QuantForward forward_quantized(const QuantizedModel& qm, const Matrix& x0,
                                      const ModelWeights* reference = nullptr) {
    const ModelConfig& cfg = qm.config;
    if (x0.rows() != cfg.n_tokens || x0.cols() != cfg.dim)
        throw std::invalid_argument("forward_quantized: input must be n_tokens x dim");
    const std::size_t n = cfg.n_tokens, d = cfg.dim, dh = cfg.head_dim;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix x = x0;
    QuantForward res;
    res.gates.resize(cfg.n_blocks);
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        const QBlock& b = qm.blocks[i];
        SiteActivations sa;

        const QTensor x1 = quantize(layernorm(x, b.ln1_gamma, b.ln1_beta), b.ln1_act);
        sa.ln1 = detail::ln_site_original(x1, b.ln1_factors);
        const AccMatrix qkv = b.qkv.apply(x1);
        const QTensor q = requantize(column_slice(qkv, 0, d), std::span(b.qkv.acc_scale).subspan(0, d), b.q_act);
        const QTensor k = requantize(column_slice(qkv, d, d), std::span(b.qkv.acc_scale).subspan(d, d), b.k_act);
        const QTensor v = requantize(column_slice(qkv, 2 * d, d), std::span(b.qkv.acc_scale).subspan(2 * d, d), b.v_act);
        sa.q = dequantize(q);
        sa.k = dequantize(k);
        sa.v = dequantize(v);

        Matrix attn(n, d);
        const double score_scale = b.q_act.scale(0) * b.k_act.scale(0) * inv_sqrt;
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            const QTensor qh = detail::columns(q, h * dh, dh);
            QTensor kt{IntMatrix(dh, n), k.params};
            for (std::size_t t = 0; t < n; ++t)
                for (std::size_t c = 0; c < dh; ++c) kt.codes(c, t) = k.codes(t, h * dh + c);
            const QTensor vh = detail::columns(v, h * dh, dh);
            const IntMatmul s = int_matmul(qh, kt);
            Vector row(n);
            for (std::size_t t = 0; t < n; ++t) {
                for (std::size_t j = 0; j < n; ++j) row[j] = static_cast<double>(s.acc(t, j)) * score_scale;
                const FusedSoftmaxResult fr = fused_softmax_av(row, vh, qm.options.attn_bits);
                for (std::size_t c = 0; c < dh; ++c) attn(t, h * dh + c) = fr.out[c];
            }
        }
        const QTensor aq = quantize(attn, b.attn_act);
        sa.attn = dequantize(aq);
        sa.msa_out = dequantize(requantize(b.o.apply(aq), b.o.acc_scale, b.o_out));
        for (std::size_t e = 0; e < x.size(); ++e) x.data()[e] += sa.msa_out.data()[e];

        const QTensor x2 = quantize(layernorm(x, b.ln2_gamma, b.ln2_beta), b.ln2_act);
        sa.ln2 = detail::ln_site_original(x2, b.ln2_factors);
        Matrix ffn(n, d);
        if (b.is_moe()) {
            const QMoe& m = std::get<QMoe>(b.ffn);
            const Matrix gate_in = dequantize(x2);
            std::vector<GateDecision> gates;
            for (std::size_t t = 0; t < n; ++t)
                gates.push_back(top_k_gate(gate_in.row(t), m.w_gate, m.b_gate, cfg.top_k));
            for (std::size_t j = 0; j < m.experts.size(); ++j) {
                std::vector<std::size_t> rows;
                Vector wts;
                for (std::size_t t = 0; t < n; ++t)
                    for (std::size_t s = 0; s < gates[t].experts.size(); ++s)
                        if (gates[t].experts[s] == j) {
                            rows.push_back(t);
                            wts.push_back(gates[t].weights[s]);
                        }
                if (rows.empty()) continue;
                const Matrix e = detail::mlp_quantized(detail::gather_rows(x2, rows), m.experts[j]);
                for (std::size_t r = 0; r < rows.size(); ++r)
                    for (std::size_t c = 0; c < d; ++c) ffn(rows[r], c) += wts[r] * e(r, c);
            }
            res.gates[i] = std::move(gates);
        } else {
            ffn = detail::mlp_quantized(x2, std::get<QMlp>(b.ffn));
        }
        for (std::size_t e = 0; e < x.size(); ++e) x.data()[e] += ffn.data()[e];
        sa.ffn_out = std::move(ffn);
        res.sites.push_back(std::move(sa));
    }
    res.logits = classify_head(x, qm.head_w, qm.head_b);

    if (reference) {
        const ForwardResult fr = forward(x0, *reference, cfg, true);
        for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
            const auto& s = res.sites[i];
            const auto& t = fr.blocks[i];
            const std::string p = "b" + std::to_string(i) + ".";
            res.site_mse[p + "ln1"] = mean_squared_error(s.ln1, t.ln1_out);
            res.site_mse[p + "q"] = mean_squared_error(s.q, t.q);
            res.site_mse[p + "k"] = mean_squared_error(s.k, t.k);
            res.site_mse[p + "v"] = mean_squared_error(s.v, t.v);
            res.site_mse[p + "attn"] = mean_squared_error(s.attn, t.attn);
            res.site_mse[p + "msa_out"] = mean_squared_error(s.msa_out, t.msa_out);
            res.site_mse[p + "ln2"] = mean_squared_error(s.ln2, t.ln2_out);
            res.site_mse[p + "ffn_out"] = mean_squared_error(s.ffn_out, t.ffn_out);
        }
    }
    return res;
}

/// Paired evaluation of two predictors over the same inputs.
struct AgreementReport {
    std::size_t n_inputs = 0;
    double top1_agreement = 0.0;
    double logit_rmse = 0.0;
    double routing_agreement = 1.0;  // fraction of (input, MoE block, token) with identical expert sets
    std::size_t routed_tokens = 0;
    std::map<std::string, double> per_site_mse;  // mean over inputs
};

inline bool same_expert_set(const GateDecision& a, const GateDecision& b) {
    return std::set<std::size_t>(a.experts.begin(), a.experts.end()) ==
           std::set<std::size_t>(b.experts.begin(), b.experts.end());
}

/// Top-1 agreement and logit RMSE between two lists of logit vectors.
inline AgreementReport compare_predictions(std::span<const Vector> a, std::span<const Vector> b) {
    if (a.size() != b.size()) throw std::invalid_argument("compare_predictions: different input counts");
    AgreementReport r;
    r.n_inputs = a.size();
    if (a.empty()) return r;
    std::size_t agree = 0, count = 0;
    double sq = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() != b[i].size()) throw std::invalid_argument("compare_predictions: logit width differs");
        agree += argmax(a[i]) == argmax(b[i]) ? 1 : 0;
        for (std::size_t j = 0; j < a[i].size(); ++j) {
            const double dlt = a[i][j] - b[i][j];
            sq += dlt * dlt;
        }
        count += a[i].size();
    }
    r.top1_agreement = static_cast<double>(agree) / static_cast<double>(a.size());
    r.logit_rmse = std::sqrt(sq / static_cast<double>(count));
    return r;
}

/// Runs the float model and the quantized model on the same inputs.
inline AgreementReport compare_models(const ModelWeights& float_w, const QuantizedModel& qm,
                                      std::span<const Matrix> inputs) {
    check_weights(float_w, qm.config);
    std::vector<Vector> fl, ql;
    std::map<std::string, double> mse_sum;
    std::size_t routed = 0, same = 0;
    for (const auto& x : inputs) {
        const ForwardResult f = forward(x, float_w, qm.config);
        const QuantForward q = forward_quantized(qm, x, &float_w);
        fl.push_back(f.logits);
        ql.push_back(q.logits);
        for (const auto& [k, v] : q.site_mse) mse_sum[k] += v;
        for (std::size_t i = 0; i < f.gates.size(); ++i)
            for (std::size_t t = 0; t < f.gates[i].size(); ++t) {
                ++routed;
                same += same_expert_set(f.gates[i][t], q.gates[i][t]) ? 1 : 0;
            }
    }
    AgreementReport r = compare_predictions(fl, ql);
    for (auto& [k, v] : mse_sum) r.per_site_mse[k] = v / static_cast<double>(inputs.size());
    r.routed_tokens = routed;
    r.routing_agreement = routed ? static_cast<double>(same) / static_cast<double>(routed) : 1.0;
    return r;
}

}  // namespace coqmoe
