// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "coqmoe/accelsim.hpp"
#include "coqmoe/archive.hpp"
#include "coqmoe/model.hpp"
#include "coqmoe/qinfer.hpp"

namespace coqmoe {

inline constexpr const char* kFloatModelKind = "float-model";
inline constexpr const char* kQuantModelKind = "quantized-model";
inline constexpr const char* kInputsKind = "inputs";

// ---------------------------------------------------------------------------
// JSON conversions
// ---------------------------------------------------------------------------

inline json to_json(const ModelConfig& c) {
    return {{"n_tokens", c.n_tokens}, {"dim", c.dim},           {"n_heads", c.n_heads},
            {"head_dim", c.head_dim}, {"n_blocks", c.n_blocks}, {"mlp_ratio", c.mlp_ratio},
            {"n_experts", c.n_experts}, {"top_k", c.top_k},     {"moe_blocks", c.moe_blocks},
            {"n_classes", c.n_classes}};
}

inline ModelConfig config_from_json(const json& j) {
    try {
        ModelConfig c;
        c.n_tokens = j.at("n_tokens").get<std::size_t>();
        c.dim = j.at("dim").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.head_dim = j.at("head_dim").get<std::size_t>();
        c.n_blocks = j.at("n_blocks").get<std::size_t>();
        c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
        c.n_experts = j.at("n_experts").get<std::size_t>();
        c.top_k = j.at("top_k").get<std::size_t>();
        c.moe_blocks = j.at("moe_blocks").get<std::vector<std::size_t>>();
        c.n_classes = j.at("n_classes").get<std::size_t>();
        validate(c);
        return c;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad model config: ") + e.what());
    }
}

inline json to_json(const QuantParams& p) {
    json j{{"bits", p.bits},
           {"symmetric", p.symmetric},
           {"granularity", p.granularity == Granularity::per_layer ? "per_layer" : "per_channel"},
           {"axis", p.axis == ChannelAxis::col ? "col" : "row"},
           {"scales", p.scales}};
    if (!p.symmetric) j["zero_points"] = p.zero_points;
    return j;
}

inline QuantParams quant_params_from_json(const json& j) {
    QuantParams p;
    p.bits = j.at("bits").get<int>();
    p.symmetric = j.at("symmetric").get<bool>();
    p.granularity = j.at("granularity").get<std::string>() == "per_layer" ? Granularity::per_layer
                                                                          : Granularity::per_channel;
    p.axis = j.at("axis").get<std::string>() == "col" ? ChannelAxis::col : ChannelAxis::row;
    p.scales = j.at("scales").get<Vector>();
    if (!p.symmetric) p.zero_points = j.at("zero_points").get<std::vector<std::int32_t>>();
    validate(p);
    return p;
}

inline json to_json(const ReparamFactors& f) {
    return {{"s_tilde", f.s_tilde}, {"r1", f.r1}, {"r2", f.r2}, {"source", to_json(f.source)}};
}

inline ReparamFactors factors_from_json(const json& j) {
    ReparamFactors f;
    f.s_tilde = j.at("s_tilde").get<double>();
    f.r1 = j.at("r1").get<Vector>();
    f.r2 = j.at("r2").get<std::vector<std::int32_t>>();
    f.source = quant_params_from_json(j.at("source"));
    return f;
}

inline json to_json(const QuantOptions& o) {
    return {{"weight_bits", o.weight_bits},
            {"act_bits", o.act_bits},
            {"attn_bits", o.attn_bits},
            {"reparam", o.reparam},
            {"scale_mean", o.scale_mean == ScaleMean::arithmetic ? "arithmetic" : "geometric"},
            {"per_channel_weights", o.per_channel_weights}};
}

inline QuantOptions quant_options_from_json(const json& j) {
    QuantOptions o;
    o.weight_bits = j.at("weight_bits").get<int>();
    o.act_bits = j.at("act_bits").get<int>();
    o.attn_bits = j.at("attn_bits").get<int>();
    o.reparam = j.at("reparam").get<bool>();
    o.scale_mean = j.at("scale_mean").get<std::string>() == "arithmetic" ? ScaleMean::arithmetic : ScaleMean::geometric;
    o.per_channel_weights = j.at("per_channel_weights").get<bool>();
    return o;
}

inline json to_json(const GateDecision& g) { return {{"experts", g.experts}, {"weights", g.weights}}; }

inline json gate_trace_to_json(const GateTrace& t) {
    json blocks = json::array();
    for (const auto& b : t) {
        json toks = json::array();
        for (const auto& g : b) toks.push_back(to_json(g));
        blocks.push_back(std::move(toks));
    }
    return {{"schema", "coqmoe-gate-trace/1"}, {"blocks", std::move(blocks)}};
}

inline GateTrace gate_trace_from_json(const json& j) {
    try {
        if (j.at("schema") != "coqmoe-gate-trace/1") throw FormatError("unknown gate trace schema");
        GateTrace t;
        for (const auto& b : j.at("blocks")) {
            std::vector<GateDecision> toks;
            for (const auto& g : b)
                toks.push_back({g.at("experts").get<std::vector<std::size_t>>(), g.at("weights").get<Vector>()});
            t.push_back(std::move(toks));
        }
        return t;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad gate trace: ") + e.what());
    }
}

inline json to_json(const AgreementReport& r) {
    return {{"n_inputs", r.n_inputs},
            {"top1_agreement", r.top1_agreement},
            {"logit_rmse", r.logit_rmse},
            {"routing_agreement", r.routing_agreement},
            {"routed_tokens", r.routed_tokens},
            {"per_site_mse", r.per_site_mse}};
}

inline json to_json(const KernelStats& k) {
    json roles = json::object();
    for (std::size_t i = 0; i < kRoleCount; ++i) roles[role_name(static_cast<TensorRole>(i))] = k.bytes_by_role[i];
    return {{"name", k.name},
            {"offchip_read_bytes", k.offchip_read_bytes},
            {"offchip_write_bytes", k.offchip_write_bytes},
            {"transactions", k.transactions},
            {"compute_cycles", k.compute_cycles},
            {"memory_cycles", k.memory_cycles},
            {"est_cycles", k.est_cycles},
            {"macs", k.macs},
            {"bytes_by_role", std::move(roles)}};
}

inline json to_json(const SimStats& s) {
    json ks = json::array();
    for (const auto& k : s.kernels) ks.push_back(to_json(k));
    return {{"kernels", std::move(ks)}, {"total", to_json(s.total)}, {"gops_est", s.gops_est}};
}

inline json to_json(const SimConfig& s) {
    return {{"n_pe", s.n_pe},
            {"n_l", s.n_l},
            {"t_s", s.t_s},
            {"macs_per_unit_per_cycle", s.macs_per_unit_per_cycle},
            {"offchip_bytes_per_cycle", s.offchip_bytes_per_cycle},
            {"onchip_capacity_bytes", s.onchip_capacity_bytes},
            {"bytes_per_activation", s.bytes_per_activation},
            {"bytes_per_weight", s.bytes_per_weight},
            {"tile_bytes", s.tile_bytes},
            {"softmax_fill_latency", s.softmax_fill_latency},
            {"double_buffer", s.double_buffer},
            {"preload_fallback", s.preload_fallback},
            {"clock_mhz", s.clock_mhz},
            {"weight_mode", s.weight_mode == WeightMode::preload ? "preload" : "stream"},
            {"attention_k_policy", s.attention_k_policy == AttentionKPolicy::broadcast ? "broadcast" : "naive"},
            {"linear_fetch_policy",
             s.linear_fetch_policy == LinearFetchPolicy::rr_router ? "rr_router" : "per_patch_refetch"}};
}

// ---------------------------------------------------------------------------
// Float model files (f32 blob)
// ---------------------------------------------------------------------------

namespace detail {
inline void put_mlp(ArchiveWriter& w, const std::string& p, const MlpWeights& m, DType t) {
    w.add_matrix(p + ".w1", m.w1, t);
    w.add_vector(p + ".b1", m.b1, t);
    w.add_matrix(p + ".w2", m.w2, t);
    w.add_vector(p + ".b2", m.b2, t);
}
inline MlpWeights get_mlp(const ArchiveReader& r, const std::string& p) {
    return {r.matrix(p + ".w1"), r.vector(p + ".b1"), r.matrix(p + ".w2"), r.vector(p + ".b2")};
}
}  // namespace detail

inline ArchiveWriter float_model_archive(const ModelConfig& cfg, const ModelWeights& w, std::uint64_t seed,
                                         const json& extra_meta = json::object()) {
    check_weights(w, cfg);
    ArchiveWriter a(kFloatModelKind);
    a.meta()["config"] = to_json(cfg);
    a.meta()["seed"] = seed;
    for (const auto& [k, v] : extra_meta.items()) a.meta()[k] = v;
    for (std::size_t i = 0; i < w.blocks.size(); ++i) {
        const auto& b = w.blocks[i];
        const std::string p = "b" + std::to_string(i);
        a.add_vector(p + ".ln1_gamma", b.ln1_gamma);
        a.add_vector(p + ".ln1_beta", b.ln1_beta);
        a.add_matrix(p + ".w_qkv", b.w_qkv);
        a.add_vector(p + ".b_qkv", b.b_qkv);
        a.add_matrix(p + ".w_o", b.w_o);
        a.add_vector(p + ".b_o", b.b_o);
        a.add_vector(p + ".ln2_gamma", b.ln2_gamma);
        a.add_vector(p + ".ln2_beta", b.ln2_beta);
        if (b.is_moe()) {
            a.add_matrix(p + ".w_gate", b.moe().w_gate);
            a.add_vector(p + ".b_gate", b.moe().b_gate);
            for (std::size_t j = 0; j < b.moe().experts.size(); ++j)
                detail::put_mlp(a, p + ".expert" + std::to_string(j), b.moe().experts[j], DType::f32);
        } else {
            detail::put_mlp(a, p + ".mlp", b.mlp(), DType::f32);
        }
    }
    a.add_matrix("head_w", w.head_w);
    a.add_vector("head_b", w.head_b);
    return a;
}

struct FloatModelFile {
    ModelConfig config;
    ModelWeights weights;
    json meta;
};

inline FloatModelFile float_model_from_archive(const ArchiveReader& r) {
    if (r.kind() == kQuantModelKind) throw FormatError("expected a float model, got a quantized model");
    if (r.kind() != kFloatModelKind) throw FormatError("expected a float model, got '" + r.kind() + "'");
    FloatModelFile f;
    f.meta = r.meta();
    f.config = config_from_json(r.meta().at("config"));
    for (std::size_t i = 0; i < f.config.n_blocks; ++i) {
        const std::string p = "b" + std::to_string(i);
        BlockWeights b{r.vector(p + ".ln1_gamma"), r.vector(p + ".ln1_beta"), r.matrix(p + ".w_qkv"),
                       r.vector(p + ".b_qkv"),     r.matrix(p + ".w_o"),      r.vector(p + ".b_o"),
                       r.vector(p + ".ln2_gamma"), r.vector(p + ".ln2_beta"), MlpWeights{}};
        if (f.config.is_moe(i)) {
            MoeWeights m{r.matrix(p + ".w_gate"), r.vector(p + ".b_gate"), {}};
            for (std::size_t j = 0; j < f.config.n_experts; ++j)
                m.experts.push_back(detail::get_mlp(r, p + ".expert" + std::to_string(j)));
            b.ffn = std::move(m);
        } else {
            b.ffn = detail::get_mlp(r, p + ".mlp");
        }
        f.weights.blocks.push_back(std::move(b));
    }
    f.weights.head_w = r.matrix("head_w");
    f.weights.head_b = r.vector("head_b");
    try {
        check_weights(f.weights, f.config);
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("model tensors inconsistent with config: ") + e.what());
    }
    return f;
}

/// Rounds every parameter to float32, the precision of the on-disk format.
inline ModelWeights round_to_f32(ModelWeights w) {
    auto r = [](std::vector<double>& v) {
        for (double& x : v) x = static_cast<float>(x);
    };
    for (auto& b : w.blocks) {
        for (auto* v : {&b.ln1_gamma, &b.ln1_beta, &b.b_qkv, &b.b_o, &b.ln2_gamma, &b.ln2_beta}) r(*v);
        r(b.w_qkv.data());
        r(b.w_o.data());
        auto rm = [&](MlpWeights& m) {
            r(m.w1.data());
            r(m.b1);
            r(m.w2.data());
            r(m.b2);
        };
        if (b.is_moe()) {
            r(b.moe().w_gate.data());
            r(b.moe().b_gate);
            for (auto& e : b.moe().experts) rm(e);
        } else {
            rm(b.mlp());
        }
    }
    r(w.head_w.data());
    r(w.head_b);
    return w;
}

// ---------------------------------------------------------------------------
// Input sets (f32 blob)
// ---------------------------------------------------------------------------

inline ArchiveWriter inputs_archive(const ModelConfig& cfg, std::span<const Matrix> xs, const std::string& role,
                                    std::uint64_t seed) {
    ArchiveWriter a(kInputsKind);
    a.meta()["config"] = to_json(cfg);
    a.meta()["role"] = role;
    a.meta()["seed"] = seed;
    a.meta()["count"] = xs.size();
    for (std::size_t i = 0; i < xs.size(); ++i) a.add_matrix("x" + std::to_string(i), xs[i]);
    return a;
}

inline std::vector<Matrix> inputs_from_archive(const ArchiveReader& r) {
    if (r.kind() != kInputsKind) throw FormatError("expected an input set, got '" + r.kind() + "'");
    const std::size_t n = r.meta().at("count").get<std::size_t>();
    std::vector<Matrix> xs;
    for (std::size_t i = 0; i < n; ++i) xs.push_back(r.matrix("x" + std::to_string(i)));
    return xs;
}

// ---------------------------------------------------------------------------
// Quantized model files (f64 reals, i8/i32/i64 codes)
// ---------------------------------------------------------------------------

namespace detail {
inline void put_qlinear(ArchiveWriter& a, json& meta, const std::string& p, const QLinear& l) {
    a.add_int_matrix(p + ".w_codes", l.weight.codes);
    a.add_ints(p + ".bias_q", {l.bias_q.size()}, l.bias_q);
    meta["input"] = to_json(l.input);
    meta["weight"] = to_json(l.weight.params);
}

inline QLinear get_qlinear(const ArchiveReader& r, const json& meta, const std::string& p) {
    QLinear l;
    l.input = quant_params_from_json(meta.at("input"));
    l.weight = QTensor{r.int_matrix(p + ".w_codes"), quant_params_from_json(meta.at("weight"))};
    check(l.weight);
    l.bias_q = r.ints(p + ".bias_q");
    l.acc_scale.resize(l.weight.codes.cols());
    for (std::size_t c = 0; c < l.acc_scale.size(); ++c) l.acc_scale[c] = l.input.scale(0) * l.weight.params.scale(c);
    if (l.bias_q.size() != l.acc_scale.size()) throw FormatError(p + ": bias length mismatch");
    return l;
}

inline json put_qmlp(ArchiveWriter& a, const std::string& p, const QMlp& m) {
    json j;
    j["fc1"] = json::object();
    j["fc2"] = json::object();
    put_qlinear(a, j["fc1"], p + ".fc1", m.fc1);
    put_qlinear(a, j["fc2"], p + ".fc2", m.fc2);
    j["fc1_out"] = to_json(m.fc1_out);
    j["fc2_in"] = to_json(m.fc2_in);
    j["fc2_out"] = to_json(m.fc2_out);
    return j;
}

inline QMlp get_qmlp(const ArchiveReader& r, const json& j, const std::string& p) {
    QMlp m;
    m.fc1 = get_qlinear(r, j.at("fc1"), p + ".fc1");
    m.fc2 = get_qlinear(r, j.at("fc2"), p + ".fc2");
    m.fc1_out = quant_params_from_json(j.at("fc1_out"));
    m.fc2_in = quant_params_from_json(j.at("fc2_in"));
    m.fc2_out = quant_params_from_json(j.at("fc2_out"));
    return m;
}
}  // namespace detail

inline ArchiveWriter quantized_model_archive(const QuantizedModel& qm, std::uint64_t seed) {
    ArchiveWriter a(kQuantModelKind);
    a.meta()["config"] = to_json(qm.config);
    a.meta()["options"] = to_json(qm.options);
    a.meta()["seed"] = seed;
    json blocks = json::array();
    for (std::size_t i = 0; i < qm.blocks.size(); ++i) {
        const QBlock& b = qm.blocks[i];
        const std::string p = "b" + std::to_string(i);
        json j;
        a.add_vector(p + ".ln1_gamma", b.ln1_gamma, DType::f64);
        a.add_vector(p + ".ln1_beta", b.ln1_beta, DType::f64);
        a.add_vector(p + ".ln2_gamma", b.ln2_gamma, DType::f64);
        a.add_vector(p + ".ln2_beta", b.ln2_beta, DType::f64);
        j["ln1_act"] = to_json(b.ln1_act);
        j["ln2_act"] = to_json(b.ln2_act);
        j["ln1_factors"] = b.ln1_factors ? to_json(*b.ln1_factors) : json(nullptr);
        j["ln2_factors"] = b.ln2_factors ? to_json(*b.ln2_factors) : json(nullptr);
        j["qkv"] = json::object();
        detail::put_qlinear(a, j["qkv"], p + ".qkv", b.qkv);
        j["q_act"] = to_json(b.q_act);
        j["k_act"] = to_json(b.k_act);
        j["v_act"] = to_json(b.v_act);
        j["attn_act"] = to_json(b.attn_act);
        j["o"] = json::object();
        detail::put_qlinear(a, j["o"], p + ".o", b.o);
        j["o_out"] = to_json(b.o_out);
        if (b.is_moe()) {
            const QMoe& m = std::get<QMoe>(b.ffn);
            a.add_matrix(p + ".w_gate", m.w_gate, DType::f64);
            a.add_vector(p + ".b_gate", m.b_gate, DType::f64);
            json ex = json::array();
            for (std::size_t e = 0; e < m.experts.size(); ++e)
                ex.push_back(detail::put_qmlp(a, p + ".expert" + std::to_string(e), m.experts[e]));
            j["experts"] = std::move(ex);
        } else {
            j["mlp"] = detail::put_qmlp(a, p + ".mlp", std::get<QMlp>(b.ffn));
        }
        blocks.push_back(std::move(j));
    }
    a.meta()["blocks"] = std::move(blocks);
    a.add_matrix("head_w", qm.head_w, DType::f64);
    a.add_vector("head_b", qm.head_b, DType::f64);
    return a;
}

inline QuantizedModel quantized_model_from_archive(const ArchiveReader& r) {
    if (r.kind() != kQuantModelKind) throw FormatError("expected a quantized model, got '" + r.kind() + "'");
    try {
        QuantizedModel qm;
        qm.config = config_from_json(r.meta().at("config"));
        qm.options = quant_options_from_json(r.meta().at("options"));
        const json& blocks = r.meta().at("blocks");
        if (blocks.size() != qm.config.n_blocks) throw FormatError("block count mismatch");
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const json& j = blocks[i];
            const std::string p = "b" + std::to_string(i);
            QBlock b;
            b.ln1_gamma = r.vector(p + ".ln1_gamma");
            b.ln1_beta = r.vector(p + ".ln1_beta");
            b.ln2_gamma = r.vector(p + ".ln2_gamma");
            b.ln2_beta = r.vector(p + ".ln2_beta");
            b.ln1_act = quant_params_from_json(j.at("ln1_act"));
            b.ln2_act = quant_params_from_json(j.at("ln2_act"));
            if (!j.at("ln1_factors").is_null()) b.ln1_factors = factors_from_json(j.at("ln1_factors"));
            if (!j.at("ln2_factors").is_null()) b.ln2_factors = factors_from_json(j.at("ln2_factors"));
            b.qkv = detail::get_qlinear(r, j.at("qkv"), p + ".qkv");
            b.q_act = quant_params_from_json(j.at("q_act"));
            b.k_act = quant_params_from_json(j.at("k_act"));
            b.v_act = quant_params_from_json(j.at("v_act"));
            b.attn_act = quant_params_from_json(j.at("attn_act"));
            b.o = detail::get_qlinear(r, j.at("o"), p + ".o");
            b.o_out = quant_params_from_json(j.at("o_out"));
            if (qm.config.is_moe(i)) {
                QMoe m{r.matrix(p + ".w_gate"), r.vector(p + ".b_gate"), {}};
                const json& ex = j.at("experts");
                for (std::size_t e = 0; e < ex.size(); ++e)
                    m.experts.push_back(detail::get_qmlp(r, ex[e], p + ".expert" + std::to_string(e)));
                if (m.experts.size() != qm.config.n_experts) throw FormatError("expert count mismatch");
                b.ffn = std::move(m);
            } else {
                b.ffn = detail::get_qmlp(r, j.at("mlp"), p + ".mlp");
            }
            qm.blocks.push_back(std::move(b));
        }
        qm.head_w = r.matrix("head_w");
        qm.head_b = r.vector("head_b");
        return qm;
    } catch (const json::exception& e) {
        throw FormatError(std::string("malformed quantized model: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("invalid quantized model: ") + e.what());
    }
}

}  // namespace coqmoe
