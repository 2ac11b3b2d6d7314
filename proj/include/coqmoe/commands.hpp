// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <locale>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "coqmoe/model_io.hpp"
#include "coqmoe/synthetic.hpp"

namespace coqmoe {

inline constexpr const char* kReportSchema = "coqmoe-report/1";
inline constexpr const char* kAuditSchema = "coqmoe-audit/1";
inline constexpr const char* kSeedEnv = "COQMOE_SEED";
inline constexpr std::uint64_t kDefaultSeed = 0;

/// Error raised for bad command-line usage (exit code 2).
class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// --seed wins; otherwise COQMOE_SEED; otherwise kDefaultSeed.
inline std::uint64_t resolve_seed(std::optional<std::uint64_t> flag) {
    if (flag) return *flag;
    const char* env = std::getenv(kSeedEnv);
    if (!env || !*env) return kDefaultSeed;
    const std::string s(env);
    std::size_t pos = 0;
    unsigned long long v = 0;
    try {
        if (s.front() == '-') throw std::invalid_argument("negative");
        v = std::stoull(s, &pos, 10);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw UsageError(std::string(kSeedEnv) + " is not an unsigned integer: '" + s + "'");
    return v;
}

/// Writes `text` to `path`, or to `out` when path is "-" or empty.
inline void emit(const std::string& text, const std::string& path, std::ostream& out) {
    if (path.empty() || path == "-") {
        out << text;
        return;
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    f << text;
    if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

inline std::string dump_report(const json& j) { return j.dump(2) + "\n"; }

inline json report_header(const std::string& command, std::uint64_t seed) {
    return {{"schema", kReportSchema}, {"command", command}, {"seed", seed}};
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

enum class GammaVariance { normal, high };

struct GenOptions {
    std::optional<std::uint64_t> seed;
    ModelConfig config;
    GammaVariance gamma_variance = GammaVariance::normal;
    std::size_t n_calib = 32;
    std::size_t n_eval = 64;
    std::string out_dir = ".";
    std::string report_path = "-";
};

struct GenOutputs {
    ModelWeights weights;  // already rounded to float32
    std::vector<Matrix> calib, eval;
};

inline SyntheticOptions synthetic_options(GammaVariance g) {
    SyntheticOptions o;
    if (g == GammaVariance::high) o.gamma_log_sigma = kHighGammaSigma;
    return o;
}

inline std::vector<Matrix> round_inputs_to_f32(std::vector<Matrix> xs) {
    for (auto& x : xs)
        for (double& v : x.data()) v = static_cast<float>(v);
    return xs;
}

/// The data written by `gen`, computed in memory.
inline GenOutputs generate(const ModelConfig& cfg, std::uint64_t seed, GammaVariance g, std::size_t n_calib,
                           std::size_t n_eval) {
    validate(cfg);
    const Rng root(seed);
    GenOutputs o;
    o.weights = round_to_f32(make_synthetic_weights(cfg, root.fork(1).seed(), synthetic_options(g)));
    o.calib = round_inputs_to_f32(make_synthetic_inputs(cfg, n_calib, root.fork(2).seed()));
    o.eval = round_inputs_to_f32(make_synthetic_inputs(cfg, n_eval, root.fork(3).seed()));
    return o;
}

inline int cmd_gen(const GenOptions& opt, std::ostream& out) {
    try {
        validate(opt.config);
    } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
    }
    if (opt.n_calib < 1 || opt.n_eval < 1) throw UsageError("calibration and eval sets must be non-empty");
    const std::uint64_t seed = resolve_seed(opt.seed);
    const GenOutputs g = generate(opt.config, seed, opt.gamma_variance, opt.n_calib, opt.n_eval);
    const std::string gv = opt.gamma_variance == GammaVariance::high ? "high" : "normal";

    namespace fs = std::filesystem;
    fs::create_directories(opt.out_dir);
    const fs::path dir(opt.out_dir);
    const auto model = float_model_archive(opt.config, g.weights, seed, json{{"gamma_variance", gv}});
    const auto calib = inputs_archive(opt.config, g.calib, "calibration", seed);
    const auto eval = inputs_archive(opt.config, g.eval, "eval", seed);
    model.write((dir / "model.cqm").string());
    calib.write((dir / "calib.cqm").string());
    eval.write((dir / "eval.cqm").string());

    json r = report_header("gen", seed);
    r["config"] = to_json(opt.config);
    r["gamma_variance"] = gv;
    r["files"] = {{"model", "model.cqm"}, {"calib", "calib.cqm"}, {"eval", "eval.cqm"}};
    r["counts"] = {{"calib", opt.n_calib}, {"eval", opt.n_eval}};
    r["checksums"] = {{"model", model.checksum()},
                      {"calib", calib.checksum()},
                      {"eval", eval.checksum()}};
    emit(dump_report(r), opt.report_path, out);
    return 0;
}

// ---------------------------------------------------------------------------
// quantize
// ---------------------------------------------------------------------------

struct QuantizeOptions {
    std::string model_path;
    std::string calib_path;
    std::string out_path = "model.q.cqm";
    std::string audit_path = "-";
    QuantOptions quant;
};

inline json reparam_audit(const QuantizedModel& qm) {
    json sites = json::array();
    for (std::size_t i = 0; i < qm.blocks.size(); ++i) {
        const QBlock& b = qm.blocks[i];
        const std::string p = "b" + std::to_string(i) + ".";
        if (b.ln1_factors) sites.push_back({{"site", p + "ln1"}, {"factors", to_json(*b.ln1_factors)}});
        if (b.ln2_factors) sites.push_back({{"site", p + "ln2"}, {"factors", to_json(*b.ln2_factors)}});
    }
    return sites;
}

inline int cmd_quantize(const QuantizeOptions& opt, std::ostream& out) {
    const ArchiveReader mr = ArchiveReader::read(opt.model_path);
    if (mr.kind() == kQuantModelKind) throw std::runtime_error("'" + opt.model_path + "' is already quantized");
    const FloatModelFile fm = float_model_from_archive(mr);
    const ArchiveReader cr = ArchiveReader::read(opt.calib_path);
    const std::vector<Matrix> calib = inputs_from_archive(cr);
    if (config_from_json(cr.meta().at("config")) != fm.config)
        throw std::runtime_error("calibration set was generated for a different config");
    const std::uint64_t seed = fm.meta.at("seed").get<std::uint64_t>();

    const QuantizedModel qm = build_quantized(fm.weights, fm.config, calib, opt.quant);
    quantized_model_archive(qm, seed).write(opt.out_path);

    json a{{"schema", kAuditSchema}, {"command", "quantize"}, {"seed", seed}};
    a["config"] = to_json(fm.config);
    a["options"] = to_json(opt.quant);
    a["calibration_inputs"] = calib.size();
    a["rewritten_sites"] = reparam_audit(qm);
    emit(dump_report(a), opt.audit_path, out);
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalOptions {
    std::string float_path;
    std::string quant_path;
    std::string inputs_path;
    std::optional<std::string> baseline_path;  // a second quantized model for a paired comparison
    std::string report_path = "-";
};

inline bool gates_normalized(const GateTrace& t, double tol = 1e-12) {
    for (const auto& blk : t)
        for (const auto& g : blk) {
            double s = 0.0;
            for (double w : g.weights) s += w;
            if (std::abs(s - 1.0) > tol) return false;
        }
    return true;
}

inline int cmd_eval(const EvalOptions& opt, std::ostream& out) {
    const FloatModelFile fm = float_model_from_archive(ArchiveReader::read(opt.float_path));
    const QuantizedModel qm = quantized_model_from_archive(ArchiveReader::read(opt.quant_path));
    const ArchiveReader ir = ArchiveReader::read(opt.inputs_path);
    const std::vector<Matrix> xs = inputs_from_archive(ir);
    if (qm.config != fm.config) throw std::runtime_error("config mismatch between float and quantized models");
    if (config_from_json(ir.meta().at("config")) != fm.config)
        throw std::runtime_error("config mismatch between model and inputs");
    std::optional<QuantizedModel> base;
    if (opt.baseline_path) {
        base = quantized_model_from_archive(ArchiveReader::read(*opt.baseline_path));
        if (base->config != fm.config) throw std::runtime_error("config mismatch for the baseline model");
    }
    const std::uint64_t seed = fm.meta.at("seed").get<std::uint64_t>();

    const AgreementReport rep = compare_models(fm.weights, qm, xs);

    bool finite = true, normalized = true, deterministic = true;
    for (const auto& x : xs) {
        const ForwardResult f = forward(x, fm.weights, fm.config);
        const QuantForward q1 = forward_quantized(qm, x);
        const QuantForward q2 = forward_quantized(qm, x);
        for (double v : f.logits) finite = finite && std::isfinite(v);
        for (double v : q1.logits) finite = finite && std::isfinite(v);
        normalized = normalized && gates_normalized(f.gates) && gates_normalized(q1.gates);
        deterministic = deterministic && q1.logits == q2.logits && q1.gates.size() == q2.gates.size();
        for (std::size_t i = 0; deterministic && i < q1.gates.size(); ++i)
            for (std::size_t t = 0; t < q1.gates[i].size(); ++t)
                deterministic = deterministic && q1.gates[i][t].experts == q2.gates[i][t].experts &&
                                q1.gates[i][t].weights == q2.gates[i][t].weights;
    }

    json r = report_header("eval", seed);
    r["config"] = to_json(fm.config);
    r["quant_options"] = to_json(qm.options);
    r["agreement"] = to_json(rep);
    r["reparam_audit"] = reparam_audit(qm);
    json checks = json::array();
    auto add_check = [&](const std::string& name, bool ok) { checks.push_back({{"name", name}, {"pass", ok}}); };
    add_check("finite_logits", finite);
    add_check("gate_weights_sum_to_one", normalized);
    add_check("deterministic_rerun", deterministic);
    add_check("agreement_in_unit_interval", rep.top1_agreement >= 0.0 && rep.top1_agreement <= 1.0 &&
                                                rep.routing_agreement >= 0.0 && rep.routing_agreement <= 1.0);

    if (base) {
        const AgreementReport br = compare_models(fm.weights, *base, xs);
        json table = json::array();
        for (const auto& [site, mse] : rep.per_site_mse) {
            const double b = br.per_site_mse.at(site);
            table.push_back({{"site", site}, {"mse", mse}, {"baseline_mse", b}, {"not_worse", mse <= b}});
        }
        r["baseline"] = {{"quant_options", to_json(base->options)}, {"agreement", to_json(br)}, {"site_table", table}};
    }
    bool all = true;
    for (const auto& c : checks) all = all && c.at("pass").get<bool>();
    r["checks"] = std::move(checks);
    r["all_checks_pass"] = all;
    emit(dump_report(r), opt.report_path, out);
    return all ? 0 : 1;
}

// ---------------------------------------------------------------------------
// sim
// ---------------------------------------------------------------------------

struct SimOptions {
    std::string model_path;
    std::optional<std::string> inputs_path;
    std::optional<std::string> gate_trace_path;
    std::size_t input_index = 0;
    std::vector<std::size_t> npe{8};
    std::vector<std::size_t> nl{8};
    std::vector<double> bw{64.0};
    std::vector<std::string> policy{"broadcast"};
    std::vector<std::string> fetch{"rr"};
    std::string weight_mode = "stream";
    SimConfig base;
    std::string format = "json";
    std::string report_path = "-";
    std::optional<std::string> dump_gates_path;
};

inline AttentionKPolicy parse_k_policy(const std::string& s) {
    if (s == "broadcast") return AttentionKPolicy::broadcast;
    if (s == "naive") return AttentionKPolicy::naive;
    throw UsageError("unknown attention policy '" + s + "' (expected broadcast or naive)");
}

inline LinearFetchPolicy parse_fetch_policy(const std::string& s) {
    if (s == "rr") return LinearFetchPolicy::rr_router;
    if (s == "per-patch") return LinearFetchPolicy::per_patch_refetch;
    throw UsageError("unknown fetch policy '" + s + "' (expected rr or per-patch)");
}

inline WeightMode parse_weight_mode(const std::string& s) {
    if (s == "stream") return WeightMode::stream;
    if (s == "preload") return WeightMode::preload;
    throw UsageError("unknown weight mode '" + s + "' (expected stream or preload)");
}

struct SweepPoint {
    SimConfig config;
    std::string policy, fetch;
    SimStats stats;
};

inline std::vector<SweepPoint> run_sweep(const ModelConfig& cfg, const GateTrace& gates, const SimOptions& opt) {
    if (opt.npe.empty() || opt.nl.empty() || opt.bw.empty() || opt.policy.empty() || opt.fetch.empty())
        throw UsageError("empty sweep: every sweep list needs at least one value");
    for (auto v : opt.npe)
        if (v < 1) throw UsageError("--npe values must be >= 1");
    for (auto v : opt.nl)
        if (v < 1) throw UsageError("--nl values must be >= 1");
    for (auto v : opt.bw)
        if (!(v > 0.0) || !std::isfinite(v)) throw UsageError("--bw values must be finite and > 0");
    std::vector<SweepPoint> pts;
    for (const auto& pol : opt.policy)
        for (const auto& fe : opt.fetch)
            for (auto npe : opt.npe)
                for (auto nl : opt.nl)
                    for (auto bw : opt.bw) {
                        SweepPoint p;
                        p.config = opt.base;
                        p.config.n_pe = npe;
                        p.config.n_l = nl;
                        p.config.offchip_bytes_per_cycle = bw;
                        p.config.attention_k_policy = parse_k_policy(pol);
                        p.config.linear_fetch_policy = parse_fetch_policy(fe);
                        p.config.weight_mode = parse_weight_mode(opt.weight_mode);
                        p.policy = pol;
                        p.fetch = fe;
                        p.stats = sim_model(cfg, gates, p.config);
                        pts.push_back(std::move(p));
                    }
    return pts;
}

inline std::string format_double(double v) {
    std::ostringstream s;
    s.imbue(std::locale::classic());
    s.precision(17);
    s << v;
    return s.str();
}

inline std::string sweep_csv(const std::vector<SweepPoint>& pts) {
    std::ostringstream s;
    s << "npe,nl,bw,policy,fetch,k_bytes,v_bytes,q_bytes,weight_bytes,activation_bytes,output_bytes,"
         "read_bytes,write_bytes,transactions,compute_cycles,memory_cycles,est_cycles,gops_est\n";
    for (const auto& p : pts) {
        const KernelStats& t = p.stats.total;
        s << p.config.n_pe << ',' << p.config.n_l << ',' << format_double(p.config.offchip_bytes_per_cycle) << ','
          << p.policy << ',' << p.fetch << ',' << t.role(TensorRole::k) << ',' << t.role(TensorRole::v) << ','
          << t.role(TensorRole::q) << ',' << t.role(TensorRole::weights) << ',' << t.role(TensorRole::activations)
          << ',' << t.role(TensorRole::outputs) << ',' << t.offchip_read_bytes << ',' << t.offchip_write_bytes << ','
          << t.transactions << ',' << t.compute_cycles << ',' << t.memory_cycles << ',' << t.est_cycles << ','
          << format_double(p.stats.gops_est) << '\n';
    }
    return s.str();
}

inline int cmd_sim(const SimOptions& opt, std::ostream& out) {
    if (opt.format != "json" && opt.format != "csv") throw UsageError("--format must be json or csv");
    if (opt.inputs_path.has_value() == opt.gate_trace_path.has_value())
        throw UsageError("sim needs exactly one of --inputs or --gate-trace");
    const ArchiveReader mr = ArchiveReader::read(opt.model_path);
    const bool quantized = mr.kind() == kQuantModelKind;
    ModelConfig cfg;
    GateTrace gates;
    std::uint64_t seed = mr.meta().at("seed").get<std::uint64_t>();
    if (opt.gate_trace_path) {
        cfg = config_from_json(mr.meta().at("config"));
        std::ifstream f(*opt.gate_trace_path);
        if (!f) throw std::runtime_error("cannot open '" + *opt.gate_trace_path + "'");
        json j;
        try {
            j = json::parse(f);
        } catch (const json::exception& e) {
            throw FormatError(std::string("gate trace is not valid JSON: ") + e.what());
        }
        gates = gate_trace_from_json(j);
    } else {
        const std::vector<Matrix> xs = inputs_from_archive(ArchiveReader::read(*opt.inputs_path));
        if (opt.input_index >= xs.size()) throw UsageError("--index out of range for the input set");
        if (quantized) {
            const QuantizedModel qm = quantized_model_from_archive(mr);
            cfg = qm.config;
            gates = forward_quantized(qm, xs[opt.input_index]).gates;
        } else {
            const FloatModelFile fm = float_model_from_archive(mr);
            cfg = fm.config;
            gates = forward(xs[opt.input_index], fm.weights, cfg).gates;
        }
    }
    if (opt.dump_gates_path) emit(gate_trace_to_json(gates).dump(2) + "\n", *opt.dump_gates_path, out);

    const std::vector<SweepPoint> pts = run_sweep(cfg, gates, opt);
    if (opt.format == "csv") {
        emit(sweep_csv(pts), opt.report_path, out);
        return 0;
    }
    json r = report_header("sim", seed);
    r["config"] = to_json(cfg);
    r["model_kind"] = mr.kind();
    r["gate_source"] = opt.gate_trace_path ? "gate-trace" : "inputs";
    r["input_index"] = opt.input_index;
    json rows = json::array();
    for (const auto& p : pts)
        rows.push_back({{"sim_config", to_json(p.config)}, {"stats", to_json(p.stats)}});
    r["sweep"] = std::move(rows);
    emit(dump_report(r), opt.report_path, out);
    return 0;
}

}  // namespace coqmoe
