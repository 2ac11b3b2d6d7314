// SPDX-License-Identifier: Apache-2.0
// coqmoe: generate, quantize, evaluate and simulate tiny MoE vision transformers.

#include <iostream>

#include <CLI11.hpp>

#include "coqmoe/commands.hpp"

namespace {

using namespace coqmoe;

std::vector<std::size_t> parse_moe_blocks(const std::string& text, std::size_t n_blocks) {
    if (text == "alternate") return ModelConfig::alternating_moe(n_blocks);
    if (text == "none" || text.empty()) return {};
    std::vector<std::size_t> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto comma = text.find(',', start);
        const std::string tok = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
        std::size_t pos = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(tok, &pos);
        } catch (const std::exception&) {
            pos = 0;
        }
        if (tok.empty() || pos != tok.size() || tok.front() == '-')
            throw UsageError("--moe-blocks: expected 'alternate', 'none' or a list of block indices");
        out.push_back(v);
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

int run(int argc, char** argv) {
    CLI::App app{"coqmoe: co-quantized mixture-of-experts vision transformer toolkit"};
    app.require_subcommand(1);

    // gen
    GenOptions gen;
    std::optional<std::uint64_t> gen_seed;
    std::string moe_spec = "alternate", gamma = "normal";
    auto* g = app.add_subcommand("gen", "Generate a synthetic float model plus calibration and eval inputs");
    g->add_option("--seed", gen_seed, "Seed (falls back to $COQMOE_SEED, then 0)");
    g->add_option("--out-dir", gen.out_dir, "Output directory")->capture_default_str();
    g->add_option("--tokens", gen.config.n_tokens, "Tokens per input (N)")->capture_default_str();
    g->add_option("--dim", gen.config.dim, "Embedding width (D)")->capture_default_str();
    g->add_option("--heads", gen.config.n_heads, "Attention heads (h)")->capture_default_str();
    g->add_option("--head-dim", gen.config.head_dim, "Per-head width (Dh)")->capture_default_str();
    g->add_option("--blocks", gen.config.n_blocks, "Transformer blocks (L)")->capture_default_str();
    g->add_option("--mlp-ratio", gen.config.mlp_ratio, "MLP hidden width / D")->capture_default_str();
    g->add_option("--experts", gen.config.n_experts, "Experts per MoE block (m)")->capture_default_str();
    g->add_option("--top-k", gen.config.top_k, "Experts per token (k)")->capture_default_str();
    g->add_option("--moe-blocks", moe_spec, "'alternate', 'none' or comma-separated block indices")
        ->capture_default_str();
    g->add_option("--classes", gen.config.n_classes, "Classifier outputs")->capture_default_str();
    g->add_option("--gamma-variance", gamma, "LayerNorm gamma spread")
        ->check(CLI::IsMember({"normal", "high"}))
        ->capture_default_str();
    g->add_option("--calib", gen.n_calib, "Calibration inputs")->capture_default_str();
    g->add_option("--eval", gen.n_eval, "Eval inputs")->capture_default_str();
    g->add_option("--report", gen.report_path, "Report path ('-' for stdout)")->capture_default_str();

    // quantize
    QuantizeOptions qz;
    std::string reparam = "on", scale_mean = "arithmetic", weight_gran = "per-channel";
    auto* q = app.add_subcommand("quantize", "Post-training quantize a float model");
    q->add_option("--model", qz.model_path, "Float model file")->required();
    q->add_option("--calib", qz.calib_path, "Calibration input file")->required();
    q->add_option("--out", qz.out_path, "Quantized model file")->capture_default_str();
    q->add_option("--audit", qz.audit_path, "Reparameterization audit path ('-' for stdout)")->capture_default_str();
    q->add_option("--reparam", reparam, "Fold per-channel LayerNorm scales into the next linear layer")
        ->check(CLI::IsMember({"on", "off"}))
        ->capture_default_str();
    q->add_option("--wbits", qz.quant.weight_bits, "Weight bits")->check(CLI::Range(2, 16))->capture_default_str();
    q->add_option("--abits", qz.quant.act_bits, "Activation bits")->check(CLI::Range(2, 16))->capture_default_str();
    q->add_option("--attnbits", qz.quant.attn_bits, "Attention-probability bits (log-sqrt2)")
        ->check(CLI::Range(1, 16))
        ->capture_default_str();
    q->add_option("--scale-mean", scale_mean, "Mean used for the unified scale")
        ->check(CLI::IsMember({"arithmetic", "geometric"}))
        ->capture_default_str();
    q->add_option("--weight-granularity", weight_gran, "Weight quantization granularity")
        ->check(CLI::IsMember({"per-channel", "per-layer"}))
        ->capture_default_str();

    // eval
    EvalOptions ev;
    auto* e = app.add_subcommand("eval", "Compare a quantized model against its float model");
    e->add_option("--float", ev.float_path, "Float model file")->required();
    e->add_option("--quant", ev.quant_path, "Quantized model file")->required();
    e->add_option("--inputs", ev.inputs_path, "Input set")->required();
    e->add_option("--baseline", ev.baseline_path, "Second quantized model for a paired per-site comparison");
    e->add_option("--report", ev.report_path, "Report path ('-' for stdout)")->capture_default_str();

    // sim
    SimOptions sm;
    auto* s = app.add_subcommand("sim", "Sweep the accelerator traffic and latency model");
    s->add_option("--model", sm.model_path, "Float or quantized model file")->required();
    auto* in_opt = s->add_option("--inputs", sm.inputs_path, "Input set used to trace expert routing");
    auto* gt_opt = s->add_option("--gate-trace", sm.gate_trace_path, "Gate trace JSON");
    in_opt->excludes(gt_opt);
    s->add_option("--index", sm.input_index, "Input used from --inputs")->capture_default_str();
    s->add_option("--npe", sm.npe, "Attention PE counts")->delimiter(',')->capture_default_str();
    s->add_option("--nl", sm.nl, "Linear CU counts")->delimiter(',')->capture_default_str();
    s->add_option("--bw", sm.bw, "Off-chip bytes per cycle")->delimiter(',')->capture_default_str();
    s->add_option("--policy", sm.policy, "K/V fetch policies: broadcast, naive")->delimiter(',')->capture_default_str();
    s->add_option("--fetch", sm.fetch, "Linear weight fetch policies: rr, per-patch")
        ->delimiter(',')
        ->capture_default_str();
    s->add_option("--weight-mode", sm.weight_mode, "stream or preload")->capture_default_str();
    s->add_option("--ts", sm.base.t_s, "Pass-3 multipliers per PE")->capture_default_str();
    s->add_option("--macs", sm.base.macs_per_unit_per_cycle, "MACs per unit per cycle")->capture_default_str();
    s->add_option("--capacity", sm.base.onchip_capacity_bytes, "On-chip bytes")->capture_default_str();
    s->add_option("--clock-mhz", sm.base.clock_mhz, "Clock for the GOPS estimate")->capture_default_str();
    s->add_flag("!--no-double-buffer", sm.base.double_buffer, "Serialize memory and compute");
    s->add_flag("--preload-fallback", sm.base.preload_fallback, "Stream weights when preload does not fit");
    s->add_option("--format", sm.format, "json or csv")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
    s->add_option("--report", sm.report_path, "Report path ('-' for stdout)")->capture_default_str();
    s->add_option("--dump-gates", sm.dump_gates_path, "Also write the gate trace used");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        const int rc = app.exit(err);
        return rc == 0 ? 0 : 2;
    }

    if (*g) {
        gen.seed = gen_seed;
        gen.config.moe_blocks = parse_moe_blocks(moe_spec, gen.config.n_blocks);
        gen.gamma_variance = gamma == "high" ? GammaVariance::high : GammaVariance::normal;
        return cmd_gen(gen, std::cout);
    }
    if (*q) {
        qz.quant.reparam = reparam == "on";
        qz.quant.scale_mean = scale_mean == "geometric" ? ScaleMean::geometric : ScaleMean::arithmetic;
        qz.quant.per_channel_weights = weight_gran == "per-channel";
        return cmd_quantize(qz, std::cout);
    }
    if (*e) return cmd_eval(ev, std::cout);
    return cmd_sim(sm, std::cout);
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const coqmoe::UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
