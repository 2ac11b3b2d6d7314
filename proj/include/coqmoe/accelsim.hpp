// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coqmoe/model.hpp"

namespace coqmoe {

enum class WeightMode { preload, stream };
enum class AttentionKPolicy { broadcast, naive };
enum class LinearFetchPolicy { rr_router, per_patch_refetch };

/// Accelerator shape. Bandwidth is in bytes per cycle of the off-chip port.
struct SimConfig {
    std::size_t n_pe = 8;   // attention PEs
    std::size_t n_l = 8;    // linear compute units
    std::size_t t_s = 16;   // pass-3 multipliers per PE
    std::size_t macs_per_unit_per_cycle = 64;
    double offchip_bytes_per_cycle = 64.0;
    std::size_t onchip_capacity_bytes = std::size_t{4} << 20;
    std::size_t bytes_per_activation = 1;
    std::size_t bytes_per_weight = 1;
    std::size_t tile_bytes = 64;  // one transaction = one burst of this many bytes
    std::size_t softmax_fill_latency = 3;  // cycles to fill the three softmax passes
    bool double_buffer = true;     // overlap memory and compute within a kernel
    bool preload_fallback = false; // stream instead of failing when preload does not fit
    double clock_mhz = 300.0;
    WeightMode weight_mode = WeightMode::stream;
    AttentionKPolicy attention_k_policy = AttentionKPolicy::broadcast;
    LinearFetchPolicy linear_fetch_policy = LinearFetchPolicy::rr_router;
};

inline void validate(const SimConfig& s) {
    if (s.n_pe < 1 || s.n_l < 1 || s.t_s < 1 || s.macs_per_unit_per_cycle < 1 || s.bytes_per_activation < 1 ||
        s.bytes_per_weight < 1 || s.tile_bytes < 1)
        throw std::invalid_argument("invalid SimConfig: counts must be >= 1");
    if (!(s.offchip_bytes_per_cycle > 0.0)) throw std::invalid_argument("invalid SimConfig: bandwidth must be > 0");
    if (!(s.clock_mhz > 0.0)) throw std::invalid_argument("invalid SimConfig: clock must be > 0");
}

enum class TensorRole : std::size_t { q, k, v, weights, activations, outputs };
inline constexpr std::size_t kRoleCount = 6;

inline const char* role_name(TensorRole r) {
    static constexpr const char* names[] = {"q", "k", "v", "weights", "activations", "outputs"};
    return names[static_cast<std::size_t>(r)];
}

struct KernelStats {
    std::string name;
    std::uint64_t offchip_read_bytes = 0;
    std::uint64_t offchip_write_bytes = 0;
    std::uint64_t transactions = 0;
    std::uint64_t compute_cycles = 0;
    std::uint64_t memory_cycles = 0;
    std::uint64_t est_cycles = 0;
    std::uint64_t macs = 0;
    std::array<std::uint64_t, kRoleCount> bytes_by_role{};

    [[nodiscard]] std::uint64_t role(TensorRole r) const noexcept { return bytes_by_role[static_cast<std::size_t>(r)]; }
    [[nodiscard]] bool memory_bound() const noexcept { return memory_cycles > compute_cycles; }
    /// Operations (2 per MAC) per off-chip byte.
    [[nodiscard]] double arithmetic_intensity() const noexcept {
        const auto bytes = offchip_read_bytes + offchip_write_bytes;
        return bytes ? 2.0 * static_cast<double>(macs) / static_cast<double>(bytes) : 0.0;
    }

    KernelStats& operator+=(const KernelStats& o) noexcept {
        offchip_read_bytes += o.offchip_read_bytes;
        offchip_write_bytes += o.offchip_write_bytes;
        transactions += o.transactions;
        compute_cycles += o.compute_cycles;
        memory_cycles += o.memory_cycles;
        est_cycles += o.est_cycles;
        macs += o.macs;
        for (std::size_t i = 0; i < kRoleCount; ++i) bytes_by_role[i] += o.bytes_by_role[i];
        return *this;
    }

    bool operator==(const KernelStats&) const = default;
};

struct SimStats {
    std::vector<KernelStats> kernels;
    KernelStats total;
    double gops_est = 0.0;

    bool operator==(const SimStats&) const = default;
};

namespace detail {
inline std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) noexcept { return (a + b - 1) / b; }

inline void read(KernelStats& k, TensorRole r, std::uint64_t bytes) noexcept {
    k.offchip_read_bytes += bytes;
    k.bytes_by_role[static_cast<std::size_t>(r)] += bytes;
}

inline void write(KernelStats& k, std::uint64_t bytes) noexcept {
    k.offchip_write_bytes += bytes;
    k.bytes_by_role[static_cast<std::size_t>(TensorRole::outputs)] += bytes;
}

/// Fills transactions, memory cycles and the kernel latency estimate.
inline void finalize(KernelStats& k, const SimConfig& s) {
    k.transactions = ceil_div(k.offchip_read_bytes, s.tile_bytes) + ceil_div(k.offchip_write_bytes, s.tile_bytes);
    const double mem = static_cast<double>(k.offchip_read_bytes + k.offchip_write_bytes) / s.offchip_bytes_per_cycle;
    k.memory_cycles = static_cast<std::uint64_t>(std::ceil(mem));
    k.est_cycles = s.double_buffer ? std::max(k.compute_cycles, k.memory_cycles) : k.compute_cycles + k.memory_cycles;
}

inline SimStats collect(std::vector<KernelStats> kernels, const SimConfig& s) {
    SimStats st;
    st.kernels = std::move(kernels);
    st.total.name = "total";
    for (const auto& k : st.kernels) st.total += k;
    if (st.total.est_cycles)
        st.gops_est = 2.0 * static_cast<double>(st.total.macs) * s.clock_mhz * 1e-3 /
                      static_cast<double>(st.total.est_cycles);
    return st;
}
}  // namespace detail

/// Attention kernel for all heads. Query rows are partitioned across PEs; K and V
/// are streamed once per head and broadcast to every PE (or, with the naive
/// policy, fetched once per PE). Softmax passes 2 and 3 are pipelined behind the
/// QK^T / PV work, costing only a fill latency; the pass-3 rescale is capped by t_s.
inline KernelStats sim_attention_kernel(const ModelConfig& cfg, const SimConfig& s, std::string name = "attention") {
    validate(cfg);
    validate(s);
    const std::uint64_t n = cfg.n_tokens, dh = cfg.head_dim, h = cfg.n_heads;
    const std::uint64_t head_bytes = n * dh * s.bytes_per_activation;
    const std::uint64_t fetches = s.attention_k_policy == AttentionKPolicy::broadcast ? 1 : s.n_pe;
    KernelStats k;
    k.name = std::move(name);
    for (std::uint64_t i = 0; i < h; ++i) {
        detail::read(k, TensorRole::q, head_bytes);
        detail::read(k, TensorRole::k, head_bytes * fetches);
        detail::read(k, TensorRole::v, head_bytes * fetches);
        detail::write(k, head_bytes);
    }
    k.macs = 2 * h * n * n * dh;
    const std::uint64_t rows_per_pe = detail::ceil_div(n, s.n_pe);
    const std::uint64_t mac_cycles = detail::ceil_div(h * rows_per_pe * n * dh * 2, s.macs_per_unit_per_cycle);
    const std::uint64_t rescale_cycles = h * rows_per_pe * detail::ceil_div(dh, s.t_s);
    k.compute_cycles = std::max(mac_cycles, rescale_cycles) + s.softmax_fill_latency;
    detail::finalize(k, s);
    return k;
}

inline SimStats sim_attention(const ModelConfig& cfg, const SimConfig& s) {
    return detail::collect({sim_attention_kernel(cfg, s)}, s);
}

/// Token counts routed to each expert of one MoE layer.
struct ExpertAssignment {
    std::vector<std::size_t> tokens_per_expert;
    std::size_t top_k = 1;
};

/// Unified dense/sparse linear kernel. The round-robin router hands the first
/// n_l pending tokens of a group to the CUs and streams the group's weight once
/// for them, so a group of n tokens costs ceil(n / n_l) weight passes. The
/// per-patch baseline refetches the full weight for every token. Preloaded
/// weights are read once per used weight matrix.
inline KernelStats sim_linear_kernel(std::size_t tokens, std::size_t in_dim, std::size_t out_dim, const SimConfig& s,
                                     const std::optional<ExpertAssignment>& assignment = std::nullopt,
                                     std::string name = "linear") {
    validate(s);
    if (tokens < 1 || in_dim < 1 || out_dim < 1) throw std::invalid_argument("sim_linear: dimensions must be >= 1");
    std::vector<std::uint64_t> groups;
    if (assignment) {
        std::uint64_t sum = 0;
        for (auto g : assignment->tokens_per_expert) sum += g;
        if (sum != static_cast<std::uint64_t>(tokens) * assignment->top_k)
            throw std::invalid_argument("sim_linear: routed token count must equal tokens * top_k");
        groups.assign(assignment->tokens_per_expert.begin(), assignment->tokens_per_expert.end());
    } else {
        groups = {tokens};
    }
    const std::uint64_t w_bytes = static_cast<std::uint64_t>(in_dim) * out_dim * s.bytes_per_weight;
    const std::uint64_t per_token_macs = static_cast<std::uint64_t>(in_dim) * out_dim;

    WeightMode mode = s.weight_mode;
    if (mode == WeightMode::preload) {
        std::uint64_t used = 0;
        for (auto g : groups) used += g ? w_bytes : 0;
        if (used > s.onchip_capacity_bytes) {
            if (!s.preload_fallback)
                throw std::invalid_argument("sim_linear: preloaded weights (" + std::to_string(used) +
                                            " B) exceed on-chip capacity");
            mode = WeightMode::stream;
        }
    }

    KernelStats k;
    k.name = std::move(name);
    for (auto g : groups) {
        if (g == 0) continue;
        std::uint64_t passes = 1;
        if (mode == WeightMode::stream)
            passes = s.linear_fetch_policy == LinearFetchPolicy::rr_router ? detail::ceil_div(g, s.n_l) : g;
        detail::read(k, TensorRole::weights, passes * w_bytes);
        detail::read(k, TensorRole::activations, g * in_dim * s.bytes_per_activation);
        detail::write(k, g * out_dim * s.bytes_per_activation);
        k.macs += g * per_token_macs;
        k.compute_cycles += detail::ceil_div(g, s.n_l) * detail::ceil_div(per_token_macs, s.macs_per_unit_per_cycle);
    }
    detail::finalize(k, s);
    return k;
}

inline SimStats sim_linear(std::size_t tokens, std::size_t in_dim, std::size_t out_dim, const SimConfig& s,
                           const std::optional<ExpertAssignment>& assignment = std::nullopt) {
    return detail::collect({sim_linear_kernel(tokens, in_dim, out_dim, s, assignment)}, s);
}

/// Tokens routed to each expert; validates the decisions against the config.
inline ExpertAssignment assignment_from_gates(std::span<const GateDecision> gates, const ModelConfig& cfg) {
    if (gates.size() != cfg.n_tokens) throw std::invalid_argument("gate trace: token count differs from config");
    ExpertAssignment a{std::vector<std::size_t>(cfg.n_experts, 0), cfg.top_k};
    for (const auto& g : gates) {
        if (g.experts.size() != cfg.top_k) throw std::invalid_argument("gate trace: decision is not top-k");
        std::set<std::size_t> seen;
        for (auto e : g.experts) {
            if (e >= cfg.n_experts) throw std::invalid_argument("gate trace: expert index out of range");
            if (!seen.insert(e).second) throw std::invalid_argument("gate trace: repeated expert in one decision");
            ++a.tokens_per_expert[e];
        }
    }
    return a;
}

/// Whole-model schedule on the reuse architecture: blocks run one after another,
/// each as attention + qkv/o projections + MLP fc1/fc2 (or gate + sparse expert fc1/fc2).
inline SimStats sim_model(const ModelConfig& cfg, const GateTrace& gates, const SimConfig& s) {
    validate(cfg);
    validate(s);
    if (gates.size() != cfg.n_blocks) throw std::invalid_argument("sim_model: gate trace block count mismatch");
    const std::size_t n = cfg.n_tokens, d = cfg.dim, hid = cfg.hidden();
    std::vector<KernelStats> ks;
    for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
        const std::string p = "b" + std::to_string(i) + ".";
        ks.push_back(sim_linear_kernel(n, d, 3 * d, s, std::nullopt, p + "qkv"));
        ks.push_back(sim_attention_kernel(cfg, s, p + "attention"));
        ks.push_back(sim_linear_kernel(n, d, d, s, std::nullopt, p + "o"));
        if (cfg.is_moe(i)) {
            const ExpertAssignment a = assignment_from_gates(gates[i], cfg);
            ks.push_back(sim_linear_kernel(n, d, cfg.n_experts, s, std::nullopt, p + "gate"));
            ks.push_back(sim_linear_kernel(n, d, hid, s, a, p + "experts.fc1"));
            ks.push_back(sim_linear_kernel(n, hid, d, s, a, p + "experts.fc2"));
        } else {
            if (!gates[i].empty()) throw std::invalid_argument("sim_model: gate decisions given for a dense block");
            ks.push_back(sim_linear_kernel(n, d, hid, s, std::nullopt, p + "fc1"));
            ks.push_back(sim_linear_kernel(n, hid, d, s, std::nullopt, p + "fc2"));
        }
    }
    return detail::collect(std::move(ks), s);
}

}  // namespace coqmoe
