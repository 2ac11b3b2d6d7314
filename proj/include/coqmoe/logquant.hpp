// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coqmoe/numerics.hpp"
#include "coqmoe/quant.hpp"

namespace coqmoe {

__extension__ using int128 = __int128;

inline constexpr int kDefaultAttnBits = 4;

/// Codes of the post-softmax log-sqrt(2) quantizer. The scale is fixed at 1:
/// a code c stands for the value 2^(-c/2).
struct LogQTensor {
    IntMatrix codes;
    int bits = kDefaultAttnBits;

    [[nodiscard]] std::int32_t max_code() const noexcept { return (std::int32_t{1} << bits) - 1; }
};

/// clip(round(-2 log2 a), 0, 2^b - 1). Zero maps to the largest code.
inline std::int32_t log_sqrt2_code(double a, int bits) {
    if (bits < 1 || bits > 16) throw std::invalid_argument("log_sqrt2_code: bit width must be in [1, 16]");
    if (!(a >= 0.0 && a <= 1.0)) throw std::invalid_argument("log_sqrt2_code: value outside [0, 1]");
    const std::int64_t max_code = (std::int64_t{1} << bits) - 1;
    if (a == 0.0) return static_cast<std::int32_t>(max_code);
    return static_cast<std::int32_t>(clip_round(-2.0 * std::log2(a), 0, max_code));
}

inline LogQTensor log_sqrt2_quantize(const Matrix& a, int bits = kDefaultAttnBits) {
    LogQTensor q{IntMatrix(a.rows(), a.cols()), bits};
    for (std::size_t i = 0; i < a.size(); ++i) q.codes.data()[i] = log_sqrt2_code(a.data()[i], bits);
    return q;
}

/// Exact value (even + sqrt(2) * odd) / 2^frac_bits.
struct DyadicRoot2 {
    std::int64_t even = 0;
    std::int64_t odd = 0;
    int frac_bits = 0;

    [[nodiscard]] double value() const noexcept {
        // Extended precision keeps the final even/odd cancellation below double rounding.
        const long double v = static_cast<long double>(even) + std::numbers::sqrt2_v<long double> * static_cast<long double>(odd);
        return static_cast<double>(std::ldexp(v, -frac_bits));
    }

    /// (even + sqrt2 odd)^2 = (even^2 + 2 odd^2) + sqrt2 (2 even odd), over 2^(2 frac_bits).
    struct Square {
        int128 rational = 0;
        int128 root2 = 0;
        int denom_log2 = 0;
    };

    [[nodiscard]] Square squared() const noexcept {
        const int128 e = even, o = odd;
        return Square{e * e + 2 * o * o, 2 * e * o, 2 * frac_bits};
    }

    bool operator==(const DyadicRoot2&) const = default;
};

/// Fractional width that makes every shift of a b-bit code exact: ceil((2^b - 1) / 2).
inline int exact_frac_bits(int attn_bits) noexcept { return 1 << (attn_bits - 1); }

/// Shift count for a code: ceil(code / 2). Odd codes additionally carry sqrt(2).
inline int shift_count(std::int32_t code) noexcept { return (code + 1) / 2; }

/// Largest fractional width for which `len` products of `value_bits`-bit
/// operands stay inside a signed 64-bit accumulator.
inline int frac_bits_capacity(int value_bits, std::size_t len) noexcept {
    const int len_bits = len <= 1 ? 0 : static_cast<int>(std::bit_width(len - 1));
    return 62 - value_bits - len_bits;
}

/// Fractional width used by shift_av_row: the exact width when it fits the
/// accumulator, otherwise the accumulator capacity (deeper shifts then flush to zero).
inline int shift_frac_bits(int attn_bits, int value_bits, std::size_t len) noexcept {
    return std::min(exact_frac_bits(attn_bits), frac_bits_capacity(value_bits, len));
}

inline bool shift_is_exact(int attn_bits, int value_bits, std::size_t len) noexcept {
    return exact_frac_bits(attn_bits) <= frac_bits_capacity(value_bits, len);
}

/// 2^(-code/2) = 2^(-ceil(code/2)) * s', with s' = sqrt(2) for odd codes and 1 otherwise.
inline DyadicRoot2 shift_dequant(std::int32_t code, int bits = kDefaultAttnBits) {
    if (bits < 1 || bits > 6) throw std::invalid_argument("shift_dequant: exact form needs bit width in [1, 6]");
    if (code < 0 || code > (1 << bits) - 1) throw std::out_of_range("shift_dequant: code out of range");
    DyadicRoot2 d;
    d.frac_bits = exact_frac_bits(bits);
    const std::int64_t one = std::int64_t{1} << (d.frac_bits - shift_count(code));
    (code % 2 == 0 ? d.even : d.odd) = one;
    return d;
}

/// sum_i v[i] * 2^(-codes[i]/2) using only shifts and adds: each term is
/// v << F >> ceil(code/2), routed to the odd accumulator when the code is odd.
inline DyadicRoot2 shift_av_row(std::span<const std::int32_t> codes, std::span<const std::int32_t> v, int attn_bits,
                                int value_bits = 8) {
    if (codes.size() != v.size()) throw std::invalid_argument("shift_av_row: length mismatch");
    if (attn_bits < 1 || attn_bits > 16) throw std::invalid_argument("shift_av_row: bad attention bit width");
    if (value_bits < 1 || value_bits > 31) throw std::invalid_argument("shift_av_row: bad value bit width");
    const std::int32_t max_code = (std::int32_t{1} << attn_bits) - 1;
    const std::int64_t vlim = std::int64_t{1} << (value_bits - 1);
    DyadicRoot2 acc;
    acc.frac_bits = shift_frac_bits(attn_bits, value_bits, codes.size());
    if (acc.frac_bits < 0) throw std::overflow_error("shift_av_row: row too long for a 64-bit accumulator");
    for (std::size_t i = 0; i < codes.size(); ++i) {
        const std::int32_t c = codes[i];
        if (c < 0 || c > max_code) throw std::out_of_range("shift_av_row: code out of range");
        const std::int64_t vi = v[i];
        if (vi < -vlim || vi > vlim) throw std::out_of_range("shift_av_row: value exceeds declared bit width");
        const int sh = shift_count(c);
        if (sh > acc.frac_bits) continue;  // below accumulator resolution
        const std::int64_t term = (vi * (std::int64_t{1} << acc.frac_bits)) >> sh;
        (c % 2 == 0 ? acc.even : acc.odd) += term;
    }
    return acc;
}

/// Bookkeeping of one fused softmax row, consumed by the simulator and tests.
struct SoftmaxPipelineTrace {
    double row_max = 0.0;          // pass 1
    double denom = 0.0;            // pass 2, full-precision sum of exp(s - max)
    std::vector<std::int32_t> codes;
    std::size_t argmax = 0;
    std::size_t pass1_reads = 0;
    std::size_t pass2_exps = 0;
    std::size_t pass3_shift_adds = 0;
    std::size_t pass3_multiplies = 0;
    int frac_bits = 0;
};

struct FusedSoftmaxResult {
    Vector out;
    SoftmaxPipelineTrace trace;
};

/// Three-pass softmax fused with the attention-value product:
///   1. running max of the scores;
///   2. f = exp(s - max), l = sum f (full precision), f -> log-sqrt(2) codes;
///   3. shift-add each value column by the codes, then one multiply by recip(l) * s_v
///      per output channel (the sqrt(2) of odd codes is folded into that multiply).
/// `v_q` is N x Dh, one row per score.
inline FusedSoftmaxResult fused_softmax_av(std::span<const double> scores, const QTensor& v_q,
                                           int attn_bits = kDefaultAttnBits) {
    if (scores.empty()) throw std::invalid_argument("fused_softmax_av: empty row");
    if (v_q.codes.rows() != scores.size())
        throw std::invalid_argument("fused_softmax_av: value rows must equal score count");
    if (!v_q.params.symmetric || v_q.params.granularity != Granularity::per_layer)
        throw std::invalid_argument("fused_softmax_av: values must be per-layer symmetric");
    const std::size_t n = scores.size(), dh = v_q.codes.cols();
    FusedSoftmaxResult res;
    auto& tr = res.trace;

    tr.row_max = scores[0];
    for (std::size_t i = 1; i < n; ++i)
        if (scores[i] > tr.row_max) {
            tr.row_max = scores[i];
            tr.argmax = i;
        }
    tr.pass1_reads = n;

    tr.codes.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double f = std::exp(scores[i] - tr.row_max);
        tr.denom += f;
        tr.codes[i] = log_sqrt2_code(f, attn_bits);
    }
    tr.pass2_exps = n;

    res.out.resize(dh);
    std::vector<std::int32_t> col(n);
    const double k = v_q.params.scale(0) / tr.denom;
    for (std::size_t c = 0; c < dh; ++c) {
        for (std::size_t i = 0; i < n; ++i) col[i] = v_q.codes(i, c);
        const DyadicRoot2 acc = shift_av_row(tr.codes, col, attn_bits, v_q.params.bits);
        tr.frac_bits = acc.frac_bits;
        const double kf = std::ldexp(k, -acc.frac_bits);
        res.out[c] = static_cast<double>(acc.even) * kf + static_cast<double>(acc.odd) * (std::numbers::sqrt2 * kf);
    }
    tr.pass3_shift_adds = n * dh;
    tr.pass3_multiplies = dh;
    return res;
}

}  // namespace coqmoe
