// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "coqmoe/numerics.hpp"

namespace coqmoe {

enum class Granularity { per_layer, per_channel };
enum class ChannelAxis { row, col };

/// Uniform quantizer parameters. Per-channel scales index columns unless
/// `axis` says otherwise; zero points are empty for symmetric quantizers.
struct QuantParams {
    int bits = 8;
    bool symmetric = true;
    Granularity granularity = Granularity::per_layer;
    ChannelAxis axis = ChannelAxis::col;
    Vector scales{1.0};
    std::vector<std::int32_t> zero_points;

    [[nodiscard]] std::int64_t qmin() const noexcept { return symmetric ? -(std::int64_t{1} << (bits - 1)) : 0; }
    [[nodiscard]] std::int64_t qmax() const noexcept {
        return symmetric ? (std::int64_t{1} << (bits - 1)) - 1 : (std::int64_t{1} << bits) - 1;
    }
    [[nodiscard]] double scale(std::size_t ch) const noexcept {
        return granularity == Granularity::per_layer ? scales.front() : scales[ch];
    }
    [[nodiscard]] std::int32_t zero_point(std::size_t ch) const noexcept {
        if (symmetric) return 0;
        return granularity == Granularity::per_layer ? zero_points.front() : zero_points[ch];
    }
    [[nodiscard]] std::size_t channels() const noexcept { return scales.size(); }

    bool operator==(const QuantParams&) const = default;
};

inline constexpr double kScaleFloor = 1e-8;

inline void validate(const QuantParams& p) {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid QuantParams: " + m); };
    if (p.bits < 2 || p.bits > 16) fail("bit width must be in [2, 16]");
    if (p.scales.empty()) fail("no scales");
    if (p.granularity == Granularity::per_layer && p.scales.size() != 1) fail("per-layer params need one scale");
    for (double s : p.scales)
        if (!(s > 0.0) || !std::isfinite(s)) fail("scales must be positive and finite");
    if (p.symmetric) {
        if (!p.zero_points.empty()) fail("symmetric params carry no zero points");
    } else {
        if (p.zero_points.size() != p.scales.size()) fail("one zero point per scale required");
        for (auto z : p.zero_points)
            if (z < 0 || z > p.qmax()) fail("zero point outside [0, 2^b - 1]");
    }
}

/// Round half to even, independent of the floating-point environment.
inline double round_half_even(double x) noexcept {
    const double f = std::floor(x);
    const double frac = x - f;
    if (frac > 0.5) return f + 1.0;
    if (frac < 0.5) return f;
    return std::fmod(f, 2.0) == 0.0 ? f : f + 1.0;
}

inline std::int64_t clip_round(double v, std::int64_t lo, std::int64_t hi) noexcept {
    const double r = round_half_even(v);
    if (!(r > static_cast<double>(lo))) return lo;  // also catches NaN
    if (r >= static_cast<double>(hi)) return hi;
    return static_cast<std::int64_t>(r);
}

/// Integer codes plus the parameters that govern them.
struct QTensor {
    IntMatrix codes;
    QuantParams params;
};

inline void check(const QTensor& q) {
    validate(q.params);
    const std::size_t ch = q.params.axis == ChannelAxis::col ? q.codes.cols() : q.codes.rows();
    if (q.params.granularity == Granularity::per_channel && q.params.channels() != ch)
        throw std::invalid_argument("QTensor: channel count differs from params");
    for (auto c : q.codes.data())
        if (c < q.params.qmin() || c > q.params.qmax()) throw std::invalid_argument("QTensor: code out of range");
}

/// Min-max calibration over `samples` (channels are columns).
/// Asymmetric: s = (max - min) / (2^b - 1), z = clip(round(-min / s)).
/// Symmetric:  s = max|x| / (2^(b-1) - 1).
/// Scales are floored at kScaleFloor so constant channels stay well defined.
inline QuantParams calibrate(std::span<const Matrix> samples, int bits, bool symmetric, Granularity granularity) {
    if (samples.empty()) throw std::invalid_argument("calibrate: empty sample set");
    const std::size_t cols = samples.front().cols();
    for (const auto& m : samples)
        if (m.cols() != cols) throw std::invalid_argument("calibrate: inconsistent sample widths");
    const std::size_t nch = granularity == Granularity::per_channel ? cols : 1;
    Vector lo(nch, std::numeric_limits<double>::infinity());
    Vector hi(nch, -std::numeric_limits<double>::infinity());
    bool any = false;
    for (const auto& m : samples)
        for (std::size_t r = 0; r < m.rows(); ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t ch = nch == 1 ? 0 : c;
                lo[ch] = std::min(lo[ch], m(r, c));
                hi[ch] = std::max(hi[ch], m(r, c));
                any = true;
            }
    if (!any) throw std::invalid_argument("calibrate: samples contain no values");

    QuantParams p;
    p.bits = bits;
    p.symmetric = symmetric;
    p.granularity = granularity;
    p.scales.assign(nch, 0.0);
    if (!symmetric) p.zero_points.assign(nch, 0);
    for (std::size_t ch = 0; ch < nch; ++ch) {
        if (symmetric) {
            const double amax = std::max(std::abs(lo[ch]), std::abs(hi[ch]));
            p.scales[ch] = std::max(amax / static_cast<double>(p.qmax()), kScaleFloor);
        } else {
            // The grid always contains zero, so a one-sided channel keeps z in range without clipping its data.
            const double l = std::min(lo[ch], 0.0), h = std::max(hi[ch], 0.0);
            const double s = std::max((h - l) / static_cast<double>(p.qmax()), kScaleFloor);
            p.scales[ch] = s;
            p.zero_points[ch] = static_cast<std::int32_t>(clip_round(-l / s, 0, p.qmax()));
        }
    }
    validate(p);
    return p;
}

inline QuantParams calibrate(const Matrix& sample, int bits, bool symmetric, Granularity granularity) {
    return calibrate(std::span<const Matrix>(&sample, 1), bits, symmetric, granularity);
}

/// X_q = clip(round(X / s) + z) with round-half-to-even.
inline QTensor quantize(const Matrix& x, const QuantParams& p) {
    validate(p);
    const bool per_ch = p.granularity == Granularity::per_channel;
    const bool by_col = p.axis == ChannelAxis::col;
    if (per_ch && p.channels() != (by_col ? x.cols() : x.rows()))
        throw std::invalid_argument("quantize: channel count differs from params");
    QTensor q{IntMatrix(x.rows(), x.cols()), p};
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const std::size_t ch = by_col ? c : r;
            const double v = x(r, c) / p.scale(ch) + static_cast<double>(p.zero_point(ch));
            q.codes(r, c) = static_cast<std::int32_t>(clip_round(v, p.qmin(), p.qmax()));
        }
    return q;
}

/// X_hat = s * (X_q - z).
inline Matrix dequantize(const QTensor& q) {
    const auto& p = q.params;
    const bool by_col = p.axis == ChannelAxis::col;
    Matrix out(q.codes.rows(), q.codes.cols());
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) {
            const std::size_t ch = by_col ? c : r;
            out(r, c) = p.scale(ch) * static_cast<double>(q.codes(r, c) - p.zero_point(ch));
        }
    return out;
}

/// Quantize-dequantize in one step.
inline Matrix fake_quantize(const Matrix& x, const QuantParams& p) { return dequantize(quantize(x, p)); }

/// Integer product with one scale per output column (a single repeated scale
/// when the weight is per-layer).
struct IntMatmul {
    AccMatrix acc;
    Vector scale;  // s_x * s_w[c]
};

/// Accumulator width implied by the operand widths: 32-bit for codes of at
/// most 8 bits, 64-bit otherwise.
inline int accumulator_bits(int x_bits, int w_bits) noexcept { return (x_bits <= 8 && w_bits <= 8) ? 32 : 64; }

/// Largest inner dimension whose worst-case sum fits the accumulator with two
/// bits of headroom for the bias (2^15 for int8 x int8 into int32).
inline std::size_t max_inner_dim(int x_bits, int w_bits) noexcept {
    const int e = accumulator_bits(x_bits, w_bits) - 1 - (x_bits - 1) - (w_bits - 1) - 2;
    return e >= 62 ? std::numeric_limits<std::size_t>::max() : (std::size_t{1} << e);
}

/// acc = X_q * W_q in exact integer arithmetic; X * W ~= acc * s_x * s_w.
/// X must be symmetric per-layer; W symmetric per-layer or per output column.
inline IntMatmul int_matmul(const QTensor& xq, const QTensor& wq) {
    const auto& px = xq.params;
    const auto& pw = wq.params;
    if (!px.symmetric || !pw.symmetric) throw std::invalid_argument("int_matmul: operands must be symmetric");
    if (px.granularity != Granularity::per_layer)
        throw std::invalid_argument("int_matmul: activations must be per-layer");
    if (pw.granularity == Granularity::per_channel && pw.axis != ChannelAxis::col)
        throw std::invalid_argument("int_matmul: per-channel weights must use the output-column axis");
    const std::size_t n = xq.codes.rows(), inner = xq.codes.cols(), m = wq.codes.cols();
    if (inner != wq.codes.rows()) throw std::invalid_argument("int_matmul: inner dimensions differ");
    if (inner > max_inner_dim(px.bits, pw.bits))
        throw std::overflow_error("int_matmul: inner dimension " + std::to_string(inner) +
                                  " exceeds accumulator guard " + std::to_string(max_inner_dim(px.bits, pw.bits)));
    IntMatmul out{AccMatrix(n, m), Vector(m)};
    for (std::size_t i = 0; i < n; ++i) {
        auto o = out.acc.row(i);
        for (std::size_t p = 0; p < inner; ++p) {
            const std::int64_t a = xq.codes(i, p);
            if (a == 0) continue;
            const auto wr = wq.codes.row(p);
            for (std::size_t j = 0; j < m; ++j) o[j] += a * wr[j];
        }
    }
    for (std::size_t j = 0; j < m; ++j) out.scale[j] = px.scale(0) * pw.scale(j);
    return out;
}

/// Bias as integers at the accumulator scale s_x * s_w[c]. Fails rather than
/// saturating if a value does not fit the accumulator width.
inline std::vector<std::int64_t> quantize_bias(std::span<const double> bias, std::span<const double> acc_scale,
                                               int acc_bits) {
    if (bias.size() != acc_scale.size()) throw std::invalid_argument("quantize_bias: length mismatch");
    const double lim = acc_bits >= 64 ? 0x1.0p62 : std::ldexp(1.0, acc_bits - 1) - 1.0;
    std::vector<std::int64_t> out(bias.size());
    for (std::size_t c = 0; c < bias.size(); ++c) {
        const double v = round_half_even(bias[c] / acc_scale[c]);
        if (!(std::abs(v) <= lim))
            throw std::overflow_error("quantize_bias: bias " + std::to_string(c) + " does not fit the accumulator");
        out[c] = static_cast<std::int64_t>(v);
    }
    return out;
}

inline void add_bias(AccMatrix& acc, std::span<const std::int64_t> bias) {
    if (bias.size() != acc.cols()) throw std::invalid_argument("add_bias: length mismatch");
    for (std::size_t r = 0; r < acc.rows(); ++r) {
        auto row = acc.row(r);
        for (std::size_t c = 0; c < acc.cols(); ++c) row[c] += bias[c];
    }
}

/// Accumulator -> next layer's codes: round(acc * s_x * s_w / s_out), clipped.
inline QTensor requantize(const AccMatrix& acc, std::span<const double> acc_scale, const QuantParams& out) {
    validate(out);
    if (!out.symmetric || out.granularity != Granularity::per_layer)
        throw std::invalid_argument("requantize: output params must be per-layer symmetric");
    if (acc_scale.size() != acc.cols()) throw std::invalid_argument("requantize: scale length mismatch");
    QTensor q{IntMatrix(acc.rows(), acc.cols()), out};
    for (std::size_t c = 0; c < acc.cols(); ++c) {
        const double m = acc_scale[c] / out.scale(0);
        for (std::size_t r = 0; r < acc.rows(); ++r)
            q.codes(r, c) = static_cast<std::int32_t>(
                clip_round(static_cast<double>(acc(r, c)) * m, out.qmin(), out.qmax()));
    }
    return q;
}

/// acc * scale as reals (no output quantizer).
inline Matrix dequantize_acc(const AccMatrix& acc, std::span<const double> acc_scale) {
    Matrix out(acc.rows(), acc.cols());
    for (std::size_t r = 0; r < acc.rows(); ++r)
        for (std::size_t c = 0; c < acc.cols(); ++c) out(r, c) = static_cast<double>(acc(r, c)) * acc_scale[c];
    return out;
}

/// Evaluates the four-term asymmetric product
///   s_x s_w (X_q W_q - z_x 1 W_q - z_w X_q 1 + K z_x z_w)
/// with the partial terms in integers. X is per-layer; W per-layer or per output column.
inline Matrix asym_matmul_expansion(const QTensor& xq, const QTensor& wq) {
    const auto& px = xq.params;
    const auto& pw = wq.params;
    if (px.symmetric || pw.symmetric) throw std::invalid_argument("asym_matmul_expansion: operands must be asymmetric");
    if (px.granularity != Granularity::per_layer)
        throw std::invalid_argument("asym_matmul_expansion: activations must be per-layer");
    if (pw.granularity == Granularity::per_channel && pw.axis != ChannelAxis::col)
        throw std::invalid_argument("asym_matmul_expansion: per-channel weights must use the column axis");
    const std::size_t n = xq.codes.rows(), inner = xq.codes.cols(), m = wq.codes.cols();
    if (inner != wq.codes.rows()) throw std::invalid_argument("asym_matmul_expansion: inner dimensions differ");

    const std::int64_t zx = px.zero_point(0);
    std::vector<std::int64_t> x_rowsum(n, 0), w_colsum(m, 0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t p = 0; p < inner; ++p) x_rowsum[i] += xq.codes(i, p);
    for (std::size_t p = 0; p < inner; ++p)
        for (std::size_t j = 0; j < m; ++j) w_colsum[j] += wq.codes(p, j);

    Matrix out(n, m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            std::int64_t xw = 0;
            for (std::size_t p = 0; p < inner; ++p)
                xw += static_cast<std::int64_t>(xq.codes(i, p)) * wq.codes(p, j);
            const std::int64_t zw = pw.zero_point(j);
            const std::int64_t total = xw - zx * w_colsum[j] - zw * x_rowsum[i] +
                                       static_cast<std::int64_t>(inner) * zx * zw;
            out(i, j) = px.scale(0) * pw.scale(j) * static_cast<double>(total);
        }
    return out;
}

}  // namespace coqmoe
