// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace coqmoe {

using Vector = std::vector<double>;

/// Dense row-major 2-D array. Used for real activations/weights (`Matrix`)
/// as well as integer code tensors (`IntMatrix`) and accumulators (`AccMatrix`).
template <typename T>
class Tensor2D {
public:
    using value_type = T;

    Tensor2D() = default;
    Tensor2D(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Tensor2D(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw std::invalid_argument("Tensor2D: data length " + std::to_string(data_.size()) +
                                        " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    static Tensor2D from_rows(std::initializer_list<std::initializer_list<T>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r ? rows.begin()->size() : 0;
        Tensor2D out(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw std::invalid_argument("Tensor2D::from_rows: ragged rows");
            std::copy(row.begin(), row.end(), out.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
            ++i;
        }
        return out;
    }

    [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
    [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
    [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    [[nodiscard]] const std::vector<T>& data() const noexcept { return data_; }
    std::vector<T>& data() noexcept { return data_; }

    bool operator==(const Tensor2D&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = Tensor2D<double>;
using IntMatrix = Tensor2D<std::int32_t>;
using AccMatrix = Tensor2D<std::int64_t>;

inline Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

inline bool all_finite(const Matrix& m) {
    return std::all_of(m.data().begin(), m.data().end(), [](double v) { return std::isfinite(v); });
}

inline Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) t(c, r) = a(r, c);
    return t;
}

/// Columns [first, first + count) of `a`.
template <typename T>
Tensor2D<T> column_slice(const Tensor2D<T>& a, std::size_t first, std::size_t count) {
    if (first + count > a.cols()) throw std::invalid_argument("column_slice: out of range");
    Tensor2D<T> out(a.rows(), count);
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = a(r, first + c);
    return out;
}

template <typename T>
void set_column_slice(Tensor2D<T>& dst, std::size_t first, const Tensor2D<T>& src) {
    if (dst.rows() != src.rows() || first + src.cols() > dst.cols())
        throw std::invalid_argument("set_column_slice: shape mismatch");
    for (std::size_t r = 0; r < src.rows(); ++r)
        for (std::size_t c = 0; c < src.cols(); ++c) dst(r, first + c) = src(r, c);
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ (" + std::to_string(a.cols()) +
                                    " vs " + std::to_string(b.rows()) + ")");
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto o = out.row(i);
        for (std::size_t p = 0; p < a.cols(); ++p) {
            const double av = a(i, p);
            const auto br = b.row(p);
            for (std::size_t j = 0; j < b.cols(); ++j) o[j] += av * br[j];
        }
    }
    return out;
}

/// Adds `bias` to every row in place.
inline void add_row_bias(Matrix& m, std::span<const double> bias) {
    if (bias.size() != m.cols()) throw std::invalid_argument("add_row_bias: length mismatch");
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) row[c] += bias[c];
    }
}

inline Matrix affine(const Matrix& x, const Matrix& w, std::span<const double> b) {
    Matrix y = matmul(x, w);
    add_row_bias(y, b);
    return y;
}

inline constexpr double kLayerNormEps = 1e-6;

/// Per-row normalization to zero mean / unit variance followed by the
/// elementwise affine `gamma * xhat + beta`.
inline Matrix layernorm(const Matrix& x, std::span<const double> gamma, std::span<const double> beta,
                        double eps = kLayerNormEps) {
    if (gamma.size() != x.cols() || beta.size() != x.cols())
        throw std::invalid_argument("layernorm: gamma/beta length must equal column count");
    if (!(eps > 0.0)) throw std::invalid_argument("layernorm: eps must be positive");
    Matrix out(x.rows(), x.cols());
    const double n = static_cast<double>(x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto row = x.row(r);
        double mean = 0.0;
        for (double v : row) mean += v;
        mean /= n;
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        var /= n;
        const double inv = 1.0 / std::sqrt(var + eps);
        auto o = out.row(r);
        for (std::size_t c = 0; c < x.cols(); ++c) o[c] = gamma[c] * ((row[c] - mean) * inv) + beta[c];
    }
    return out;
}

inline Vector softmax_row(std::span<const double> x) {
    if (x.empty()) throw std::invalid_argument("softmax_row: empty row");
    const double m = *std::max_element(x.begin(), x.end());
    Vector out(x.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = std::exp(x[i] - m);
        sum += out[i];
    }
    for (double& v : out) v /= sum;
    return out;
}

/// Exact GELU, x * Phi(x).
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

/// Counter-based generator: output i is the SplitMix64 finalizer applied to
/// `seed + (i + 1) * 0x9E3779B97F4A7C15`. Identical to the SplitMix64 stream,
/// so the integer sequence is bit-identical on every platform. There is no
/// global state; independent streams come from `fork`.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : seed_(seed) {}

    [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }
    [[nodiscard]] std::uint64_t counter() const noexcept { return counter_; }

    static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    std::uint64_t next_u64() noexcept {
        ++counter_;
        return mix(seed_ + counter_ * kGamma);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) noexcept { return n ? next_u64() % n : 0; }

    /// Standard normal via Box-Muller (one variate per call, the sine branch is discarded).
    double normal() noexcept {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

    /// Independent stream derived from this generator's seed and `stream`.
    [[nodiscard]] Rng fork(std::uint64_t stream) const noexcept {
        return Rng(mix(seed_ ^ mix(stream + 0x632BE59BD9B4E019ULL)));
    }

private:
    static constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ULL;
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

inline Matrix random_normal(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.normal(0.0, stddev);
    return m;
}

inline Matrix random_uniform(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi) {
    Matrix m(rows, cols);
    for (double& v : m.data()) v = rng.uniform(lo, hi);
    return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

/// max |a - b| / max(max |b|, tiny); a scale-aware relative error for whole tensors.
inline double max_rel_diff(const Matrix& a, const Matrix& b) {
    double ref = 0.0;
    for (double v : b.data()) ref = std::max(ref, std::abs(v));
    return max_abs_diff(a, b) / std::max(ref, std::numeric_limits<double>::min());
}

inline double mean_squared_error(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument("mse: shape mismatch");
    if (a.empty()) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        s += d * d;
    }
    return s / static_cast<double>(a.size());
}

}  // namespace coqmoe
