// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "coqmoe/numerics.hpp"

using namespace coqmoe;

namespace {

// Plain triple loop, kept independent of matmul's loop order.
Matrix triple_loop(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            c(i, j) = s;
        }
    return c;
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
    EXPECT_EQ(matmul(identity(2), m), m);
    EXPECT_EQ(matmul(m, identity(2)), m);
}

TEST(Matmul, RowTimesColumn) {
    const Matrix r = matmul(Matrix::from_rows({{1, 2}}), Matrix::from_rows({{3}, {4}}));
    ASSERT_EQ(r.rows(), 1u);
    ASSERT_EQ(r.cols(), 1u);
    EXPECT_EQ(r(0, 0), 11.0);
}

TEST(Matmul, MatchesTripleLoopOnRandomInput) {
    Rng rng(7);
    const Matrix a = random_normal(5, 7, rng);
    const Matrix b = random_normal(7, 3, rng);
    EXPECT_EQ(max_abs_diff(matmul(a, b), triple_loop(a, b)), 0.0);
}

TEST(Matmul, ExactOnIntegerValuedInputsUpTo16) {
    Rng rng(11);
    for (std::size_t n : {1u, 3u, 8u, 16u}) {
        Matrix a(n, n), b(n, n);
        for (double& v : a.data()) v = static_cast<double>(rng.below(201)) - 100.0;
        for (double& v : b.data()) v = static_cast<double>(rng.below(201)) - 100.0;
        EXPECT_EQ(matmul(a, b), triple_loop(a, b)) << "n=" << n;
    }
}

TEST(Matmul, DimensionMismatchThrows) {
    EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), std::invalid_argument);
}

TEST(LayerNorm, ConstantRowGivesZero) {
    const Matrix y = layernorm(Matrix::from_rows({{1, 1, 1}}), Vector{1, 1, 1}, Vector{0, 0, 0});
    for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, TwoElementSymmetry) {
    const Matrix y = layernorm(Matrix::from_rows({{0, 2}}), Vector{1, 1}, Vector{0, 0}, 1e-15);
    EXPECT_NEAR(y(0, 0), -1.0, 1e-12);
    EXPECT_NEAR(y(0, 1), 1.0, 1e-12);
}

TEST(LayerNorm, AffineExample) {
    const Matrix y = layernorm(Matrix::from_rows({{1, 2, 3}}), Vector{2, 2, 2}, Vector{1, 1, 1}, 1e-12);
    const double k = 2.0 * std::sqrt(1.5);
    EXPECT_NEAR(y(0, 0), 1.0 - k, 1e-9);
    EXPECT_NEAR(y(0, 1), 1.0, 1e-12);
    EXPECT_NEAR(y(0, 2), 1.0 + k, 1e-9);
    EXPECT_NEAR(y(0, 0), -1.449, 1e-3);
    EXPECT_NEAR(y(0, 2), 3.449, 1e-3);
}

TEST(LayerNorm, RowsHaveZeroMeanAndUnitVariance) {
    Rng rng(3);
    const Matrix x = random_normal(6, 32, rng, 4.0);
    const Matrix y = layernorm(x, Vector(32, 1.0), Vector(32, 0.0), 1e-15);
    for (std::size_t r = 0; r < y.rows(); ++r) {
        const auto row = y.row(r);
        const double mean = std::accumulate(row.begin(), row.end(), 0.0) / 32.0;
        double var = 0.0;
        for (double v : row) var += (v - mean) * (v - mean);
        EXPECT_LE(std::abs(mean), 1e-9);
        EXPECT_NEAR(var / 32.0, 1.0, 1e-6);
    }
}

TEST(LayerNorm, LengthMismatchThrows) {
    EXPECT_THROW(layernorm(Matrix(1, 3), Vector{1, 1}, Vector{0, 0, 0}), std::invalid_argument);
    EXPECT_THROW(layernorm(Matrix(1, 3), Vector{1, 1, 1}, Vector{0}), std::invalid_argument);
}

TEST(Softmax, EqualInputs) {
    const Vector p = softmax_row(Vector{0, 0});
    EXPECT_EQ(p[0], 0.5);
    EXPECT_EQ(p[1], 0.5);
}

TEST(Softmax, LargeGapIsStable) {
    const Vector p = softmax_row(Vector{1000, 0});
    EXPECT_EQ(p[0], 1.0);
    EXPECT_LE(p[1], 1e-300);
}

TEST(Softmax, OneTwoThree) {
    const Vector p = softmax_row(Vector{1, 2, 3});
    EXPECT_NEAR(p[0], 0.09003, 1e-5);
    EXPECT_NEAR(p[1], 0.24473, 1e-5);
    EXPECT_NEAR(p[2], 0.66524, 1e-5);
}

TEST(Softmax, SumsToOneAndIsPermutationEquivariant) {
    Rng rng(5);
    for (int t = 0; t < 50; ++t) {
        Vector x(9);
        for (double& v : x) v = rng.normal(0.0, 5.0);
        const Vector p = softmax_row(x);
        EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
        Vector xr(x.rbegin(), x.rend());
        const Vector pr = softmax_row(xr);
        for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(pr[i], p[x.size() - 1 - i]);
    }
}

TEST(Softmax, EmptyRowThrows) { EXPECT_THROW(softmax_row(Vector{}), std::invalid_argument); }

TEST(Gelu, KnownValues) {
    EXPECT_EQ(gelu(0.0), 0.0);
    EXPECT_NEAR(gelu(10.0), 10.0, 1e-9);
    EXPECT_NEAR(gelu(1.0), 0.841345, 1e-6);
    EXPECT_NEAR(gelu(-1.0), -0.158655, 1e-6);
}

TEST(RngTest, SplitMix64ReferenceSequence) {
    // First outputs of SplitMix64 seeded with 0, as published with the algorithm.
    Rng r(0);
    EXPECT_EQ(r.next_u64(), 0xE220A8397B1DCDAFULL);
    EXPECT_EQ(r.next_u64(), 0x6E789E6AA1B965F4ULL);
    EXPECT_EQ(r.next_u64(), 0x06C45D188009454FULL);
}

TEST(RngTest, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
    Rng c(42), d(42);
    for (int i = 0; i < 100; ++i) EXPECT_EQ(c.normal(), d.normal());
}

TEST(RngTest, ForksAreDistinctAndStable) {
    const Rng root(9);
    EXPECT_NE(root.fork(1).seed(), root.fork(2).seed());
    EXPECT_EQ(root.fork(1).seed(), Rng(9).fork(1).seed());
}

TEST(RngTest, UniformRangeAndNormalMoments) {
    Rng r(123);
    double sum = 0.0, sq = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        const double z = r.normal();
        sum += z;
        sq += z * z;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.05);
    EXPECT_NEAR(sq / n, 1.0, 0.05);
}

TEST(Metrics, Basics) {
    const Matrix a = Matrix::from_rows({{1, 2}, {3, 4}});
    const Matrix b = Matrix::from_rows({{1, 2}, {3, 6}});
    EXPECT_EQ(max_abs_diff(a, b), 2.0);
    EXPECT_EQ(mean_squared_error(a, b), 1.0);
    EXPECT_TRUE(all_finite(a));
    Matrix c = a;
    c(0, 0) = std::nan("");
    EXPECT_FALSE(all_finite(c));
}
