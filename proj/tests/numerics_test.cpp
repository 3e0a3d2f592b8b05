#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "parvts/numerics.hpp"

using namespace parvts;

namespace {

Matrix naive_product(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

double norm(const Vector& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

}  // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    const Matrix eye{{1, 0}, {0, 1}};
    const Matrix b{{3, 4}, {5, 6}};
    EXPECT_EQ(matmul(eye, b), b);
}

TEST(Matmul, RowTimesColumn) {
    const Matrix a{{1, 2}};
    const Matrix b{{3}, {4}};
    EXPECT_EQ(matmul(a, b), (Matrix{{11}}));
}

TEST(Matmul, MatchesTripleLoop) {
    Rng rng(derive_seed(42, 0));
    const Matrix a = seeded_uniform(rng, 8, 8, 1.0);
    const Matrix b = seeded_uniform(rng, 8, 8, 1.0);
    EXPECT_EQ(matmul(a, b), naive_product(a, b));
}

TEST(Matmul, AssociativeWithinRounding) {
    Rng rng(derive_seed(43, 0));
    const Matrix a = seeded_uniform(rng, 16, 16, 1.0);
    const Matrix b = seeded_uniform(rng, 16, 16, 1.0);
    const Matrix c = seeded_uniform(rng, 16, 16, 1.0);
    const Matrix left = matmul(matmul(a, b), c);
    const Matrix right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.data().size(); ++i) {
        EXPECT_NEAR(left.data()[i], right.data()[i], 1e-9);
    }
}

TEST(Matmul, DimensionMismatchThrows) {
    EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), std::invalid_argument);
}

TEST(MaskedSoftmax, UniformRow) {
    const Matrix s{{0, 0, 0}};
    const BoolMatrix mask(1, 3, 1);
    const Matrix p = masked_softmax_rows(s, mask);
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(p(0, c), 1.0 / 3.0, 1e-15);
}

TEST(MaskedSoftmax, SingleSurvivor) {
    const Matrix s{{5, 5}};
    BoolMatrix mask(1, 2, 1);
    mask(0, 1) = 0;
    const Matrix p = masked_softmax_rows(s, mask);
    EXPECT_EQ(p(0, 0), 1.0);
    EXPECT_EQ(p(0, 1), 0.0);
}

TEST(MaskedSoftmax, MatchesDirectExponentials) {
    const Matrix s{{1, 2, 3}};
    const Matrix p = masked_softmax_rows(s, BoolMatrix(1, 3, 1));
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    EXPECT_NEAR(p(0, 0), std::exp(1.0) / z, 1e-15);
    EXPECT_NEAR(p(0, 1), std::exp(2.0) / z, 1e-15);
    EXPECT_NEAR(p(0, 2), std::exp(3.0) / z, 1e-15);
    EXPECT_NEAR(p(0, 0) + p(0, 1) + p(0, 2), 1.0, 1e-12);
}

TEST(MaskedSoftmax, BlockedMaximumDoesNotLeak) {
    const Matrix s{{1000, 0, 1}};
    BoolMatrix mask(1, 3, 1);
    mask(0, 0) = 0;
    const Matrix p = masked_softmax_rows(s, mask);
    EXPECT_EQ(p(0, 0), 0.0);
    EXPECT_NEAR(p(0, 1) + p(0, 2), 1.0, 1e-12);
    EXPECT_TRUE(std::isfinite(p(0, 1)));
}

TEST(MaskedSoftmax, FullyBlockedRowThrows) {
    const Matrix s{{1, 2}, {3, 4}};
    BoolMatrix mask(2, 2, 1);
    mask(1, 0) = 0;
    mask(1, 1) = 0;
    EXPECT_THROW(masked_softmax_rows(s, mask), InvalidMaskError);
}

TEST(RmsNorm, UnitRmsUnchanged) {
    const Vector x{1, 1, 1, 1};
    const Vector g(4, 1.0);
    const Vector out = rms_norm(x, g, 1e-300);
    for (double v : out) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(RmsNorm, ZerosStayZero) {
    const Vector x(5, 0.0);
    for (double v : rms_norm(x, Vector(5, 1.0))) EXPECT_EQ(v, 0.0);
}

TEST(RmsNorm, HandComputedPair) {
    // mean(x^2) = 12.5
    const double scale = 1.0 / std::sqrt(12.5 + 1e-5);
    const Vector out = rms_norm(Vector{3, 4}, Vector{1, 1});
    EXPECT_DOUBLE_EQ(out[0], 3.0 * scale);
    EXPECT_DOUBLE_EQ(out[1], 4.0 * scale);
}

TEST(RmsNorm, LengthMismatchThrows) {
    EXPECT_THROW(rms_norm(Vector{1, 2}, Vector{1}), std::invalid_argument);
}

TEST(Rope, PositionZeroIsIdentity) {
    const Vector v{0.3, -1.2, 2.5, 0.7};
    EXPECT_EQ(rope_apply(v, 4, 0), v);
}

TEST(Rope, UnitVectorRotatesByPosition) {
    for (std::size_t p : {1u, 2u, 7u, 100u}) {
        const Vector out = rope_apply(Vector{1, 0}, 2, p);
        EXPECT_NEAR(out[0], std::cos(static_cast<double>(p)), 1e-15);
        EXPECT_NEAR(out[1], std::sin(static_cast<double>(p)), 1e-15);
    }
}

TEST(Rope, PreservesNorm) {
    Rng rng(derive_seed(11, 3));
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix v = seeded_uniform(rng, 1, 16, 2.0);
        const Vector in(v.data().begin(), v.data().end());
        const Vector out = rope_apply(in, 8, rng.next_below(4096));
        EXPECT_NEAR(norm(out), norm(in), 1e-12);
    }
}

TEST(Rope, OddHeadDimThrows) {
    EXPECT_THROW(rope_apply(Vector{1, 2, 3}, 3, 1), std::invalid_argument);
}

TEST(SeededUniform, SameSeedBitIdentical) {
    Rng a(123), b(123);
    EXPECT_EQ(seeded_uniform(a, 5, 7, 0.5), seeded_uniform(b, 5, 7, 0.5));
}

TEST(SeededUniform, RespectsScale) {
    Rng rng(9);
    const Matrix m = seeded_uniform(rng, 32, 32, 0.1);
    for (double v : m.data()) {
        EXPECT_GE(v, -0.1);
        EXPECT_LE(v, 0.1);
    }
}

TEST(SeededUniform, DifferentSeedsDiffer) {
    Rng a(derive_seed(1, 0)), b(derive_seed(1, 1));
    EXPECT_NE(seeded_uniform(a, 4, 4, 1.0), seeded_uniform(b, 4, 4, 1.0));
}

TEST(SeededUniform, NonPositiveScaleThrows) {
    Rng rng(1);
    EXPECT_THROW(seeded_uniform(rng, 2, 2, 0.0), std::invalid_argument);
}
