#include <gtest/gtest.h>

#include "gfusion/classical_pooling.hpp"
#include "test_support.hpp"

using namespace gfusion;
using M = Matrix<double>;

namespace {

// Frames for the feature matrix X = [[1,3],[2,4]] (F = 2, N = 2): one row per vertex.
M two_frames() {
    M x(2, 2);
    x << 1, 2, 3, 4;
    return x;
}

} // namespace

TEST(Shift, IdentityReturnsFrames) {
    std::mt19937_64 rng(1);
    const M x = test::random_matrix(5, 3, rng);
    EXPECT_EQ(shift<double>(M::Identity(5, 5), x), x);
}

TEST(Shift, MeanAndSelectionExamples) {
    const M y = shift(make_shift<double>(PoolingKind::mean, 2), two_frames());
    for (int r = 0; r < 2; ++r) {
        EXPECT_DOUBLE_EQ(y(r, 0), 2.0);
        EXPECT_DOUBLE_EQ(y(r, 1), 3.0);
    }
    const M sel = shift(make_shift<double>(PoolingKind::last, 2), two_frames());
    for (int r = 0; r < 2; ++r) {
        EXPECT_EQ(sel(r, 0), 3.0);
        EXPECT_EQ(sel(r, 1), 4.0);
    }
}

TEST(Shift, DimensionMismatchIsShapeError) {
    EXPECT_THROW(shift<double>(M::Identity(3, 3), M::Ones(2, 4)), ShapeError);
    EXPECT_THROW(shift<double>(M::Ones(2, 3), M::Ones(3, 4)), ShapeError);
}

TEST(MakeShift, Examples) {
    const M mean = make_shift<double>(PoolingKind::mean, 3);
    EXPECT_EQ(mean, M::Constant(3, 3, 1.0 / 3.0));

    const M last = make_shift<double>(PoolingKind::last, 4);
    M expected = M::Zero(4, 4);
    expected.col(3).setOnes();
    EXPECT_EQ(last, expected);

    const M middle = make_shift<double>(PoolingKind::middle, 5);
    expected = M::Zero(5, 5);
    expected.col(1).setOnes();
    EXPECT_EQ(middle, expected);
}

TEST(MakeShift, IndexRules) {
    EXPECT_EQ(selected_vertex(PoolingKind::first, 7), 1u);
    EXPECT_EQ(selected_vertex(PoolingKind::middle, 1), 1u);
    EXPECT_EQ(selected_vertex(PoolingKind::middle, 6), 3u);
    EXPECT_EQ(selected_vertex(PoolingKind::last, 7), 7u);
    for (std::uint64_t s = 0; s < 50; ++s) {
        const auto i = selected_vertex(PoolingKind::random, 9, s);
        EXPECT_GE(i, 1u);
        EXPECT_LE(i, 9u);
        EXPECT_EQ(i, selected_vertex(PoolingKind::random, 9, s));
    }
}

TEST(MakeShift, Errors) {
    EXPECT_THROW(make_shift<double>(PoolingKind::mean, 0), DomainError);
    EXPECT_THROW(make_shift<double>(PoolingKind::random, 4), UsageError);
    EXPECT_THROW(make_shift<double>(PoolingKind::max, 4), UsageError);
    EXPECT_THROW(parse_pooling_kind("median"), UsageError);
}

TEST(Pool, Examples) {
    const M x = two_frames();
    const RowVector<double> mean = pool(PoolingKind::mean, x);
    EXPECT_DOUBLE_EQ(mean(0), 2.0);
    EXPECT_DOUBLE_EQ(mean(1), 3.0);
    const RowVector<double> mx = pool(PoolingKind::max, x);
    EXPECT_EQ(mx(0), 3.0);
    EXPECT_EQ(mx(1), 4.0);

    M row(3, 1);
    row << 1, 5, 9;
    const RowVector<double> q = pool(PoolingKind::quantile, row);
    ASSERT_EQ(q.size(), 3);
    EXPECT_DOUBLE_EQ(q(0), 3.0);
    EXPECT_DOUBLE_EQ(q(1), 5.0);
    EXPECT_DOUBLE_EQ(q(2), 7.0);
}

TEST(Pool, MeanStdUsesPopulationStd) {
    M x(4, 1);
    x << 2, 4, 4, 6;
    const RowVector<double> v = pool(PoolingKind::mean_std, x);
    ASSERT_EQ(v.size(), 2);
    EXPECT_DOUBLE_EQ(v(0), 4.0);
    EXPECT_DOUBLE_EQ(v(1), std::sqrt(2.0));
}

TEST(Pool, OutputLengths) {
    std::mt19937_64 rng(2);
    const M x = test::random_matrix(6, 5, rng);
    for (auto k : {PoolingKind::mean, PoolingKind::max, PoolingKind::mean_std, PoolingKind::quantile,
                   PoolingKind::first, PoolingKind::middle, PoolingKind::last}) {
        EXPECT_EQ(static_cast<std::size_t>(pool(k, x).size()), pooled_dim(k, 5)) << to_string(k);
    }
    EXPECT_EQ(pool(PoolingKind::random, x, 3).size(), 5);
    EXPECT_THROW(pool<double>(PoolingKind::mean, M(0, 5)), ShapeError);
}

TEST(Pool, StdNonNegativeAndQuartilesMonotone) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 30; ++trial) {
        const M x = test::random_matrix(1 + trial, 4, rng);
        const RowVector<double> ms = pool(PoolingKind::mean_std, x);
        EXPECT_GE(ms.tail(4).minCoeff(), 0.0);
        const RowVector<double> q = pool(PoolingKind::quantile, x);
        for (int c = 0; c < 4; ++c) {
            EXPECT_LE(q(c), q(4 + c));
            EXPECT_LE(q(4 + c), q(8 + c));
        }
    }
}

TEST(Equivalence, ShiftRowsMatchDirectPooling) {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> n_dist(1, 64);
    for (int trial = 0; trial < 40; ++trial) {
        const auto n = static_cast<std::size_t>(n_dist(rng));
        const M x = test::random_matrix(static_cast<Eigen::Index>(n), 7, rng);
        const M ym = shift(make_shift<double>(PoolingKind::mean, n), x);
        EXPECT_LT((ym.row(0) - pool(PoolingKind::mean, x)).cwiseAbs().maxCoeff(), 1e-12);
        for (auto k : {PoolingKind::first, PoolingKind::middle, PoolingKind::last}) {
            const M y = shift(make_shift<double>(k, n), x);
            EXPECT_EQ(RowVector<double>(y.row(0)), pool(k, x)) << to_string(k);
        }
        const std::uint64_t seed = 1000 + trial;
        const M yr = shift(make_shift<double>(PoolingKind::random, n, seed), x);
        EXPECT_EQ(RowVector<double>(yr.row(0)), pool(PoolingKind::random, x, seed));
        for (Eigen::Index r = 1; r < ym.rows(); ++r) {
            EXPECT_LT((ym.row(r) - ym.row(0)).cwiseAbs().maxCoeff(), 1e-12);
        }
    }
}

TEST(MaxAsMlp, UntrainedIsUsageError) {
    ShiftMlp<double> mlp(make_shift<double>(PoolingKind::mean, 2), 1, 4);
    EXPECT_THROW(max_as_mlp<double>(M::Ones(2, 1), mlp), UsageError);
}

TEST(MaxAsMlp, ForcedIdentityReproducesMean) {
    // relu(m) - relu(-m) = m on the first shifted vertex.
    ShiftMlp<double> mlp(make_shift<double>(PoolingKind::mean, 2), 1, 2);
    mlp.w1 << 1, -1, 0, 0;
    mlp.w2 << 1, -1;
    mlp.trained = true;
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const M x = test::random_matrix(2, 1, rng);
        EXPECT_NEAR(max_as_mlp(x, mlp)(0), pool(PoolingKind::mean, x)(0), 1e-15);
    }
}

TEST(MaxAsMlp, FitsMaxOnToyData) {
    std::mt19937_64 rng(6);
    std::vector<M> train, held_out;
    for (int i = 0; i < 256; ++i) train.push_back(test::random_matrix(2, 1, rng, 0.0, 1.0));
    for (int i = 0; i < 200; ++i) held_out.push_back(test::random_matrix(2, 1, rng, 0.0, 1.0));
    MaxMlpFit fit;
    fit.seed = 7;
    const auto mlp = fit_max_mlp<double>(train, M::Identity(2, 2), fit);
    double mae = 0.0;
    for (const auto& x : held_out) mae += std::abs(max_as_mlp(x, mlp)(0) - x.maxCoeff());
    mae /= static_cast<double>(held_out.size());
    EXPECT_LT(mae, 0.05);

    const M equal = M::Constant(2, 1, 0.5);
    EXPECT_LT(std::abs(max_as_mlp(equal, mlp)(0) - 0.5), 0.05);
}
