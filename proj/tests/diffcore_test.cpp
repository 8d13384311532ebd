#include <gtest/gtest.h>

#include <cmath>

#include "gfusion/diffcore.hpp"
#include "gfusion/grad_check.hpp"
#include "grad_cases.hpp"
#include "test_support.hpp"

using namespace gfusion;
using ad::Tape;
using ad::Var;
using M = Matrix<double>;

namespace {

M row(std::initializer_list<double> v) {
    M m(1, static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) m(0, i++) = x;
    return m;
}

} // namespace

TEST(Primitives, MatmulByIdentity) {
    std::mt19937_64 rng(1);
    const M a = test::random_matrix(4, 3, rng);
    Tape<double> t;
    EXPECT_EQ(ad::matmul(t.constant(a), t.constant(M::Identity(3, 3))).value(), a);
}

TEST(Primitives, RowSoftmaxClosedForm) {
    Tape<double> t;
    const auto a = ad::row_softmax(t.constant(row({0.0, 0.0}))).value();
    EXPECT_DOUBLE_EQ(a(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(a(0, 1), 0.5);
    const auto b = ad::row_softmax(t.constant(row({0.0, std::log(3.0)}))).value();
    EXPECT_NEAR(b(0, 0), 0.25, 1e-15);
    EXPECT_NEAR(b(0, 1), 0.75, 1e-15);
}

TEST(Primitives, LayerNormOfConstantRowIsZero) {
    Tape<double> t;
    const auto y = ad::layer_norm(t.constant(row({3.0, 3.0, 3.0, 3.0})), t.constant(M::Ones(1, 4)),
                                  t.constant(M::Zero(1, 4)))
                       .value();
    EXPECT_EQ(y, M::Zero(1, 4));
}

TEST(Primitives, CosineSimilarityDiagonalAndOpposites) {
    M b(3, 2);
    b << 1, 2, -1, -2, 0.5, 0;
    Tape<double> t;
    const auto s = ad::cosine_similarity_matrix(t.constant(b)).value();
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(s(i, i), 1.0, 1e-15);
    EXPECT_NEAR(s(0, 1), -1.0, 1e-15);
}

TEST(Primitives, CosineOfZeroRowIsZeroNotNan) {
    M b(2, 2);
    b << 0, 0, 1, 1;
    Tape<double> t;
    const auto s = ad::cosine_similarity_matrix(t.constant(b)).value();
    EXPECT_EQ(s(0, 0), 0.0);
    EXPECT_EQ(s(0, 1), 0.0);
}

TEST(Primitives, MaxOverRowsTieGoesToFirstIndex) {
    M a(3, 2);
    a << 1, 5, 4, 5, 4, 2;
    Tape<double> t;
    auto x = t.variable(a);
    auto y = ad::max_over_rows(x);
    EXPECT_EQ(y.value(), row({4, 5}));
    t.backward(ad::sum(y));
    M expected(3, 2);
    expected << 0, 1, 1, 0, 0, 0;
    EXPECT_EQ(t.grad(x), expected);
}

TEST(Primitives, ShapeMismatchThrows) {
    Tape<double> t;
    auto a = t.constant(M::Ones(2, 3));
    auto b = t.constant(M::Ones(2, 3));
    EXPECT_THROW(ad::matmul(a, b), ShapeError);
    EXPECT_THROW(ad::add(a, t.constant(M::Ones(3, 3))), ShapeError);
    EXPECT_THROW(ad::layer_norm(a, t.constant(M::Ones(1, 2)), t.constant(M::Zero(1, 3))), ShapeError);
    EXPECT_THROW(ad::concat_rows({a, t.constant(M::Ones(1, 2))}), ShapeError);
}

TEST(Primitives, NonFiniteResultNamesThePrimitive) {
    Tape<double> t;
    auto a = t.constant(row({1e300, 1e300}));
    try {
        ad::matmul(a, ad::transpose(a));
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("matmul"), std::string::npos);
    }
}

TEST(Primitives, MixingTapesIsAUsageError) {
    Tape<double> t1, t2;
    EXPECT_THROW(ad::add(t1.constant(M::Ones(1, 1)), t2.constant(M::Ones(1, 1))), UsageError);
}

TEST(TapeBehaviour, SecondBackwardRequiresReset) {
    Tape<double> t;
    auto x = t.variable(row({1.0, 2.0}));
    auto y = ad::sum(ad::mul(x, x));
    t.backward(y);
    EXPECT_THROW(t.backward(y), UsageError);
    EXPECT_THROW(t.constant(M::Ones(1, 1)), UsageError);
    t.reset();
    EXPECT_EQ(t.size(), 0u);
}

TEST(TapeBehaviour, SharedSubexpressionGradientsAccumulate) {
    Tape<double> t;
    auto x = t.variable(row({1.0, -3.0}));
    auto y = ad::add(ad::sum(ad::scale(x, 2.0)), ad::sum(ad::scale(x, 5.0)));
    t.backward(y);
    EXPECT_EQ(t.grad(x), row({7.0, 7.0}));
}

TEST(TapeBehaviour, GradStartsAtZeroAndConstantsGetNone) {
    Tape<double> t;
    auto x = t.variable(row({1.0, 2.0}));
    auto c = t.constant(row({3.0, 4.0}));
    EXPECT_EQ(t.grad(x), M::Zero(1, 2));
    t.backward(ad::sum(ad::mul(x, c)));
    EXPECT_EQ(t.grad(x), row({3.0, 4.0}));
    EXPECT_EQ(t.grad(c), M::Zero(1, 2));
}

TEST(TapeBehaviour, ParamLeavesDoNotCopyOrMutateStorage) {
    M w = row({2.0, 3.0});
    Tape<double> t;
    auto p = t.param(w);
    EXPECT_EQ(&p.value(), &w);
    t.backward(ad::sum(ad::mul(p, p)));
    EXPECT_EQ(w, row({2.0, 3.0}));
    EXPECT_EQ(t.grad(p), row({4.0, 6.0}));
}

TEST(GradCheck, SumOfSquares) {
    M x = row({1.0, 2.0});
    Tape<double> t;
    auto v = t.param(x);
    t.backward(ad::sum(ad::mul(v, v)));
    EXPECT_EQ(t.grad(v), row({2.0, 4.0}));

    auto f = [](Tape<double>&, std::span<const Var<double>> p) { return ad::sum(ad::mul(p[0], p[0])); };
    const auto r = ad::grad_check<double>(f, {&x}, 1e-5, 1e-8);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
    EXPECT_LT(r.max_rel_error, 1e-8);
}

TEST(GradCheck, SoftmaxRowSumHasZeroGradient) {
    std::mt19937_64 rng(3);
    M x = test::random_matrix(3, 4, rng);
    auto f = [](Tape<double>&, std::span<const Var<double>> p) { return ad::sum(ad::row_softmax(p[0])); };
    const auto r = ad::grad_check<double>(f, {&x}, 1e-5, 1e-4);
    EXPECT_TRUE(r.passed);
    Tape<double> t;
    auto v = t.param(x);
    t.backward(ad::sum(ad::row_softmax(v)));
    EXPECT_LT(t.grad(v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(GradCheck, DetectsNonDeterminism) {
    M x = row({1.0});
    int calls = 0;
    auto f = [&calls](Tape<double>& t, std::span<const Var<double>> p) {
        return ad::add(ad::sum(p[0]), t.constant(M::Constant(1, 1, static_cast<double>(++calls))));
    };
    EXPECT_THROW(ad::grad_check<double>(f, {&x}, 1e-5, 1e-4), DeterminismError);
}

TEST(GradCheck, RejectsEpsOutsideRange) {
    M x = row({1.0});
    auto f = [](Tape<double>&, std::span<const Var<double>> p) { return ad::sum(p[0]); };
    EXPECT_THROW(ad::grad_check<double>(f, {&x}, 1e-2, 1e-4), UsageError);
}

TEST(GradCheck, CatchesAWrongGradient) {
    // A deliberately broken primitive: forward x^2, backward claims 3x.
    M x = row({0.7, -1.3});
    auto f = [](Tape<double>& t, std::span<const Var<double>> p) {
        auto in = p[0];
        auto y = t.record("broken", in.value().cwiseProduct(in.value()), t.requires_grad(in),
                          [&t, in](const M& g) { t.accumulate(in, g.cwiseProduct(in.value()) * 3.0); });
        return ad::sum(y);
    };
    EXPECT_FALSE(ad::grad_check<double>(f, {&x}, 1e-6, 1e-4).passed);
}

// Vector-Jacobian products of every primitive against central differences on
// random inputs in [-2, 2].
class PrimitiveVjp : public ::testing::TestWithParam<std::uint64_t> {};

TEST_P(PrimitiveVjp, MatchesFiniteDifferences) {
    const auto seed = GetParam();
    std::mt19937_64 rng(seed);
    for (const auto& c : test::primitive_cases(rng)) {
        const auto r = test::check_primitive(c, seed + 100);
        EXPECT_LT(r.max_rel_error, 1e-4) << c.name << " worst analytic=" << r.worst_analytic
                                         << " numeric=" << r.worst_numeric;
    }
}

INSTANTIATE_TEST_SUITE_P(RandomInputs, PrimitiveVjp, ::testing::Values(11u, 12u, 13u, 14u, 15u));

TEST(Invariants, SoftmaxRowsSumToOneAndArePositive) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Tape<double> t;
        const auto y = ad::row_softmax(t.constant(test::random_matrix(6, 9, rng, -20, 20))).value();
        EXPECT_LT((y.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-12);
        EXPECT_GT(y.minCoeff(), 0.0);
    }
}

TEST(Invariants, CosineMatrixSymmetricUnitDiagonal) {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        Tape<double> t;
        const auto s = ad::cosine_similarity_matrix(t.constant(test::random_matrix(7, 5, rng))).value();
        EXPECT_LT((s - s.transpose()).cwiseAbs().maxCoeff(), 1e-12);
        EXPECT_LT((s.diagonal().array() - 1.0).abs().maxCoeff(), 1e-12);
    }
}

TEST(Precision, FloatTapeRuns) {
    Tape<float> t;
    Matrix<float> a(1, 2);
    a << 0.0f, std::log(3.0f);
    auto x = t.variable(a);
    auto y = ad::row_softmax(x);
    EXPECT_NEAR(y.value()(0, 1), 0.75f, 1e-6f);
    t.backward(ad::sum(ad::mul(y, y)));
    EXPECT_EQ(t.grad(x).size(), 2);
}
