#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "gfusion/aam_loss.hpp"
#include "gfusion/grad_check.hpp"
#include "test_support.hpp"

using namespace gfusion;
using M = Matrix<double>;

namespace {

double loss_value(const M& e, const M& w, std::size_t label, AamConfig cfg) {
    ad::Tape<double> t;
    return aam_loss(t.constant(e), t.constant(w), label, cfg).item();
}

M rows(std::initializer_list<std::initializer_list<double>> r) {
    M m(static_cast<Eigen::Index>(r.size()), static_cast<Eigen::Index>(r.begin()->size()));
    Eigen::Index i = 0;
    for (auto row : r) {
        Eigen::Index j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

} // namespace

TEST(AamLoss, MarginFreeIsSoftmaxCrossEntropyOnCosines) {
    std::mt19937_64 rng(1);
    const M e = test::random_matrix(1, 6, rng);
    const M w = test::random_matrix(4, 6, rng);
    const RowVector<double> eu = e.row(0) / e.norm();
    Eigen::VectorXd logits(4);
    for (int j = 0; j < 4; ++j) logits(j) = eu.dot(w.row(j)) / w.row(j).norm();
    const double lse = std::log(logits.array().exp().sum());
    for (std::size_t y = 0; y < 4; ++y) {
        EXPECT_NEAR(loss_value(e, w, y, {0.0, 1.0}), lse - logits(static_cast<Eigen::Index>(y)), 1e-12);
    }
}

TEST(AamLoss, AlignedTargetClosedForm) {
    const double loss = loss_value(rows({{1, 0}}), rows({{1, 0}, {0, 1}}), 0, {});
    EXPECT_NEAR(loss, 1.7062146172442177e-13, 1e-19);
    // Without the clamp the nominal value is ln(1 + exp(-30 cos 0.2)).
    EXPECT_NEAR(loss, std::log1p(std::exp(-30.0 * std::cos(0.2))), 1e-15);
}

TEST(AamLoss, EquidistantTargetIsPenalized) {
    const double h = std::sqrt(0.75);
    const M w = rows({{0.5, h, 0}, {0.5, -h, 0}});
    const M e = rows({{1, 0, 0}});
    const double loss = loss_value(e, w, 0, {});
    EXPECT_NEAR(loss, 5.464824025791016, 1e-12);
    EXPECT_GT(loss, std::log(2.0));
    EXPECT_NEAR(loss_value(e, w, 0, {0.0, 30.0}), std::log(2.0), 1e-12);
}

TEST(AamLoss, ScaleInvariantInEmbedding) {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const M e = test::random_matrix(1, 8, rng);
        const M w = test::random_matrix(5, 8, rng);
        const double base = loss_value(e, w, 3, {});
        for (double c : {1e-3, 0.5, 7.0, 1e4}) {
            EXPECT_NEAR(loss_value(M(c * e), w, 3, {}), base, 1e-10);
        }
    }
}

TEST(AamLoss, NonDecreasingInMarginWhileAngleStaysBelowPi) {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const M e = test::random_matrix(1, 8, rng);
        const M w = test::random_matrix(5, 8, rng);
        const double cy = e.row(0).dot(w.row(1)) / (e.norm() * w.row(1).norm());
        const double room = std::numbers::pi - std::acos(cy);
        double prev = loss_value(e, w, 1, {0.0, 30.0});
        for (double m = 0.05; m < std::min(room, 1.5); m += 0.05) {
            const double cur = loss_value(e, w, 1, {m, 30.0});
            EXPECT_GE(cur, prev - 1e-12) << "theta=" << std::acos(cy) << " m=" << m;
            prev = cur;
        }
    }
}

TEST(AamLoss, MarginFoldsBackPastPi) {
    // theta_y = 2.8 rad: cos(theta + m) starts rising once theta + m > pi.
    const M w = rows({{1, 0}, {0, 1}});
    const M e = rows({{std::cos(2.8), std::sin(2.8)}});
    EXPECT_LT(loss_value(e, w, 0, {0.6, 30.0}), loss_value(e, w, 0, {0.3, 30.0}));
}

TEST(AamLoss, Errors) {
    const M w = rows({{1, 0}, {0, 1}});
    EXPECT_THROW(loss_value(M::Zero(1, 2), w, 0, {}), NumericError);
    EXPECT_THROW(loss_value(rows({{1, 0}}), w, 2, {}), UsageError);
    EXPECT_THROW(loss_value(rows({{1, 0, 0}}), w, 0, {}), ShapeError);
    EXPECT_THROW((AamConfig{2.0, 30.0}.validate()), UsageError);
    EXPECT_THROW((AamConfig{0.2, 0.0}.validate()), UsageError);
    EXPECT_THROW(AamHead<double>::init(1, 4, {}, 0), DataError);
}

TEST(AamLoss, GradientMatchesFiniteDifferences) {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 10; ++trial) {
        M e = test::random_matrix(1, 6, rng);
        M w = test::random_matrix(4, 6, rng);
        const auto label = static_cast<std::size_t>(trial % 4);
        auto f = [&](ad::Tape<double>&, std::span<const ad::Var<double>> p) {
            return aam_loss(p[0], p[1], label, AamConfig{});
        };
        const auto r = ad::grad_check<double>(f, {&e, &w}, 1e-6, 1e-4);
        EXPECT_TRUE(r.passed) << r.max_rel_error << " at " << r.worst_param;
    }
}

TEST(AamLoss, GradientNearAndInsideTheClamp) {
    // c_y = 0.999 is near the clamp; an exactly aligned target sits inside it.
    const double a = 0.999;
    M e = rows({{a, std::sqrt(1 - a * a), 0}});
    M w = rows({{1, 0, 0}, {0, 0, 1}, {0.3, 0.4, 0.5}});
    auto f = [](ad::Tape<double>&, std::span<const ad::Var<double>> p) {
        return aam_loss(p[0], p[1], 0, AamConfig{});
    };
    const auto near = ad::grad_check<double>(f, {&e, &w}, 1e-7, 1e-4);
    EXPECT_TRUE(near.passed) << near.max_rel_error;

    ad::Tape<double> t;
    const M aligned = rows({{2, 0, 0}});
    auto ev = t.variable(aligned);
    auto wv = t.variable(w);
    t.backward(aam_loss(ev, wv, 0, AamConfig{}));
    EXPECT_TRUE(all_finite(t.grad(ev)));
    EXPECT_TRUE(all_finite(t.grad(wv)));
}

TEST(AamHead, CountForFullSpeakerSet) {
    const auto head = AamHead<float>::init(5994, 768, {}, 1);
    EXPECT_EQ(head.count(), 4'603'392u);
    EXPECT_EQ(head.classes(), 5994u);
}
