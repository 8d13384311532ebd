#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "gfusion/diffcore.hpp"

namespace gfusion::ad {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<double> per_param; // max relative error per parameter tensor
    std::size_t worst_param = 0;
    Eigen::Index worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool passed = false;
};

/// Compares tape gradients of a scalar function against central differences.
///
/// `f(tape, leaves)` must build a scalar on `tape` from the leaves, which alias
/// `params` in order. Entries are compared with
///     |analytic - numeric| / max(|analytic|, |numeric|, abs_floor)
/// so gradients below `abs_floor` are held to an absolute bound instead.
template <typename T, typename F>
GradCheckReport grad_check(F&& f, std::span<Matrix<T>* const> params, T eps, T tol, T abs_floor = T(1e-3)) {
    if (!(eps >= T(1e-7) && eps <= T(1e-3))) {
        throw UsageError("grad_check: eps must lie in [1e-7, 1e-3]");
    }
    for (const auto* p : params) {
        if (!p->allFinite()) {
            throw NumericError("grad_check: non-finite parameter");
        }
    }

    auto evaluate = [&]() -> T {
        Tape<T> tape;
        std::vector<Var<T>> leaves;
        for (auto* p : params) {
            leaves.push_back(tape.param(*p, false));
        }
        return f(tape, std::span<const Var<T>>(leaves)).item();
    };

    Tape<T> tape;
    std::vector<Var<T>> leaves;
    for (auto* p : params) {
        leaves.push_back(tape.param(*p));
    }
    const Var<T> out = f(tape, std::span<const Var<T>>(leaves));
    const T base = out.item();
    if (evaluate() != base) {
        throw DeterminismError("grad_check: two forward passes disagree");
    }
    tape.backward(out);

    GradCheckReport report;
    report.per_param.assign(params.size(), 0.0);
    for (std::size_t p = 0; p < params.size(); ++p) {
        const Matrix<T> analytic = tape.grad(leaves[p]);
        Matrix<T>& m = *params[p];
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            const T saved = m.data()[i];
            m.data()[i] = saved + eps;
            const T up = evaluate();
            m.data()[i] = saved - eps;
            const T down = evaluate();
            m.data()[i] = saved;
            const T numeric = (up - down) / (T(2) * eps);
            const T a = analytic.data()[i];
            const T denom = std::max({std::abs(a), std::abs(numeric), abs_floor});
            const double rel = static_cast<double>(std::abs(a - numeric) / denom);
            report.per_param[p] = std::max(report.per_param[p], rel);
            if (rel > report.max_rel_error || (p == 0 && i == 0)) {
                report.max_rel_error = rel;
                report.worst_param = p;
                report.worst_index = i;
                report.worst_analytic = static_cast<double>(a);
                report.worst_numeric = static_cast<double>(numeric);
            }
        }
    }
    report.passed = report.max_rel_error <= static_cast<double>(tol);
    return report;
}

template <typename T, typename F>
GradCheckReport grad_check(F&& f, std::initializer_list<Matrix<T>*> params, T eps, T tol, T abs_floor = T(1e-3)) {
    std::vector<Matrix<T>*> ps(params);
    return grad_check<T>(std::forward<F>(f), std::span<Matrix<T>* const>(ps), eps, tol, abs_floor);
}

} // namespace gfusion::ad
