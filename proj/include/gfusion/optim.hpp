#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gfusion/error.hpp"
#include "gfusion/matrix.hpp"

namespace gfusion {

/// Cosine one-cycle schedule: warm up from max_lr/div_factor to max_lr over
/// the first warmup_fraction of the run, then anneal towards max_lr/final_div.
struct OneCycle {
    double max_lr = 1e-3;
    double div_factor = 25.0;
    double final_div = 1e4;
    double warmup_fraction = 0.3;

    double initial_lr() const { return max_lr / div_factor; }
    double final_lr() const { return max_lr / final_div; }
    double peak_step(std::uint64_t total_steps) const { return warmup_fraction * static_cast<double>(total_steps); }

    void validate() const {
        if (!(max_lr > 0) || !(div_factor > 0) || !(final_div > 0)) {
            throw UsageError("one-cycle: max_lr, div_factor and final_div must be positive");
        }
        if (!(warmup_fraction > 0 && warmup_fraction < 1)) {
            throw UsageError("one-cycle: warmup_fraction must lie in (0, 1)");
        }
    }

    double lr_at(std::uint64_t step, std::uint64_t total_steps) const {
        if (step >= total_steps) {
            throw UsageError("lr_at: step " + std::to_string(step) + " >= total steps " + std::to_string(total_steps));
        }
        const double peak = peak_step(total_steps);
        const double s = static_cast<double>(step);
        if (s <= peak) {
            return anneal(initial_lr(), max_lr, s / peak);
        }
        return anneal(max_lr, final_lr(), (s - peak) / (static_cast<double>(total_steps) - peak));
    }

    /// Largest possible |lr(k+1) - lr(k)| for a run of `total_steps`.
    double max_step_change(std::uint64_t total_steps) const {
        const double peak = peak_step(total_steps);
        const double rest = static_cast<double>(total_steps) - peak;
        const double up = (max_lr - initial_lr()) * std::numbers::pi / (2.0 * peak);
        const double down = (max_lr - final_lr()) * std::numbers::pi / (2.0 * rest);
        return std::max(up, down);
    }

  private:
    static double anneal(double from, double to, double pct) {
        return to + (from - to) / 2.0 * (1.0 + std::cos(std::numbers::pi * pct));
    }
};

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept in double regardless of the
/// parameter precision.
template <typename T>
class Adam {
  public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    void step(std::span<Matrix<T>* const> params, std::span<const Matrix<T>> grads, double lr) {
        if (params.size() != grads.size()) {
            throw ShapeError("adam: " + std::to_string(params.size()) + " params but " + std::to_string(grads.size()) +
                             " gradients");
        }
        if (m_.empty()) {
            for (auto* p : params) {
                m_.push_back(Matrix<double>::Zero(p->rows(), p->cols()));
                v_.push_back(Matrix<double>::Zero(p->rows(), p->cols()));
            }
        }
        if (m_.size() != params.size()) {
            throw ShapeError("adam: parameter list changed between steps");
        }
        ++steps_;
        const double b1 = config_.beta1;
        const double b2 = config_.beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Matrix<T>& p = *params[i];
            const Matrix<T>& g = grads[i];
            if (g.rows() != p.rows() || g.cols() != p.cols()) {
                throw ShapeError("adam: gradient " + shape_str(g) + " for parameter " + shape_str(p));
            }
            auto& m = m_[i];
            auto& v = v_[i];
            for (Eigen::Index k = 0; k < p.size(); ++k) {
                const double gk = static_cast<double>(g.data()[k]);
                m.data()[k] = b1 * m.data()[k] + (1.0 - b1) * gk;
                v.data()[k] = b2 * v.data()[k] + (1.0 - b2) * gk * gk;
                const double mhat = m.data()[k] / c1;
                const double vhat = v.data()[k] / c2;
                p.data()[k] = static_cast<T>(static_cast<double>(p.data()[k]) - lr * mhat / (std::sqrt(vhat) + config_.eps));
            }
        }
    }

    std::uint64_t steps() const { return steps_; }
    const std::vector<Matrix<double>>& first_moments() const { return m_; }
    const std::vector<Matrix<double>>& second_moments() const { return v_; }

    void restore(std::uint64_t steps, std::vector<Matrix<double>> m, std::vector<Matrix<double>> v) {
        if (m.size() != v.size()) {
            throw ShapeError("adam: moment lists differ in length");
        }
        steps_ = steps;
        m_ = std::move(m);
        v_ = std::move(v);
    }

  private:
    AdamConfig config_;
    std::uint64_t steps_ = 0;
    std::vector<Matrix<double>> m_;
    std::vector<Matrix<double>> v_;
};

} // namespace gfusion
