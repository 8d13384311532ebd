#pragma once

// Classical pooling baselines, and the graph-shift form of the linear ones.
//
// Frames are passed as N x F matrices (one row per vertex). A shift matrix A
// acts as Y = A * frames, which is A X^T for the F x N feature matrix X.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "gfusion/diffcore.hpp"
#include "gfusion/error.hpp"
#include "gfusion/matrix.hpp"
#include "gfusion/optim.hpp"

namespace gfusion {

enum class PoolingKind { mean, max, mean_std, quantile, first, middle, last, random };

inline PoolingKind parse_pooling_kind(std::string_view name) {
    if (name == "mean") return PoolingKind::mean;
    if (name == "max") return PoolingKind::max;
    if (name == "mean_std") return PoolingKind::mean_std;
    if (name == "quantile") return PoolingKind::quantile;
    if (name == "first") return PoolingKind::first;
    if (name == "middle") return PoolingKind::middle;
    if (name == "last") return PoolingKind::last;
    if (name == "random") return PoolingKind::random;
    throw UsageError("unknown pooling kind '" + std::string(name) + "'");
}

inline std::string_view to_string(PoolingKind kind) {
    switch (kind) {
    case PoolingKind::mean: return "mean";
    case PoolingKind::max: return "max";
    case PoolingKind::mean_std: return "mean_std";
    case PoolingKind::quantile: return "quantile";
    case PoolingKind::first: return "first";
    case PoolingKind::middle: return "middle";
    case PoolingKind::last: return "last";
    case PoolingKind::random: return "random";
    }
    return "?";
}

/// Output length of pool(kind, ...) for F-dimensional frames.
inline std::size_t pooled_dim(PoolingKind kind, std::size_t dim) {
    switch (kind) {
    case PoolingKind::mean_std: return 2 * dim;
    case PoolingKind::quantile: return 3 * dim;
    default: return dim;
    }
}

/// 1-based vertex picked by a selection pooling: first -> 1, middle -> floor(N/2)
/// (at least 1), last -> N, random -> uniform draw from a seeded mt19937_64.
inline std::size_t selected_vertex(PoolingKind kind, std::size_t n, std::optional<std::uint64_t> seed = std::nullopt) {
    if (n == 0) {
        throw DomainError("selection pooling needs N >= 1");
    }
    switch (kind) {
    case PoolingKind::first: return 1;
    case PoolingKind::middle: return std::max<std::size_t>(1, n / 2);
    case PoolingKind::last: return n;
    case PoolingKind::random: {
        if (!seed) {
            throw UsageError("random pooling requires a seed");
        }
        std::mt19937_64 rng(*seed);
        return 1 + static_cast<std::size_t>(rng() % n);
    }
    default: throw UsageError("pooling kind '" + std::string(to_string(kind)) + "' does not select a vertex");
    }
}

/// N x N graph shift operator reproducing mean or selection pooling.
template <typename T>
Matrix<T> make_shift(PoolingKind kind, std::size_t n, std::optional<std::uint64_t> seed = std::nullopt) {
    if (n == 0) {
        throw DomainError("make_shift: N must be >= 1");
    }
    const auto size = static_cast<Eigen::Index>(n);
    if (kind == PoolingKind::mean) {
        return Matrix<T>::Constant(size, size, T(1) / static_cast<T>(n));
    }
    const auto col = static_cast<Eigen::Index>(selected_vertex(kind, n, seed) - 1);
    Matrix<T> a = Matrix<T>::Zero(size, size);
    a.col(col).setOnes();
    return a;
}

/// Y = A * frames; every vertex takes the A-weighted combination of all frames.
template <typename T>
Matrix<T> shift(const Matrix<T>& a, const Matrix<T>& frames) {
    if (a.rows() != a.cols() || a.cols() != frames.rows()) {
        throw ShapeError("shift: operator " + shape_str(a) + " incompatible with " + std::to_string(frames.rows()) +
                         " vertices");
    }
    return a * frames;
}

namespace detail {

template <typename T>
T linear_quantile(std::vector<T>& sorted, double q) {
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    const T frac = static_cast<T>(pos - static_cast<double>(lo));
    return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

} // namespace detail

/// Direct pooling of N x F frames into one row vector.
template <typename T>
RowVector<T> pool(PoolingKind kind, const Matrix<T>& frames, std::optional<std::uint64_t> seed = std::nullopt) {
    const Eigen::Index n = frames.rows();
    const Eigen::Index f = frames.cols();
    if (n == 0) {
        throw ShapeError("pool: no frames");
    }
    switch (kind) {
    case PoolingKind::mean: return frames.colwise().mean();
    case PoolingKind::max: return frames.colwise().maxCoeff();
    case PoolingKind::mean_std: {
        RowVector<T> out(2 * f);
        const RowVector<T> mu = frames.colwise().mean();
        out.head(f) = mu;
        for (Eigen::Index c = 0; c < f; ++c) {
            out(f + c) = std::sqrt((frames.col(c).array() - mu(c)).square().mean());
        }
        return out;
    }
    case PoolingKind::quantile: {
        RowVector<T> out(3 * f);
        std::vector<T> col(static_cast<std::size_t>(n));
        for (Eigen::Index c = 0; c < f; ++c) {
            for (Eigen::Index r = 0; r < n; ++r) {
                col[r] = frames(r, c);
            }
            std::sort(col.begin(), col.end());
            out(c) = detail::linear_quantile(col, 0.25);
            out(f + c) = detail::linear_quantile(col, 0.5);
            out(2 * f + c) = detail::linear_quantile(col, 0.75);
        }
        return out;
    }
    default: {
        const auto row = static_cast<Eigen::Index>(selected_vertex(kind, static_cast<std::size_t>(n), seed) - 1);
        return frames.row(row);
    }
    }
}

// ---------------------------------------------------------------------------
// Max pooling approximated by an MLP over a graph shift, Y = MLP(A X^T).

/// One-hidden-layer relu MLP applied to the flattened shifted frames. Maps
/// N*F inputs to F outputs.
template <typename T>
struct ShiftMlp {
    Matrix<T> shift;  // N x N
    Matrix<T> w1;     // (N*F) x H
    Matrix<T> b1;     // 1 x H
    Matrix<T> w2;     // H x F
    Matrix<T> b2;     // 1 x F
    bool trained = false;

    ShiftMlp() = default;
    ShiftMlp(Matrix<T> a, std::size_t dim, std::size_t hidden)
        : shift(std::move(a)),
          w1(Matrix<T>::Zero(shift.rows() * static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(hidden))),
          b1(Matrix<T>::Zero(1, static_cast<Eigen::Index>(hidden))),
          w2(Matrix<T>::Zero(static_cast<Eigen::Index>(hidden), static_cast<Eigen::Index>(dim))),
          b2(Matrix<T>::Zero(1, static_cast<Eigen::Index>(dim))) {}

    /// Row-major flattening of A * frames into 1 x (N*F).
    Matrix<T> flatten_shifted(const Matrix<T>& frames) const {
        const Matrix<T> y = gfusion::shift(shift, frames);
        return Eigen::Map<const Matrix<T>>(y.data(), 1, y.size());
    }
};

/// Evaluates MLP(A X^T) for one utterance's frames.
template <typename T>
RowVector<T> max_as_mlp(const Matrix<T>& frames, const ShiftMlp<T>& mlp) {
    if (!mlp.trained) {
        throw UsageError("max_as_mlp: MLP parameters have not been fitted");
    }
    if (frames.rows() != mlp.shift.rows() || frames.size() != mlp.w1.rows()) {
        throw ShapeError("max_as_mlp: frames " + shape_str(frames) + " do not match the fitted MLP");
    }
    const Matrix<T> x = mlp.flatten_shifted(frames);
    const Matrix<T> h = ((x * mlp.w1) + mlp.b1).cwiseMax(T(0));
    return (h * mlp.w2) + mlp.b2;
}

struct MaxMlpFit {
    std::size_t hidden = 16;
    std::size_t iterations = 3000;
    double lr = 1e-2;
    std::uint64_t seed = 0;
};

/// Fits ShiftMlp to regress column-wise max pooling on `samples` (each N x F)
/// with full-batch Adam on mean squared error.
template <typename T>
ShiftMlp<T> fit_max_mlp(const std::vector<Matrix<T>>& samples, Matrix<T> shift_op, const MaxMlpFit& fit) {
    if (samples.empty()) {
        throw UsageError("fit_max_mlp: no samples");
    }
    const Eigen::Index n = samples[0].rows();
    const Eigen::Index f = samples[0].cols();
    ShiftMlp<T> mlp(std::move(shift_op), static_cast<std::size_t>(f), fit.hidden);

    std::mt19937_64 rng(fit.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    const double s1 = std::sqrt(2.0 / static_cast<double>(n * f));
    const double s2 = std::sqrt(1.0 / static_cast<double>(fit.hidden));
    for (Eigen::Index i = 0; i < mlp.w1.size(); ++i) mlp.w1.data()[i] = static_cast<T>(s1 * normal(rng));
    for (Eigen::Index i = 0; i < mlp.w2.size(); ++i) mlp.w2.data()[i] = static_cast<T>(s2 * normal(rng));

    Matrix<T> inputs(static_cast<Eigen::Index>(samples.size()), n * f);
    Matrix<T> targets(static_cast<Eigen::Index>(samples.size()), f);
    for (std::size_t s = 0; s < samples.size(); ++s) {
        inputs.row(s) = mlp.flatten_shifted(samples[s]);
        targets.row(s) = samples[s].colwise().maxCoeff();
    }

    Adam<T> adam;
    std::vector<Matrix<T>*> params{&mlp.w1, &mlp.b1, &mlp.w2, &mlp.b2};
    const T inv = T(1) / static_cast<T>(samples.size());
    for (std::size_t it = 0; it < fit.iterations; ++it) {
        ad::Tape<T> tape;
        std::vector<ad::Var<T>> leaves;
        auto x = tape.constant(inputs);
        for (auto* p : params) leaves.push_back(tape.param(*p));
        auto h = ad::relu(ad::add(ad::matmul(x, leaves[0]), leaves[1]));
        auto out = ad::add(ad::matmul(h, leaves[2]), leaves[3]);
        auto diff = ad::add(out, tape.constant(-targets));
        auto loss = ad::scale(ad::sum(ad::mul(diff, diff)), inv);
        tape.backward(loss);
        std::vector<Matrix<T>> grads;
        for (auto v : leaves) grads.push_back(tape.grad(v));
        adam.step(std::span<Matrix<T>* const>(params), std::span<const Matrix<T>>(grads), fit.lr);
    }
    mlp.trained = true;
    return mlp;
}

} // namespace gfusion
