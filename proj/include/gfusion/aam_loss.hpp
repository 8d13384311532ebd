#pragma once

// Additive angular margin softmax.
//
//   c_j    = <e/|e|, w_j/|w_j|>
//   logit_j = s * c_j                          j != y
//   logit_y = s * cos(acos(clamp(c_y)) + m)
//   loss   = logsumexp(logits) - logit_y

#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "gfusion/dataio.hpp"
#include "gfusion/diffcore.hpp"
#include "gfusion/matrix.hpp"

namespace gfusion {

struct AamConfig {
    double margin = 0.2;
    double scale = 30.0;
    /// acos argument is clamped to [-1 + clamp_eps, 1 - clamp_eps].
    double clamp_eps = 1e-7;

    void validate() const {
        if (!(margin >= 0.0 && margin < std::numbers::pi / 2)) {
            throw UsageError("aam: margin must lie in [0, pi/2)");
        }
        if (!(scale > 0.0)) {
            throw UsageError("aam: scale must be positive");
        }
    }
};

template <typename T>
struct AamHead {
    Matrix<T> class_weights; // C x D, rows normalised at use
    AamConfig config;

    static AamHead init(std::size_t classes, std::size_t dim, AamConfig config, std::uint64_t seed) {
        if (classes < 2) {
            throw DataError("aam: need at least 2 classes, got " + std::to_string(classes));
        }
        config.validate();
        AamHead h;
        h.config = config;
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> normal(0.0, 1.0);
        h.class_weights.resize(static_cast<Eigen::Index>(classes), static_cast<Eigen::Index>(dim));
        for (Eigen::Index i = 0; i < h.class_weights.size(); ++i) {
            h.class_weights.data()[i] = static_cast<T>(normal(rng));
        }
        return h;
    }

    std::size_t classes() const { return static_cast<std::size_t>(class_weights.rows()); }
    std::size_t count() const { return static_cast<std::size_t>(class_weights.size()); }
};

/// Scalar AAM loss for one embedding (1 x D) against class weights (C x D).
template <typename T>
ad::Var<T> aam_loss(ad::Var<T> embedding, ad::Var<T> class_weights, std::size_t label, const AamConfig& cfg) {
    auto& tape = *embedding.tape;
    const auto& e = embedding.value();
    const auto& w = class_weights.value();
    if (e.rows() != 1 || e.cols() != w.cols()) {
        throw ShapeError("aam_loss: embedding " + shape_str(e) + " vs class weights " + shape_str(w));
    }
    if (label >= static_cast<std::size_t>(w.rows())) {
        throw UsageError("aam_loss: label " + std::to_string(label) + " out of range for " +
                         std::to_string(w.rows()) + " classes");
    }
    const T enorm = e.norm();
    if (!(enorm > T(0))) {
        throw NumericError("aam_loss: zero embedding");
    }
    const T s = static_cast<T>(cfg.scale);
    const T m = static_cast<T>(cfg.margin);
    const T lim = T(1) - static_cast<T>(cfg.clamp_eps);
    const auto y = static_cast<Eigen::Index>(label);

    const Matrix<T> eu = e / enorm;
    Matrix<T> wnorm = w.rowwise().norm().cwiseMax(T(1e-12));
    const Matrix<T> wu = w.array().colwise() / wnorm.col(0).array();
    const Matrix<T> cosines = wu * eu.transpose(); // C x 1

    const T cy = cosines(y, 0);
    const T cyc = std::clamp(cy, -lim, lim);
    const T theta = std::acos(cyc);
    Matrix<T> logits = cosines * s;
    logits(y, 0) = s * std::cos(theta + m);
    const T mx = logits.maxCoeff();
    Matrix<T> prob = (logits.array() - mx).exp().matrix();
    const T z = prob.sum();
    T rest = 0;
    for (Eigen::Index j = 0; j < prob.rows(); ++j) {
        if (j != y) rest += prob(j, 0);
    }
    prob /= z;
    // When the target logit is the largest, log1p keeps tiny losses accurate.
    const T loss = logits(y, 0) >= mx ? std::log1p(rest) : std::log(z) + mx - logits(y, 0);

    // d logit_y / d c_y; zero outside the clamp.
    const T dlogit_y = (cy > -lim && cy < lim) ? s * std::sin(theta + m) / std::sin(theta) : T(0);

    const bool rg = tape.requires_grad(embedding) || tape.requires_grad(class_weights);
    return tape.record(
        "aam_loss", Matrix<T>::Constant(1, 1, loss), rg,
        [&tape, embedding, class_weights, y, s, dlogit_y, enorm, eu, wu, wnorm = std::move(wnorm), cosines,
         prob = std::move(prob)](const Matrix<T>& g) {
            Matrix<T> dc = (prob * s); // dL/dc_j for j != y
            dc(y, 0) = (prob(y, 0) - T(1)) * dlogit_y;
            dc *= g(0, 0);
            if (tape.requires_grad(embedding)) {
                const Matrix<T> deu = dc.transpose() * wu; // 1 x D
                const T proj = deu.row(0).dot(eu.row(0));
                tape.accumulate(embedding, (deu - eu * proj) / enorm);
            }
            if (tape.requires_grad(class_weights)) {
                Matrix<T> dwu = dc * eu; // C x D
                Matrix<T> dw(dwu.rows(), dwu.cols());
                for (Eigen::Index j = 0; j < dwu.rows(); ++j) {
                    dw.row(j) = (dwu.row(j) - wu.row(j) * cosines(j, 0) * dc(j, 0)) / wnorm(j, 0);
                }
                tape.accumulate(class_weights, dw);
            }
        });
}

} // namespace gfusion
