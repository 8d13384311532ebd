#pragma once

// Cosine-similarity attention adjacency over a fully connected frame graph:
//   b_i = W x_i
//   a(i, j) = exp(beta * cos(b_i, b_j)) / sum_k exp(beta * cos(b_i, b_k))
// Self-loops are kept. Rows sum to one; A is not symmetric in general.

#include <cmath>
#include <random>

#include "gfusion/diffcore.hpp"
#include "gfusion/matrix.hpp"

namespace gfusion {

template <typename T>
struct AttentionParams {
    Matrix<T> projection; // F' x F
    Matrix<T> beta;       // 1 x 1

    /// Uniform(-1/sqrt(F), 1/sqrt(F)) projection, beta = 1.
    static AttentionParams init(Eigen::Index in_dim, Eigen::Index out_dim, std::mt19937_64& rng) {
        AttentionParams p;
        const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim));
        std::uniform_real_distribution<double> u(-bound, bound);
        p.projection.resize(out_dim, in_dim);
        for (Eigen::Index i = 0; i < p.projection.size(); ++i) {
            p.projection.data()[i] = static_cast<T>(u(rng));
        }
        p.beta = Matrix<T>::Constant(1, 1, T(1));
        return p;
    }
};

/// B = X W^T, one projected row per vertex.
template <typename T>
ad::Var<T> project(ad::Var<T> frames, ad::Var<T> projection) {
    if (frames.cols() != projection.cols()) {
        throw ShapeError("project: frames " + shape_str(frames.value()) + " vs projection " +
                         shape_str(projection.value()));
    }
    return ad::matmul(frames, ad::transpose(projection));
}

template <typename T>
ad::Var<T> build_adjacency(ad::Var<T> projected, ad::Var<T> beta) {
    if (projected.rows() < 1) {
        throw ShapeError("build_adjacency: graph has no vertices");
    }
    if (beta.rows() != 1 || beta.cols() != 1) {
        throw ShapeError("build_adjacency: beta must be a scalar");
    }
    return ad::row_softmax(ad::mul(ad::cosine_similarity_matrix(projected), beta));
}

/// Adjacency for already-projected rows, without gradient tracking.
template <typename T>
Matrix<T> adjacency(const Matrix<T>& projected, T beta) {
    ad::Tape<T> tape;
    auto b = tape.constant(projected);
    auto bt = tape.constant(Matrix<T>::Constant(1, 1, beta));
    return build_adjacency(b, bt).value();
}

} // namespace gfusion
