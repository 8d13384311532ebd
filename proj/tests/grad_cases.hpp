#pragma once

#include <functional>
#include <string>
#include <vector>

#include "gfusion/grad_check.hpp"
#include "test_support.hpp"

namespace gfusion::test {

struct PrimitiveCase {
    std::string name;
    std::function<ad::Var<double>(std::span<const ad::Var<double>>)> op;
    std::vector<Matrix<double>> inputs;
};

/// One case per differentiable primitive, with random inputs in [-2, 2].
inline std::vector<PrimitiveCase> primitive_cases(std::mt19937_64& rng) {
    using S = std::span<const ad::Var<double>>;
    auto rnd = [&](Eigen::Index r, Eigen::Index c) { return random_matrix(r, c, rng); };
    return {
        {"matmul", [](S p) { return ad::matmul(p[0], p[1]); }, {rnd(3, 4), rnd(4, 2)}},
        {"transpose", [](S p) { return ad::transpose(p[0]); }, {rnd(3, 4)}},
        {"add", [](S p) { return ad::add(p[0], p[1]); }, {rnd(3, 4), rnd(3, 4)}},
        {"add_row", [](S p) { return ad::add(p[0], p[1]); }, {rnd(3, 4), rnd(1, 4)}},
        {"add_col", [](S p) { return ad::add(p[0], p[1]); }, {rnd(3, 4), rnd(3, 1)}},
        {"mul", [](S p) { return ad::mul(p[0], p[1]); }, {rnd(3, 4), rnd(3, 4)}},
        {"mul_scalar", [](S p) { return ad::mul(p[0], p[1]); }, {rnd(3, 4), rnd(1, 1)}},
        {"scale", [](S p) { return ad::scale(p[0], -1.7); }, {rnd(2, 3)}},
        {"row_softmax", [](S p) { return ad::row_softmax(p[0]); }, {rnd(3, 5)}},
        {"sigmoid", [](S p) { return ad::sigmoid(p[0]); }, {rnd(3, 4)}},
        {"relu", [](S p) { return ad::relu(p[0]); }, {rnd(3, 4)}},
        {"gelu", [](S p) { return ad::gelu(p[0]); }, {rnd(3, 4)}},
        {"layer_norm", [](S p) { return ad::layer_norm(p[0], p[1], p[2]); }, {rnd(3, 6), rnd(1, 6), rnd(1, 6)}},
        {"cosine_similarity_matrix", [](S p) { return ad::cosine_similarity_matrix(p[0]); }, {rnd(4, 3)}},
        {"mean_over_rows", [](S p) { return ad::mean_over_rows(p[0]); }, {rnd(5, 3)}},
        {"max_over_rows", [](S p) { return ad::max_over_rows(p[0]); }, {rnd(5, 3)}},
        {"concat_rows", [](S p) { return ad::concat_rows({p[0], p[1]}); }, {rnd(2, 3), rnd(3, 3)}},
        {"sum", [](S p) { return ad::sum(p[0]); }, {rnd(2, 3)}},
    };
}

/// grad_check of sum(R ⊙ op(inputs)) for a fixed random R, so every output
/// entry carries a distinct weight.
inline ad::GradCheckReport check_primitive(const PrimitiveCase& c, std::uint64_t seed, double tol = 1e-4) {
    std::mt19937_64 rng(seed);
    std::vector<Matrix<double>> inputs = c.inputs;
    std::vector<Matrix<double>*> ptrs;
    for (auto& m : inputs) ptrs.push_back(&m);
    Matrix<double> weights;
    {
        ad::Tape<double> t;
        std::vector<ad::Var<double>> leaves;
        for (auto& m : inputs) leaves.push_back(t.constant(m));
        const auto out = c.op(std::span<const ad::Var<double>>(leaves));
        weights = random_matrix(out.rows(), out.cols(), rng, -1.0, 1.0);
    }
    auto f = [&](ad::Tape<double>& t, std::span<const ad::Var<double>> leaves) {
        return ad::sum(ad::mul(c.op(leaves), t.constant(weights)));
    };
    return ad::grad_check<double>(f, std::span<Matrix<double>* const>(ptrs), 1e-6, tol);
}

} // namespace gfusion::test
