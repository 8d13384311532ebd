#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <string>

#include "gfusion/error.hpp"

namespace gfusion {

/// Dense row-major matrix. Rows are vertices (frames), columns are features.
template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic, Eigen::RowMajor>;

inline std::string shape_str(Eigen::Index rows, Eigen::Index cols) {
    return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

template <typename Derived>
std::string shape_str(const Eigen::MatrixBase<Derived>& m) {
    return shape_str(m.rows(), m.cols());
}

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
    return m.allFinite();
}

} // namespace gfusion
