#pragma once

// Reverse-mode differentiation over dense matrices.
//
// A Tape owns every node created while evaluating one expression graph. Nodes
// are appended in execution order, so reverse index order is a valid
// topological order for backward. Parameters enter as leaves that alias
// caller-owned storage; the tape never writes to them, only to its own
// gradient buffers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gfusion/error.hpp"
#include "gfusion/matrix.hpp"

namespace gfusion::ad {

template <typename T>
class Tape;

/// Handle to a node on a tape. Cheap to copy; only valid while the tape lives.
template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    std::size_t id = 0;

    const Matrix<T>& value() const { return tape->value(*this); }
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    /// Scalar value of a 1x1 node.
    T item() const {
        const auto& v = value();
        if (v.size() != 1) {
            throw ShapeError("item() on a non-scalar value " + shape_str(v));
        }
        return v(0, 0);
    }
};

template <typename T>
class Tape {
  public:
    using Backward = std::function<void(const Matrix<T>& upstream)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf without gradient.
    Var<T> constant(Matrix<T> value) { return push("constant", std::move(value), nullptr, false, {}); }

    /// Leaf owning its value, gradient tracked.
    Var<T> variable(Matrix<T> value) { return push("variable", std::move(value), nullptr, true, {}); }

    /// Leaf aliasing caller storage; `storage` must outlive the tape and stay
    /// unchanged until backward finishes.
    Var<T> param(const Matrix<T>& storage, bool requires_grad = true) {
        return push("param", Matrix<T>(), &storage, requires_grad, {});
    }

    /// Appends the result of a primitive. `backward` receives the upstream
    /// gradient and must accumulate into the inputs through `accumulate`.
    Var<T> record(const char* op, Matrix<T> value, bool requires_grad, Backward backward) {
        if (!value.allFinite()) {
            throw NumericError(std::string(op) + " produced a non-finite value");
        }
        return push(op, std::move(value), nullptr, requires_grad, requires_grad ? std::move(backward) : Backward{});
    }

    const Matrix<T>& value(Var<T> v) const { return node(v).value(); }
    bool requires_grad(Var<T> v) const { return node(v).requires_grad; }

    /// Accumulated gradient; zeros if nothing flowed into the node.
    Matrix<T> grad(Var<T> v) const {
        const Node& n = node(v);
        if (n.grad.size() == 0) {
            return Matrix<T>::Zero(n.value().rows(), n.value().cols());
        }
        return n.grad;
    }

    template <typename Derived>
    void accumulate(Var<T> v, const Eigen::MatrixBase<Derived>& g) {
        Node& n = node(v);
        if (!n.requires_grad) {
            return;
        }
        const auto& val = n.value();
        if (g.rows() != val.rows() || g.cols() != val.cols()) {
            throw ShapeError(std::string("gradient shape ") + shape_str(g) + " does not match value " +
                             shape_str(val) + " of " + n.op);
        }
        if (n.grad.size() == 0) {
            n.grad = g;
        } else {
            n.grad += g;
        }
    }

    /// Seeds d(root)/d(root) = 1 and runs every recorded backward once, in
    /// reverse order. A tape supports one backward per forward.
    void backward(Var<T> root) {
        if (consumed_) {
            throw UsageError("backward already ran on this tape; reset() before reuse");
        }
        const Node& r = node(root);
        if (r.value().size() != 1) {
            throw ShapeError("backward root must be a scalar, got " + shape_str(r.value()));
        }
        consumed_ = true;
        if (!r.requires_grad) {
            return;
        }
        accumulate(root, Matrix<T>::Ones(1, 1));
        for (std::size_t i = root.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.backward && n.grad.size() != 0) {
                n.backward(n.grad);
            }
        }
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        const char* op = "";
        Matrix<T> own;
        const Matrix<T>* ext = nullptr;
        Matrix<T> grad;
        bool requires_grad = false;
        Backward backward;

        const Matrix<T>& value() const { return ext ? *ext : own; }
    };

    Var<T> push(const char* op, Matrix<T> value, const Matrix<T>* ext, bool requires_grad, Backward bw) {
        if (consumed_) {
            throw UsageError("tape already consumed by backward; reset() before recording");
        }
        Node n;
        n.op = op;
        n.own = std::move(value);
        n.ext = ext;
        n.requires_grad = requires_grad;
        n.backward = std::move(bw);
        nodes_.push_back(std::move(n));
        return Var<T>{this, nodes_.size() - 1};
    }

    Node& node(Var<T> v) {
        check(v);
        return nodes_[v.id];
    }
    const Node& node(Var<T> v) const {
        check(v);
        return nodes_[v.id];
    }
    void check(Var<T> v) const {
        if (v.tape != this || v.id >= nodes_.size()) {
            throw UsageError("variable does not belong to this tape");
        }
    }

    std::vector<Node> nodes_;
    bool consumed_ = false;
};

namespace detail {

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b, const char* op) {
    if (a.tape == nullptr || a.tape != b.tape) {
        throw UsageError(std::string(op) + ": operands live on different tapes");
    }
    return *a.tape;
}

enum class Broadcast { none, row, col, scalar };

/// How `b` broadcasts against `a`: equal shape, 1xC row, Rx1 column or 1x1.
template <typename T>
Broadcast broadcast_kind(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
    if (a.rows() == b.rows() && a.cols() == b.cols()) {
        return Broadcast::none;
    }
    if (b.rows() == 1 && b.cols() == 1) {
        return Broadcast::scalar;
    }
    if (b.rows() == 1 && b.cols() == a.cols()) {
        return Broadcast::row;
    }
    if (b.cols() == 1 && b.rows() == a.rows()) {
        return Broadcast::col;
    }
    throw ShapeError(std::string(op) + ": cannot combine " + shape_str(a) + " with " + shape_str(b));
}

template <typename T>
Matrix<T> expand(const Matrix<T>& b, Eigen::Index rows, Eigen::Index cols, Broadcast k) {
    switch (k) {
    case Broadcast::none:
        return b;
    case Broadcast::row:
        return b.replicate(rows, 1);
    case Broadcast::col:
        return b.replicate(1, cols);
    case Broadcast::scalar:
        return Matrix<T>::Constant(rows, cols, b(0, 0));
    }
    return b;
}

template <typename T>
Matrix<T> reduce(const Matrix<T>& g, Broadcast k) {
    switch (k) {
    case Broadcast::none:
        return g;
    case Broadcast::row:
        return g.colwise().sum();
    case Broadcast::col:
        return g.rowwise().sum();
    case Broadcast::scalar:
        return Matrix<T>::Constant(1, 1, g.sum());
    }
    return g;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Primitives

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    auto& tape = detail::same_tape(a, b, "matmul");
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.cols() != bv.rows()) {
        throw ShapeError("matmul: " + shape_str(av) + " x " + shape_str(bv));
    }
    Matrix<T> out = av * bv;
    const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
    return tape.record("matmul", std::move(out), rg, [&tape, a, b](const Matrix<T>& g) {
        if (tape.requires_grad(a)) {
            tape.accumulate(a, g * tape.value(b).transpose());
        }
        if (tape.requires_grad(b)) {
            tape.accumulate(b, tape.value(a).transpose() * g);
        }
    });
}

template <typename T>
Var<T> transpose(Var<T> a) {
    auto& tape = *a.tape;
    Matrix<T> out = a.value().transpose();
    return tape.record("transpose", std::move(out), tape.requires_grad(a),
                       [&tape, a](const Matrix<T>& g) { tape.accumulate(a, g.transpose()); });
}

/// a + b, where b may be a row vector, column vector or scalar broadcast over a.
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    auto& tape = detail::same_tape(a, b, "add");
    const auto kind = detail::broadcast_kind(a.value(), b.value(), "add");
    Matrix<T> out = a.value() + detail::expand(b.value(), a.rows(), a.cols(), kind);
    const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
    return tape.record("add", std::move(out), rg, [&tape, a, b, kind](const Matrix<T>& g) {
        tape.accumulate(a, g);
        if (tape.requires_grad(b)) {
            tape.accumulate(b, detail::reduce(g, kind));
        }
    });
}

/// Elementwise a ⊙ b with the same broadcasting rules as add.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    auto& tape = detail::same_tape(a, b, "mul");
    const auto kind = detail::broadcast_kind(a.value(), b.value(), "mul");
    Matrix<T> out = a.value().cwiseProduct(detail::expand(b.value(), a.rows(), a.cols(), kind));
    const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
    return tape.record("mul", std::move(out), rg, [&tape, a, b, kind](const Matrix<T>& g) {
        const auto& av = tape.value(a);
        const auto& bv = tape.value(b);
        if (tape.requires_grad(a)) {
            tape.accumulate(a, g.cwiseProduct(detail::expand(bv, av.rows(), av.cols(), kind)));
        }
        if (tape.requires_grad(b)) {
            Matrix<T> gb = g.cwiseProduct(av);
            tape.accumulate(b, detail::reduce(gb, kind));
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    auto& tape = *a.tape;
    Matrix<T> out = a.value() * c;
    return tape.record("scale", std::move(out), tape.requires_grad(a),
                       [&tape, a, c](const Matrix<T>& g) { tape.accumulate(a, g * c); });
}

/// Sum of all entries, as a 1x1 value.
template <typename T>
Var<T> sum(Var<T> a) {
    auto& tape = *a.tape;
    Matrix<T> out = Matrix<T>::Constant(1, 1, a.value().sum());
    return tape.record("sum", std::move(out), tape.requires_grad(a), [&tape, a](const Matrix<T>& g) {
        const auto& av = tape.value(a);
        tape.accumulate(a, Matrix<T>::Constant(av.rows(), av.cols(), g(0, 0)));
    });
}

template <typename T>
Var<T> row_softmax(Var<T> a) {
    auto& tape = *a.tape;
    const auto& av = a.value();
    Matrix<T> out(av.rows(), av.cols());
    for (Eigen::Index r = 0; r < av.rows(); ++r) {
        const T mx = av.row(r).maxCoeff();
        out.row(r) = (av.row(r).array() - mx).exp().matrix();
        out.row(r) /= out.row(r).sum();
    }
    const auto self = tape.size();
    return tape.record("row_softmax", std::move(out), tape.requires_grad(a), [&tape, a, self](const Matrix<T>& g) {
        const auto& y = tape.value(Var<T>{&tape, self});
        Matrix<T> dot = g.cwiseProduct(y).rowwise().sum();
        Matrix<T> gx = y.cwiseProduct(g - dot.replicate(1, y.cols()));
        tape.accumulate(a, gx);
    });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
    auto& tape = *a.tape;
    Matrix<T> out = a.value().unaryExpr([](T x) {
        return x >= 0 ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
    });
    const auto self = tape.size();
    return tape.record("sigmoid", std::move(out), tape.requires_grad(a), [&tape, a, self](const Matrix<T>& g) {
        const auto& y = tape.value(Var<T>{&tape, self});
        tape.accumulate(a, g.cwiseProduct(y.unaryExpr([](T s) { return s * (T(1) - s); })));
    });
}

template <typename T>
Var<T> relu(Var<T> a) {
    auto& tape = *a.tape;
    Matrix<T> out = a.value().cwiseMax(T(0));
    return tape.record("relu", std::move(out), tape.requires_grad(a), [&tape, a](const Matrix<T>& g) {
        const auto& x = tape.value(a);
        tape.accumulate(a, g.cwiseProduct(x.unaryExpr([](T v) { return v > 0 ? T(1) : T(0); })));
    });
}

/// GELU, tanh approximation.
template <typename T>
Var<T> gelu(Var<T> a) {
    constexpr T k = T(0.7978845608028654); // sqrt(2/pi)
    constexpr T c = T(0.044715);
    auto& tape = *a.tape;
    Matrix<T> out = a.value().unaryExpr([](T x) { return T(0.5) * x * (T(1) + std::tanh(k * (x + c * x * x * x))); });
    return tape.record("gelu", std::move(out), tape.requires_grad(a), [&tape, a](const Matrix<T>& g) {
        const auto& x = tape.value(a);
        Matrix<T> d = x.unaryExpr([](T v) {
            const T t = std::tanh(k * (v + c * v * v * v));
            return T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * k * (T(1) + T(3) * c * v * v);
        });
        tape.accumulate(a, g.cwiseProduct(d));
    });
}

/// Per-row layer normalization with learnable 1xC gain and bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
    auto& tape = detail::same_tape(x, gain, "layer_norm");
    detail::same_tape(x, bias, "layer_norm");
    const auto& xv = x.value();
    const Eigen::Index n = xv.rows();
    const Eigen::Index c = xv.cols();
    if (gain.rows() != 1 || gain.cols() != c || bias.rows() != 1 || bias.cols() != c) {
        throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(c));
    }
    Matrix<T> xhat(n, c);
    Matrix<T> inv_std(n, 1);
    for (Eigen::Index r = 0; r < n; ++r) {
        const T mu = xv.row(r).mean();
        const T var = (xv.row(r).array() - mu).square().mean();
        inv_std(r, 0) = T(1) / std::sqrt(var + eps);
        xhat.row(r) = (xv.row(r).array() - mu).matrix() * inv_std(r, 0);
    }
    Matrix<T> out = xhat.cwiseProduct(gain.value().replicate(n, 1)) + bias.value().replicate(n, 1);
    const bool rg = tape.requires_grad(x) || tape.requires_grad(gain) || tape.requires_grad(bias);
    return tape.record("layer_norm", std::move(out), rg,
                       [&tape, x, gain, bias, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Matrix<T>& g) {
                           const Eigen::Index rows = xhat.rows();
                           if (tape.requires_grad(gain)) {
                               tape.accumulate(gain, g.cwiseProduct(xhat).colwise().sum());
                           }
                           if (tape.requires_grad(bias)) {
                               tape.accumulate(bias, g.colwise().sum());
                           }
                           if (tape.requires_grad(x)) {
                               Matrix<T> gh = g.cwiseProduct(tape.value(gain).replicate(rows, 1));
                               Matrix<T> gx(rows, xhat.cols());
                               for (Eigen::Index r = 0; r < rows; ++r) {
                                   const T m1 = gh.row(r).mean();
                                   const T m2 = gh.row(r).cwiseProduct(xhat.row(r)).mean();
                                   gx.row(r) = inv_std(r, 0) * (gh.row(r).array() - m1 - xhat.row(r).array() * m2).matrix();
                               }
                               tape.accumulate(x, gx);
                           }
                       });
}

/// S(i, j) = cos(row_i, row_j); row norms are clamped below at `min_norm`.
template <typename T>
Var<T> cosine_similarity_matrix(Var<T> b, T min_norm = T(1e-12)) {
    auto& tape = *b.tape;
    const auto& bv = b.value();
    Matrix<T> norms = bv.rowwise().norm().cwiseMax(min_norm);
    Matrix<T> unit = bv.array().colwise() / norms.col(0).array();
    Matrix<T> out = unit * unit.transpose();
    return tape.record("cosine_similarity_matrix", std::move(out), tape.requires_grad(b),
                       [&tape, b, min_norm, norms = std::move(norms), unit = std::move(unit)](const Matrix<T>& g) {
                           const auto& raw = tape.value(b);
                           Matrix<T> gu = (g + g.transpose()) * unit;
                           Matrix<T> gb(unit.rows(), unit.cols());
                           for (Eigen::Index r = 0; r < unit.rows(); ++r) {
                               if (raw.row(r).norm() > min_norm) {
                                   const T proj = unit.row(r).dot(gu.row(r));
                                   gb.row(r) = (gu.row(r) - unit.row(r) * proj) / norms(r, 0);
                               } else {
                                   gb.row(r) = gu.row(r) / norms(r, 0);
                               }
                           }
                           tape.accumulate(b, gb);
                       });
}

/// Column means over all rows, 1xC.
template <typename T>
Var<T> mean_over_rows(Var<T> a) {
    auto& tape = *a.tape;
    Matrix<T> out = a.value().colwise().mean();
    return tape.record("mean_over_rows", std::move(out), tape.requires_grad(a), [&tape, a](const Matrix<T>& g) {
        const auto n = tape.value(a).rows();
        tape.accumulate(a, g.replicate(n, 1) / static_cast<T>(n));
    });
}

/// Column maxima, 1xC. The gradient goes to the first row holding the max.
template <typename T>
Var<T> max_over_rows(Var<T> a) {
    auto& tape = *a.tape;
    const auto& av = a.value();
    if (av.rows() == 0) {
        throw ShapeError("max_over_rows on an empty matrix");
    }
    Matrix<T> out(1, av.cols());
    std::vector<Eigen::Index> arg(static_cast<std::size_t>(av.cols()));
    for (Eigen::Index c = 0; c < av.cols(); ++c) {
        Eigen::Index best = 0;
        for (Eigen::Index r = 1; r < av.rows(); ++r) {
            if (av(r, c) > av(best, c)) {
                best = r;
            }
        }
        arg[c] = best;
        out(0, c) = av(best, c);
    }
    return tape.record("max_over_rows", std::move(out), tape.requires_grad(a),
                       [&tape, a, arg = std::move(arg)](const Matrix<T>& g) {
                           const auto& av = tape.value(a);
                           Matrix<T> ga = Matrix<T>::Zero(av.rows(), av.cols());
                           for (Eigen::Index c = 0; c < av.cols(); ++c) {
                               ga(arg[c], c) = g(0, c);
                           }
                           tape.accumulate(a, ga);
                       });
}

/// Vertical concatenation; all parts share the column count.
template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows of nothing");
    }
    auto& tape = *parts[0].tape;
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts[0].cols();
    bool rg = false;
    for (const auto& p : parts) {
        detail::same_tape(parts[0], p, "concat_rows");
        if (p.cols() != cols) {
            throw ShapeError("concat_rows: column mismatch " + shape_str(p.value()) + " vs " + std::to_string(cols));
        }
        rows += p.rows();
        rg = rg || tape.requires_grad(p);
    }
    Matrix<T> out(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    std::vector<Var<T>> ins(parts.begin(), parts.end());
    return tape.record("concat_rows", std::move(out), rg, [&tape, ins = std::move(ins)](const Matrix<T>& g) {
        Eigen::Index at = 0;
        for (const auto& p : ins) {
            const auto r = tape.value(p).rows();
            if (tape.requires_grad(p)) {
                tape.accumulate(p, g.middleRows(at, r));
            }
            at += r;
        }
    });
}

template <typename T>
Var<T> concat_rows(std::initializer_list<Var<T>> parts) {
    return concat_rows(std::span<const Var<T>>(parts.begin(), parts.size()));
}

} // namespace gfusion::ad
