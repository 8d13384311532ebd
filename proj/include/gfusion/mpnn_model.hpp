#pragma once

// Graph pooling model: frames of one utterance are the vertices of a fully
// connected graph whose edge weights come from cosine attention.
//
//   x    = sum_i w_i x_i / sum_i w_i                 (optional layer weighting)
//   H_0  = B = x W^T,  A = attention(B)              (adjacency built once)
//   M_t  = A H_{t-1}
//   H_t  = act(LN_t(MLP_t(M_t)))                     t = 1..T
//   G    = MLP_theta(H_T) ⊙ sigmoid(MLP_phi(H_T))    (thin: G = MLP_theta(H_T))
//   h    = sum_{t=0..T} mean_v(H_t) + max_v(G)
//
// States are N x F' with vertices as rows. Every MLP is Linear -> act -> Linear
// with biases, hidden width `mlp_hidden`.
//
// The same configuration also describes classical pooling baselines
// (pooling != "gnn"): the optional layer weighting followed by a fixed pooling.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "gfusion/classical_pooling.hpp"
#include "gfusion/dataio.hpp"
#include "gfusion/diffcore.hpp"
#include "gfusion/graph_attention.hpp"
#include "gfusion/matrix.hpp"

namespace gfusion {

enum class Activation { relu, gelu, sigmoid };

inline Activation parse_activation(std::string_view name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    if (name == "sigmoid") return Activation::sigmoid;
    throw UsageError("unknown activation '" + std::string(name) + "'");
}

template <typename T>
ad::Var<T> activate(Activation act, ad::Var<T> x) {
    switch (act) {
    case Activation::relu: return ad::relu(x);
    case Activation::gelu: return ad::gelu(x);
    case Activation::sigmoid: return ad::sigmoid(x);
    }
    return x;
}

struct ModelConfig {
    std::size_t input_dim = 768;
    std::size_t projected_dim = 768;
    std::size_t rounds = 2;
    std::size_t mlp_hidden = 1024;
    std::string activation = "relu";
    bool use_layer_weighting = true;
    bool thin = false;
    std::size_t layers = 13;
    /// "gnn" or a classical pooling kind name.
    std::string pooling = "gnn";

    bool is_gnn() const { return pooling == "gnn"; }

    void validate() const {
        if (input_dim < 1 || projected_dim < 1 || mlp_hidden < 1) {
            throw UsageError("model: dimensions must be >= 1");
        }
        if (rounds < 1) {
            throw UsageError("model: rounds (T) must be >= 1");
        }
        if (use_layer_weighting && layers < 1) {
            throw UsageError("model: layer weighting needs layers >= 1");
        }
        parse_activation(activation);
        if (!is_gnn()) {
            const auto kind = parse_pooling_kind(pooling);
            if (use_layer_weighting && (kind == PoolingKind::mean_std || kind == PoolingKind::quantile)) {
                throw UsageError("model: layer weighting needs a differentiable pooling, not " + pooling);
            }
        }
    }

    std::size_t embedding_dim() const {
        return is_gnn() ? projected_dim : pooled_dim(parse_pooling_kind(pooling), input_dim);
    }
};

/// Pooling-stack parameter count implied by a configuration:
///   W (F'F) + beta (1)
///   + (T + 1 + [!thin]) MLPs of (F'H + H + HF' + F')
///   + T layer norms of 2F'
///   + layer weights (L, when weighting)
inline std::size_t parameter_count(const ModelConfig& c) {
    std::size_t total = c.use_layer_weighting ? c.layers : 0;
    if (!c.is_gnn()) {
        return total;
    }
    const std::size_t f = c.projected_dim;
    const std::size_t h = c.mlp_hidden;
    const std::size_t mlp = f * h + h + h * f + f;
    const std::size_t mlps = c.rounds + 1 + (c.thin ? 0 : 1);
    total += f * c.input_dim + 1;
    total += mlps * mlp;
    total += c.rounds * 2 * f;
    return total;
}

template <typename T>
struct MlpParams {
    Matrix<T> w1; // in x hidden
    Matrix<T> b1; // 1 x hidden
    Matrix<T> w2; // hidden x out
    Matrix<T> b2; // 1 x out

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
    static MlpParams init(Eigen::Index in, Eigen::Index hidden, Eigen::Index out, std::mt19937_64& rng) {
        MlpParams p;
        auto fill = [&rng](Matrix<T>& m, Eigen::Index rows, Eigen::Index cols, Eigen::Index fan_in) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            std::uniform_real_distribution<double> u(-bound, bound);
            m.resize(rows, cols);
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                m.data()[i] = static_cast<T>(u(rng));
            }
        };
        fill(p.w1, in, hidden, in);
        fill(p.b1, 1, hidden, in);
        fill(p.w2, hidden, out, hidden);
        fill(p.b2, 1, out, hidden);
        return p;
    }
};

template <typename T>
struct ModelParams {
    AttentionParams<T> attention;
    std::vector<MlpParams<T>> update; // one per round
    std::vector<Matrix<T>> ln_gain;   // 1 x F' per round
    std::vector<Matrix<T>> ln_bias;
    MlpParams<T> theta;
    MlpParams<T> phi;
    bool has_phi = false;
    bool has_gnn = false;
    Matrix<T> layer_weights; // 1 x L, empty without weighting

    static ModelParams init(const ModelConfig& c, std::uint64_t seed) {
        c.validate();
        std::mt19937_64 rng(seed);
        ModelParams p;
        if (c.use_layer_weighting) {
            p.layer_weights = Matrix<T>::Ones(1, static_cast<Eigen::Index>(c.layers));
        }
        if (!c.is_gnn()) {
            return p;
        }
        const auto f = static_cast<Eigen::Index>(c.projected_dim);
        const auto h = static_cast<Eigen::Index>(c.mlp_hidden);
        p.has_gnn = true;
        p.attention = AttentionParams<T>::init(static_cast<Eigen::Index>(c.input_dim), f, rng);
        for (std::size_t t = 0; t < c.rounds; ++t) {
            p.update.push_back(MlpParams<T>::init(f, h, f, rng));
            p.ln_gain.push_back(Matrix<T>::Ones(1, f));
            p.ln_bias.push_back(Matrix<T>::Zero(1, f));
        }
        p.theta = MlpParams<T>::init(f, h, f, rng);
        if (!c.thin) {
            p.has_phi = true;
            p.phi = MlpParams<T>::init(f, h, f, rng);
        }
        return p;
    }

    /// Every tensor with a stable name, in a fixed order.
    std::vector<std::pair<std::string, Matrix<T>*>> named() {
        std::vector<std::pair<std::string, Matrix<T>*>> out;
        if (layer_weights.size() != 0) {
            out.emplace_back("layer_weights", &layer_weights);
        }
        if (!has_gnn) {
            return out;
        }
        auto mlp = [&out](const std::string& prefix, MlpParams<T>& m) {
            out.emplace_back(prefix + ".w1", &m.w1);
            out.emplace_back(prefix + ".b1", &m.b1);
            out.emplace_back(prefix + ".w2", &m.w2);
            out.emplace_back(prefix + ".b2", &m.b2);
        };
        out.emplace_back("attention.projection", &attention.projection);
        out.emplace_back("attention.beta", &attention.beta);
        for (std::size_t t = 0; t < update.size(); ++t) {
            const std::string prefix = "update." + std::to_string(t + 1);
            mlp(prefix + ".mlp", update[t]);
            out.emplace_back(prefix + ".ln.gain", &ln_gain[t]);
            out.emplace_back(prefix + ".ln.bias", &ln_bias[t]);
        }
        mlp("readout.theta", theta);
        if (has_phi) {
            mlp("readout.phi", phi);
        }
        return out;
    }

    std::vector<std::pair<std::string, const Matrix<T>*>> named() const {
        std::vector<std::pair<std::string, const Matrix<T>*>> out;
        for (auto& [name, ptr] : const_cast<ModelParams*>(this)->named()) {
            out.emplace_back(name, ptr);
        }
        return out;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [name, m] : named()) {
            n += static_cast<std::size_t>(m->size());
        }
        return n;
    }

    void save(TensorBundle& bundle, const std::string& prefix = "model.") const {
        for (const auto& [name, m] : named()) {
            bundle.put_matrix(prefix + name, *m);
        }
    }

    static ModelParams load(const TensorBundle& bundle, const ModelConfig& c, const std::string& prefix = "model.") {
        ModelParams p = init(c, 0);
        for (auto& [name, m] : p.named()) {
            Matrix<T> loaded = bundle.get_matrix<T>(prefix + name);
            if (loaded.rows() != m->rows() || loaded.cols() != m->cols()) {
                throw ShapeError("checkpoint tensor '" + name + "' is " + shape_str(loaded) + ", config expects " +
                                 shape_str(*m));
            }
            *m = std::move(loaded);
        }
        return p;
    }
};

/// Tape leaves mirroring ModelParams::named() order.
template <typename T>
struct BoundParams {
    struct Mlp {
        ad::Var<T> w1, b1, w2, b2;
    };
    std::vector<ad::Var<T>> all;
    ad::Var<T> projection, beta, layer_weights;
    std::vector<Mlp> update;
    std::vector<ad::Var<T>> ln_gain, ln_bias;
    Mlp theta, phi;
    bool has_phi = false;
    bool has_gnn = false;
    bool has_layer_weights = false;

    static BoundParams bind(ad::Tape<T>& tape, const ModelParams<T>& p, bool requires_grad = true) {
        BoundParams b;
        auto leaf = [&](const Matrix<T>& m) {
            auto v = tape.param(m, requires_grad);
            b.all.push_back(v);
            return v;
        };
        auto mlp = [&](const MlpParams<T>& m) { return Mlp{leaf(m.w1), leaf(m.b1), leaf(m.w2), leaf(m.b2)}; };
        if (p.layer_weights.size() != 0) {
            b.has_layer_weights = true;
            b.layer_weights = leaf(p.layer_weights);
        }
        if (!p.has_gnn) {
            return b;
        }
        b.has_gnn = true;
        b.projection = leaf(p.attention.projection);
        b.beta = leaf(p.attention.beta);
        for (std::size_t t = 0; t < p.update.size(); ++t) {
            b.update.push_back(mlp(p.update[t]));
            b.ln_gain.push_back(leaf(p.ln_gain[t]));
            b.ln_bias.push_back(leaf(p.ln_bias[t]));
        }
        b.theta = mlp(p.theta);
        if (p.has_phi) {
            b.has_phi = true;
            b.phi = mlp(p.phi);
        }
        return b;
    }
};

template <typename T>
ad::Var<T> apply_mlp(const typename BoundParams<T>::Mlp& m, ad::Var<T> x, Activation act) {
    auto h = activate(act, ad::add(ad::matmul(x, m.w1), m.b1));
    return ad::add(ad::matmul(h, m.w2), m.b2);
}

// ---------------------------------------------------------------------------
// Stages

/// x = sum_i w_i x_i / sum_i w_i over N x F layers; w is 1 x L.
template <typename T>
ad::Var<T> weight_layers(std::span<const ad::Var<T>> layers, ad::Var<T> weights) {
    auto& tape = *weights.tape;
    if (weights.rows() != 1 || static_cast<std::size_t>(weights.cols()) != layers.size() || layers.empty()) {
        throw ShapeError("weight_layers: " + std::to_string(layers.size()) + " layers vs weights " +
                         shape_str(weights.value()));
    }
    const auto& w = weights.value();
    const T total = w.sum();
    if (std::abs(total) < T(1e-8)) {
        throw NumericError("weight_layers: layer weights sum to ~0 (degenerate weighting)");
    }
    Matrix<T> out = Matrix<T>::Zero(layers[0].rows(), layers[0].cols());
    bool rg = tape.requires_grad(weights);
    for (std::size_t l = 0; l < layers.size(); ++l) {
        if (layers[l].rows() != out.rows() || layers[l].cols() != out.cols()) {
            throw ShapeError("weight_layers: layer shapes differ");
        }
        out += w(0, static_cast<Eigen::Index>(l)) * layers[l].value();
        rg = rg || tape.requires_grad(layers[l]);
    }
    out /= total;
    const auto self = tape.size();
    std::vector<ad::Var<T>> ins(layers.begin(), layers.end());
    return tape.record("weight_layers", std::move(out), rg,
                       [&tape, ins = std::move(ins), weights, self, total](const Matrix<T>& g) {
                           const auto& w = tape.value(weights);
                           const auto& y = tape.value(ad::Var<T>{&tape, self});
                           const T gy = g.cwiseProduct(y).sum();
                           Matrix<T> gw(1, w.cols());
                           for (std::size_t l = 0; l < ins.size(); ++l) {
                               const auto li = static_cast<Eigen::Index>(l);
                               gw(0, li) = (g.cwiseProduct(tape.value(ins[l])).sum() - gy) / total;
                               if (tape.requires_grad(ins[l])) {
                                   tape.accumulate(ins[l], g * (w(0, li) / total));
                               }
                           }
                           tape.accumulate(weights, gw);
                       });
}

/// M = A H_prev.
template <typename T>
ad::Var<T> message(ad::Var<T> adjacency, ad::Var<T> prev) {
    if (adjacency.cols() != prev.rows() || adjacency.rows() != adjacency.cols()) {
        throw ShapeError("message: adjacency " + shape_str(adjacency.value()) + " vs states " +
                         shape_str(prev.value()));
    }
    return ad::matmul(adjacency, prev);
}

/// H_t = act(LN_t(MLP_t(M))), with 1-based round index t.
template <typename T>
ad::Var<T> update(const BoundParams<T>& p, ad::Var<T> msg, std::size_t t, Activation act) {
    if (t < 1 || t > p.update.size()) {
        throw UsageError("update: round " + std::to_string(t) + " outside 1.." + std::to_string(p.update.size()));
    }
    const auto i = t - 1;
    return activate(act, ad::layer_norm(apply_mlp<T>(p.update[i], msg, act), p.ln_gain[i], p.ln_bias[i]));
}

template <typename T>
struct Readout {
    ad::Var<T> gated;
    ad::Var<T> embedding;
};

/// history = [H_0 .. H_T].
template <typename T>
Readout<T> readout(const BoundParams<T>& p, std::span<const ad::Var<T>> history, Activation act) {
    if (history.size() < 2) {
        throw UsageError("readout: history must hold H_0 and at least one update");
    }
    const auto last = history.back();
    ad::Var<T> gated = apply_mlp<T>(p.theta, last, act);
    if (p.has_phi) {
        gated = ad::mul(gated, ad::sigmoid(apply_mlp<T>(p.phi, last, act)));
    }
    ad::Var<T> h = ad::mean_over_rows(history[0]);
    for (std::size_t t = 1; t < history.size(); ++t) {
        h = ad::add(h, ad::mean_over_rows(history[t]));
    }
    return {gated, ad::add(h, ad::max_over_rows(gated))};
}

/// Everything a forward pass produced, for inspection and loss construction.
template <typename T>
struct ForwardTrace {
    ad::Var<T> input;     // N x F after layer weighting
    ad::Var<T> adjacency; // N x N (gnn only)
    std::vector<ad::Var<T>> history;
    ad::Var<T> gated;
    ad::Var<T> embedding; // 1 x D
};

/// Layers the model consumes from a stack: all L under weighting, otherwise the
/// final layer only.
template <typename T>
std::vector<Matrix<T>> model_inputs(const FeatureStack& stack, const ModelConfig& c) {
    if (stack.dim != c.input_dim) {
        throw ShapeError("features have F=" + std::to_string(stack.dim) + ", model expects " +
                         std::to_string(c.input_dim));
    }
    std::vector<Matrix<T>> out;
    if (c.use_layer_weighting) {
        if (stack.layers != c.layers) {
            throw ShapeError("layer weighting expects " + std::to_string(c.layers) + " layers, stack has " +
                             std::to_string(stack.layers));
        }
        for (std::size_t l = 0; l < stack.layers; ++l) {
            out.push_back(stack.layer<T>(l));
        }
    } else {
        out.push_back(stack.layer<T>(stack.layers - 1));
    }
    return out;
}

template <typename T>
ForwardTrace<T> forward(ad::Tape<T>& tape, const BoundParams<T>& p, const ModelConfig& c,
                        const std::vector<Matrix<T>>& layers, std::optional<std::uint64_t> pool_seed = std::nullopt) {
    if (layers.empty()) {
        throw ShapeError("forward: no input layers");
    }
    for (const auto& l : layers) {
        if (static_cast<std::size_t>(l.cols()) != c.input_dim) {
            throw ShapeError("forward: input has F=" + std::to_string(l.cols()) + ", model expects " +
                             std::to_string(c.input_dim));
        }
    }
    ForwardTrace<T> tr;
    if (c.use_layer_weighting) {
        if (!p.has_layer_weights || layers.size() != c.layers) {
            throw ShapeError("forward: layer weighting expects " + std::to_string(c.layers) + " layers");
        }
        std::vector<ad::Var<T>> ls;
        for (const auto& l : layers) {
            ls.push_back(tape.constant(l));
        }
        tr.input = weight_layers(std::span<const ad::Var<T>>(ls), p.layer_weights);
    } else {
        tr.input = tape.constant(layers.back());
    }

    if (!c.is_gnn()) {
        const auto kind = parse_pooling_kind(c.pooling);
        const auto n = static_cast<std::size_t>(tr.input.rows());
        switch (kind) {
        case PoolingKind::mean: tr.embedding = ad::mean_over_rows(tr.input); break;
        case PoolingKind::max: tr.embedding = ad::max_over_rows(tr.input); break;
        case PoolingKind::mean_std:
        case PoolingKind::quantile:
            tr.embedding = tape.constant(Matrix<T>(pool<T>(kind, tr.input.value())));
            break;
        default: {
            Matrix<T> pick = Matrix<T>::Zero(1, static_cast<Eigen::Index>(n));
            pick(0, static_cast<Eigen::Index>(selected_vertex(kind, n, pool_seed) - 1)) = T(1);
            tr.embedding = ad::matmul(tape.constant(pick), tr.input);
        }
        }
        return tr;
    }

    const Activation act = parse_activation(c.activation);
    auto b = project(tr.input, p.projection);
    tr.adjacency = build_adjacency(b, p.beta);
    tr.history.push_back(b);
    for (std::size_t t = 1; t <= c.rounds; ++t) {
        tr.history.push_back(update(p, message(tr.adjacency, tr.history.back()), t, act));
    }
    auto r = readout(p, std::span<const ad::Var<T>>(tr.history), act);
    tr.gated = r.gated;
    tr.embedding = r.embedding;
    return tr;
}

/// Embedding of one utterance without gradient tracking.
template <typename T>
RowVector<T> embed(const ModelParams<T>& params, const ModelConfig& c, const std::vector<Matrix<T>>& layers) {
    ad::Tape<T> tape;
    auto bound = BoundParams<T>::bind(tape, params, false);
    return forward(tape, bound, c, layers).embedding.value();
}

template <typename T>
RowVector<T> embed(const ModelParams<T>& params, const ModelConfig& c, const FeatureStack& stack) {
    return embed(params, c, model_inputs<T>(stack, c));
}

/// Layer weights normalised to sum to one.
template <typename T>
RowVector<T> normalized_layer_weights(const ModelParams<T>& params) {
    if (params.layer_weights.size() == 0) {
        throw UsageError("model has no layer weights");
    }
    const T total = params.layer_weights.sum();
    if (std::abs(total) < T(1e-8)) {
        throw NumericError("layer weights sum to ~0");
    }
    return params.layer_weights / total;
}

/// N x N attention adjacency for one utterance (gnn only).
template <typename T>
Matrix<T> utterance_adjacency(const ModelParams<T>& params, const ModelConfig& c, const FeatureStack& stack) {
    if (!c.is_gnn()) {
        throw UsageError("adjacency is only defined for the gnn model");
    }
    ad::Tape<T> tape;
    auto bound = BoundParams<T>::bind(tape, params, false);
    ad::Var<T> x;
    const auto layers = model_inputs<T>(stack, c);
    if (c.use_layer_weighting) {
        std::vector<ad::Var<T>> ls;
        for (const auto& l : layers) {
            ls.push_back(tape.constant(l));
        }
        x = weight_layers(std::span<const ad::Var<T>>(ls), bound.layer_weights);
    } else {
        x = tape.constant(layers.back());
    }
    return build_adjacency(project(x, bound.projection), bound.beta).value();
}

} // namespace gfusion
