#pragma once

// Mini-batch training of a pooling model with an AAM head.
//
// Each step draws a speaker-balanced batch of random crops, runs one tape per
// utterance, averages the gradients and applies one Adam update at the
// one-cycle learning rate. The batch RNG is derived from (seed, step), so a
// run resumed from a checkpoint replays the same batches as an uninterrupted
// one.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "gfusion/aam_loss.hpp"
#include "gfusion/dataio.hpp"
#include "gfusion/diffcore.hpp"
#include "gfusion/mpnn_model.hpp"
#include "gfusion/optim.hpp"

namespace gfusion {

struct TrainConfig {
    std::size_t batch_size = 48;
    std::size_t crop_frames = 149;
    std::size_t epochs = 5;
    /// 0 means ceil(utterances / batch_size).
    std::size_t steps_per_epoch = 0;
    OneCycle schedule{};
    AdamConfig adam{};
    AamConfig aam{};
    std::uint64_t seed = 0;
    int precision = 64;
    std::size_t workers = 1;

    void validate() const {
        if (batch_size < 1) throw UsageError("train: batch_size must be >= 1");
        if (crop_frames < 1) throw UsageError("train: crop_frames must be >= 1");
        if (epochs < 1) throw UsageError("train: epochs must be >= 1");
        if (precision != 32 && precision != 64) throw UsageError("train: precision must be 32 or 64");
        if (workers < 1) throw UsageError("train: workers must be >= 1");
        schedule.validate();
        aam.validate();
    }
};

/// Flat JSON config holding both training and model keys.
struct RunConfig {
    TrainConfig train;
    ModelConfig model;
};

inline RunConfig parse_run_config(const nlohmann::json& j) {
    if (!j.is_object()) {
        throw ParseError("config must be a flat JSON object");
    }
    RunConfig rc;
    auto& t = rc.train;
    auto& m = rc.model;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "batch_size") t.batch_size = value.get<std::size_t>();
            else if (key == "crop_frames") t.crop_frames = value.get<std::size_t>();
            else if (key == "epochs") t.epochs = value.get<std::size_t>();
            else if (key == "steps_per_epoch") t.steps_per_epoch = value.get<std::size_t>();
            else if (key == "max_lr") t.schedule.max_lr = value.get<double>();
            else if (key == "div_factor") t.schedule.div_factor = value.get<double>();
            else if (key == "final_div") t.schedule.final_div = value.get<double>();
            else if (key == "warmup_fraction") t.schedule.warmup_fraction = value.get<double>();
            else if (key == "adam_beta1") t.adam.beta1 = value.get<double>();
            else if (key == "adam_beta2") t.adam.beta2 = value.get<double>();
            else if (key == "adam_eps") t.adam.eps = value.get<double>();
            else if (key == "aam_margin") t.aam.margin = value.get<double>();
            else if (key == "aam_scale") t.aam.scale = value.get<double>();
            else if (key == "seed") t.seed = value.get<std::uint64_t>();
            else if (key == "precision") t.precision = value.get<int>();
            else if (key == "workers") t.workers = value.get<std::size_t>();
            else if (key == "input_dim") m.input_dim = value.get<std::size_t>();
            else if (key == "projected_dim") m.projected_dim = value.get<std::size_t>();
            else if (key == "rounds") m.rounds = value.get<std::size_t>();
            else if (key == "mlp_hidden") m.mlp_hidden = value.get<std::size_t>();
            else if (key == "activation") m.activation = value.get<std::string>();
            else if (key == "use_layer_weighting") m.use_layer_weighting = value.get<bool>();
            else if (key == "thin") m.thin = value.get<bool>();
            else if (key == "layers") m.layers = value.get<std::size_t>();
            else if (key == "pooling") m.pooling = value.get<std::string>();
            else throw UsageError("unknown config key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("config key '" + key + "': " + e.what());
        }
    }
    return rc;
}

inline nlohmann::json to_json(const RunConfig& rc) {
    const auto& t = rc.train;
    const auto& m = rc.model;
    return {
        {"batch_size", t.batch_size},
        {"crop_frames", t.crop_frames},
        {"epochs", t.epochs},
        {"steps_per_epoch", t.steps_per_epoch},
        {"max_lr", t.schedule.max_lr},
        {"div_factor", t.schedule.div_factor},
        {"final_div", t.schedule.final_div},
        {"warmup_fraction", t.schedule.warmup_fraction},
        {"adam_beta1", t.adam.beta1},
        {"adam_beta2", t.adam.beta2},
        {"adam_eps", t.adam.eps},
        {"aam_margin", t.aam.margin},
        {"aam_scale", t.aam.scale},
        {"seed", t.seed},
        {"precision", t.precision},
        {"workers", t.workers},
        {"input_dim", m.input_dim},
        {"projected_dim", m.projected_dim},
        {"rounds", m.rounds},
        {"mlp_hidden", m.mlp_hidden},
        {"activation", m.activation},
        {"use_layer_weighting", m.use_layer_weighting},
        {"thin", m.thin},
        {"layers", m.layers},
        {"pooling", m.pooling},
    };
}

inline RunConfig load_run_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open config " + path.string());
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return parse_run_config(j);
}

struct StepMetrics {
    std::uint64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

/// One training example after cropping.
struct BatchItem {
    std::size_t entry = 0;
    std::size_t label = 0;
    std::size_t start = 0;
};

/// Frames [start, start + crop) of each layer; shorter utterances repeat from
/// their beginning until `crop` frames are filled.
template <typename T>
std::vector<Matrix<T>> crop_layers(const std::vector<Matrix<T>>& layers, std::size_t start, std::size_t crop) {
    std::vector<Matrix<T>> out;
    out.reserve(layers.size());
    for (const auto& l : layers) {
        const auto n = static_cast<std::size_t>(l.rows());
        Matrix<T> c(static_cast<Eigen::Index>(crop), l.cols());
        if (n >= crop) {
            c = l.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(crop));
        } else {
            for (std::size_t i = 0; i < crop; ++i) {
                c.row(static_cast<Eigen::Index>(i)) = l.row(static_cast<Eigen::Index>(i % n));
            }
        }
        out.push_back(std::move(c));
    }
    return out;
}

template <typename T>
class Trainer {
  public:
    Trainer(const Manifest& manifest, RunConfig config) : manifest_(manifest), config_(std::move(config)) {
        config_.train.validate();
        config_.model.validate();
        if (manifest_.empty()) {
            throw DataError("train: manifest is empty");
        }
        if (manifest_.num_classes() < 2) {
            throw DataError("train: need at least 2 speakers, got " + std::to_string(manifest_.num_classes()));
        }
        by_class_.assign(manifest_.num_classes(), {});
        for (std::size_t i = 0; i < manifest_.size(); ++i) {
            by_class_[manifest_.class_of_entry(i)].push_back(i);
        }
        for (std::size_t c = 0; c < by_class_.size(); ++c) {
            if (by_class_[c].empty()) {
                throw DataError("train: speaker '" + manifest_.speakers()[c] + "' has no utterances");
            }
        }
        features_.reserve(manifest_.size());
        for (const auto& e : manifest_.entries()) {
            features_.push_back(model_inputs<T>(read_entry(e), config_.model));
        }
        const auto& tc = config_.train;
        steps_per_epoch_ = tc.steps_per_epoch != 0 ? tc.steps_per_epoch
                                                   : (manifest_.size() + tc.batch_size - 1) / tc.batch_size;
        total_steps_ = steps_per_epoch_ * tc.epochs;
        params_ = ModelParams<T>::init(config_.model, tc.seed);
        head_ = AamHead<T>::init(manifest_.num_classes(), config_.model.embedding_dim(), tc.aam,
                                 tc.seed ^ 0x9E3779B97F4A7C15ULL);
        adam_ = Adam<T>(tc.adam);
    }

    /// Same manifest and config, state restored from a checkpoint bundle.
    Trainer(const Manifest& manifest, RunConfig config, const TensorBundle& state) : Trainer(manifest, std::move(config)) {
        params_ = ModelParams<T>::load(state, config_.model);
        head_.class_weights = state.get_matrix<T>("head.class_weights");
        if (head_.class_weights.rows() != static_cast<Eigen::Index>(manifest_.num_classes())) {
            throw DataError("checkpoint head has " + std::to_string(head_.class_weights.rows()) +
                            " classes, manifest has " + std::to_string(manifest_.num_classes()));
        }
        step_ = static_cast<std::uint64_t>(state.get_scalar("state.step"));
        best_loss_ = state.get_scalar("state.best_loss");
        std::vector<Matrix<double>> m, v;
        for (const auto& [name, ptr] : trainable()) {
            m.push_back(state.get_matrix<double>("adam.m." + name));
            v.push_back(state.get_matrix<double>("adam.v." + name));
        }
        adam_.restore(static_cast<std::uint64_t>(state.get_scalar("state.adam_steps")), std::move(m), std::move(v));
    }

    const RunConfig& config() const { return config_; }
    std::uint64_t step() const { return step_; }
    std::uint64_t total_steps() const { return total_steps_; }
    std::size_t steps_per_epoch() const { return steps_per_epoch_; }
    bool done() const { return step_ >= total_steps_; }
    const ModelParams<T>& params() const { return params_; }
    const AamHead<T>& head() const { return head_; }

    /// The batch drawn at `step`; depends only on the seed and the step.
    std::vector<BatchItem> sample_batch(std::uint64_t step) const {
        const auto seed = config_.train.seed;
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32)};
        std::mt19937_64 rng(seq);
        std::vector<std::size_t> order(by_class_.size());
        std::size_t next = order.size();
        std::vector<BatchItem> batch;
        for (std::size_t b = 0; b < config_.train.batch_size; ++b) {
            if (next == order.size()) {
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
                for (std::size_t i = order.size(); i > 1; --i) {
                    std::swap(order[i - 1], order[rng() % i]);
                }
                next = 0;
            }
            const std::size_t cls = order[next++];
            const auto& pool = by_class_[cls];
            const std::size_t entry = pool[rng() % pool.size()];
            const std::size_t frames = static_cast<std::size_t>(features_[entry][0].rows());
            const std::size_t crop = config_.train.crop_frames;
            const std::size_t start = frames > crop ? rng() % (frames - crop + 1) : 0;
            batch.push_back({entry, cls, start});
        }
        return batch;
    }

    /// One optimisation step.
    StepMetrics train_step() {
        if (done()) {
            throw UsageError("train_step: all " + std::to_string(total_steps_) + " steps already taken");
        }
        const auto batch = sample_batch(step_);
        const double lr = config_.train.schedule.lr_at(step_, total_steps_);
        auto named = trainable();

        const std::size_t workers = std::min(config_.train.workers, batch.size());
        std::vector<std::vector<Matrix<T>>> grads(workers);
        std::vector<double> losses(batch.size(), 0.0);
        std::vector<std::exception_ptr> errors(workers);
        auto work = [&](std::size_t w) {
            try {
                auto& acc = grads[w];
                for (const auto& [name, ptr] : named) {
                    acc.push_back(Matrix<T>::Zero(ptr->rows(), ptr->cols()));
                }
                for (std::size_t b = w; b < batch.size(); b += workers) {
                    losses[b] = item_gradient(batch[b], acc);
                }
            } catch (...) {
                errors[w] = std::current_exception();
            }
        };
        if (workers == 1) {
            work(0);
        } else {
            std::vector<std::jthread> pool;
            for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
        }
        for (std::size_t w = 0; w < workers; ++w) {
            if (errors[w]) {
                try {
                    std::rethrow_exception(errors[w]);
                } catch (const NumericError& e) {
                    throw NumericError("step " + std::to_string(step_) + " (" + batch_ids(batch) + "): " + e.what());
                }
            }
        }

        double loss = 0.0;
        for (double l : losses) loss += l;
        loss /= static_cast<double>(batch.size());
        if (!std::isfinite(loss)) {
            throw NumericError("non-finite loss at step " + std::to_string(step_) + " (" + batch_ids(batch) + ")");
        }

        std::vector<Matrix<T>> total = std::move(grads[0]);
        for (std::size_t w = 1; w < workers; ++w) {
            for (std::size_t i = 0; i < total.size(); ++i) total[i] += grads[w][i];
        }
        double norm2 = 0.0;
        const T inv = T(1) / static_cast<T>(batch.size());
        for (auto& g : total) {
            g *= inv;
            norm2 += static_cast<double>(g.squaredNorm());
        }
        std::vector<Matrix<T>*> ptrs;
        for (auto& [name, ptr] : named) ptrs.push_back(ptr);
        adam_.step(std::span<Matrix<T>* const>(ptrs), std::span<const Matrix<T>>(total), lr);

        StepMetrics m{step_, lr, loss, std::sqrt(norm2)};
        ++step_;
        epoch_loss_ += loss;
        return m;
    }

    /// Serialisable state: parameters, head, optimizer moments, position.
    TensorBundle checkpoint() const {
        TensorBundle b;
        params_.save(b);
        b.put_matrix("head.class_weights", head_.class_weights);
        const auto named = const_cast<Trainer*>(this)->trainable();
        const auto& m = adam_.first_moments();
        const auto& v = adam_.second_moments();
        for (std::size_t i = 0; i < named.size(); ++i) {
            const auto& p = *named[i].second;
            b.put_matrix("adam.m." + named[i].first, m.empty() ? Matrix<double>::Zero(p.rows(), p.cols()) : m[i]);
            b.put_matrix("adam.v." + named[i].first, v.empty() ? Matrix<double>::Zero(p.rows(), p.cols()) : v[i]);
        }
        b.put_scalar("state.step", static_cast<double>(step_));
        b.put_scalar("state.adam_steps", static_cast<double>(adam_.steps()));
        b.put_scalar("state.best_loss", best_loss_);
        b.put_scalar("state.seed_lo", static_cast<double>(config_.train.seed & 0xFFFFFFFFULL));
        b.put_scalar("state.seed_hi", static_cast<double>(config_.train.seed >> 32));
        return b;
    }

    /// Runs to completion, writing metrics.csv and per-epoch checkpoint
    /// directories (epoch-<k>/, last/, best/) under `out`.
    void run(const fs::path& out, const std::function<void(const StepMetrics&)>& on_step = {}) {
        fs::create_directories(out);
        const bool append = step_ > 0 && fs::exists(out / "metrics.csv");
        std::ofstream metrics(out / "metrics.csv", append ? std::ios::app : std::ios::trunc);
        if (!metrics) {
            throw IoError("cannot write " + (out / "metrics.csv").string());
        }
        if (!append) {
            metrics << "step,lr,loss,grad_norm\n";
        }
        metrics << std::setprecision(17);
        while (!done()) {
            const auto m = train_step();
            metrics << m.step << ',' << m.lr << ',' << m.loss << ',' << m.grad_norm << '\n';
            if (on_step) on_step(m);
            if (step_ % steps_per_epoch_ == 0) {
                metrics.flush();
                const auto epoch = step_ / steps_per_epoch_;
                const double mean_loss = epoch_loss_ / static_cast<double>(steps_per_epoch_);
                epoch_loss_ = 0.0;
                const bool best = mean_loss < best_loss_;
                if (best) best_loss_ = mean_loss;
                std::ostringstream name;
                name << "epoch-" << epoch;
                save(out / name.str());
                save(out / "last");
                if (best) save(out / "best");
            }
        }
    }

    void save(const fs::path& dir) const {
        fs::create_directories(dir);
        write_checkpoint(checkpoint(), dir / "state.gpck");
        std::ofstream cfg(dir / "config.json");
        if (!cfg) {
            throw IoError("cannot write " + (dir / "config.json").string());
        }
        cfg << to_json(config_).dump(2) << '\n';
    }

  private:
    std::vector<std::pair<std::string, Matrix<T>*>> trainable() {
        auto named = params_.named();
        named.emplace_back("head.class_weights", &head_.class_weights);
        return named;
    }

    double item_gradient(const BatchItem& item, std::vector<Matrix<T>>& acc) const {
        const auto layers = crop_layers(features_[item.entry], item.start, config_.train.crop_frames);
        ad::Tape<T> tape;
        auto bound = BoundParams<T>::bind(tape, params_);
        auto head = tape.param(head_.class_weights);
        auto tr = forward(tape, bound, config_.model, layers, config_.train.seed);
        auto loss = aam_loss(tr.embedding, head, item.label, config_.train.aam);
        tape.backward(loss);
        std::size_t i = 0;
        for (auto v : bound.all) acc[i++] += tape.grad(v);
        acc[i] += tape.grad(head);
        return static_cast<double>(loss.item());
    }

    std::string batch_ids(const std::vector<BatchItem>& batch) const {
        std::string ids;
        for (const auto& b : batch) {
            if (!ids.empty()) ids += ',';
            ids += manifest_.entries()[b.entry].utt;
        }
        return ids;
    }

    Manifest manifest_;
    RunConfig config_;
    std::vector<std::vector<std::size_t>> by_class_;
    std::vector<std::vector<Matrix<T>>> features_;
    std::size_t steps_per_epoch_ = 0;
    std::uint64_t total_steps_ = 0;
    ModelParams<T> params_;
    AamHead<T> head_;
    Adam<T> adam_;
    std::uint64_t step_ = 0;
    double epoch_loss_ = 0.0;
    double best_loss_ = std::numeric_limits<double>::infinity();
};

/// A trained model as loaded for inference (always 64-bit).
struct LoadedModel {
    RunConfig config;
    ModelParams<double> params;
};

/// Reads <dir>/config.json and <dir>/state.gpck.
inline LoadedModel load_model(const fs::path& dir) {
    if (!fs::is_directory(dir)) {
        throw IoError("checkpoint directory not found: " + dir.string());
    }
    LoadedModel m;
    m.config = load_run_config(dir / "config.json");
    m.config.model.validate();
    const auto state = read_checkpoint(dir / "state.gpck");
    m.params = ModelParams<double>::load(state, m.config.model);
    return m;
}

} // namespace gfusion
