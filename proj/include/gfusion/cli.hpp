#pragma once

// Command-line front end: train, evaluate, pool, inspect-adjacency,
// inspect-weights. Exit codes: 0 success, 1 usage error, 2 data/numeric error.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gfusion/classical_pooling.hpp"
#include "gfusion/dataio.hpp"
#include "gfusion/evaluator.hpp"
#include "gfusion/mpnn_model.hpp"
#include "gfusion/trainer.hpp"

namespace gfusion::cli {

namespace detail {

inline void write_vector(std::ostream& out, const RowVector<double>& v) {
    out << std::setprecision(17);
    for (Eigen::Index i = 0; i < v.size(); ++i) out << v(i) << '\n';
}

/// N on the first line, then N comma-separated rows.
inline void write_adjacency(std::ostream& out, const Matrix<double>& a) {
    out << a.rows() << '\n' << std::setprecision(17);
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (Eigen::Index c = 0; c < a.cols(); ++c) {
            if (c) out << ',';
            out << a(r, c);
        }
        out << '\n';
    }
}

/// Writes to `path` when given, otherwise to `fallback`.
template <typename F>
void emit(const std::string& path, std::ostream& fallback, F&& body) {
    if (path.empty()) {
        body(fallback);
        return;
    }
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    body(f);
}

struct Options {
    std::string config, manifest, trials, checkpoint, out, kind, features;
    std::optional<std::uint64_t> seed;
    std::size_t workers = 1;
    bool thin = false;
    bool no_layer_weighting = false;
};

template <typename T>
void train_with(const Manifest& manifest, const RunConfig& rc, const Options& o, std::ostream& log) {
    std::optional<Trainer<T>> trainer;
    if (!o.checkpoint.empty()) {
        trainer.emplace(manifest, rc, read_checkpoint(fs::path(o.checkpoint) / "state.gpck"));
    } else {
        trainer.emplace(manifest, rc);
    }
    const auto total = trainer->total_steps();
    trainer->run(o.out, [&log, total](const StepMetrics& m) {
        log << "step " << m.step + 1 << "/" << total << " lr=" << m.lr << " loss=" << m.loss
            << " grad_norm=" << m.grad_norm << '\n';
    });
}

inline void cmd_train(const Options& o, std::ostream& out) {
    RunConfig rc = load_run_config(o.config);
    if (!o.checkpoint.empty()) {
        // Resuming continues the stored run; only workers may change.
        auto stored = load_run_config(fs::path(o.checkpoint) / "config.json");
        stored.train.workers = rc.train.workers;
        rc = stored;
    }
    if (o.seed) rc.train.seed = *o.seed;
    if (o.thin) rc.model.thin = true;
    if (o.no_layer_weighting) rc.model.use_layer_weighting = false;
    if (o.workers != 1) rc.train.workers = o.workers;
    const Manifest manifest = load_manifest(o.manifest);
    if (rc.train.precision == 32) {
        train_with<float>(manifest, rc, o, out);
    } else {
        train_with<double>(manifest, rc, o, out);
    }
}

inline void cmd_evaluate(const Options& o, std::ostream& out) {
    const auto model = load_model(o.checkpoint);
    const Manifest manifest = load_manifest(o.manifest);
    const TrialList trials = load_trials(o.trials, manifest);
    const auto embeddings = embed_all(manifest, model.params, model.config.model, o.workers);
    const auto scored = score_trials(embeddings, trials);
    const auto eer = compute_eer(scored);
    if (!o.out.empty()) {
        fs::create_directories(o.out);
        std::ofstream scores(fs::path(o.out) / "scores.csv");
        if (!scores) throw IoError("cannot write scores.csv under " + o.out);
        write_scores_csv(scores, scored);
        std::ofstream report(fs::path(o.out) / "eer.txt");
        report << format_eer(eer) << '\n';
    }
    out << format_eer(eer) << '\n';
}

inline void cmd_pool(const Options& o, std::ostream& out) {
    const FeatureStack stack = read_feature_stack(o.features);
    RowVector<double> pooled;
    if (o.kind == "gnn") {
        if (o.checkpoint.empty()) throw UsageError("pool --kind gnn requires --checkpoint");
        const auto model = load_model(o.checkpoint);
        pooled = embed(model.params, model.config.model, stack);
    } else {
        const auto kind = parse_pooling_kind(o.kind);
        if (kind == PoolingKind::random && !o.seed) throw UsageError("pool --kind random requires --seed");
        pooled = pool<double>(kind, stack.layer<double>(stack.layers - 1), o.seed);
    }
    emit(o.out, out, [&](std::ostream& s) { write_vector(s, pooled); });
}

inline void cmd_inspect_adjacency(const Options& o, std::ostream& out) {
    const auto model = load_model(o.checkpoint);
    const auto& cfg = model.config.model;
    if (!o.features.empty()) {
        const auto a = utterance_adjacency(model.params, cfg, read_feature_stack(o.features));
        emit(o.out, out, [&](std::ostream& s) { write_adjacency(s, a); });
        return;
    }
    if (o.manifest.empty() || o.out.empty()) {
        throw UsageError("inspect-adjacency needs --features, or --manifest with --out <dir>");
    }
    const Manifest manifest = load_manifest(o.manifest);
    fs::create_directories(o.out);
    for (const auto& e : manifest.entries()) {
        const auto a = utterance_adjacency(model.params, cfg, read_entry(e));
        std::ofstream f(fs::path(o.out) / (e.utt + ".csv"));
        if (!f) throw IoError("cannot write adjacency for " + e.utt);
        write_adjacency(f, a);
    }
    out << "wrote " << manifest.size() << " adjacency matrices to " << o.out << '\n';
}

inline void cmd_inspect_weights(const Options& o, std::ostream& out) {
    const auto model = load_model(o.checkpoint);
    const auto w = normalized_layer_weights(model.params);
    emit(o.out, out, [&](std::ostream& s) {
        s << "layer,weight\n" << std::setprecision(17);
        for (Eigen::Index i = 0; i < w.size(); ++i) s << i + 1 << ',' << w(i) << '\n';
    });
}

} // namespace detail

/// Parses argv and runs one subcommand. Output goes to `out`, diagnostics to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Graph-attention pooling of per-frame speaker features", "gfusion"};
    app.require_subcommand(1);
    detail::Options o;

    auto* train = app.add_subcommand("train", "Train a pooling model with an AAM head");
    train->add_option("--config", o.config, "Flat JSON training/model config")->required();
    train->add_option("--manifest", o.manifest, "Training manifest (JSON lines)")->required();
    train->add_option("--out", o.out, "Output directory for checkpoints and metrics.csv")->required();
    train->add_option("--checkpoint", o.checkpoint, "Resume from this checkpoint directory");
    train->add_option("--seed", o.seed, "Override the config seed");
    train->add_option("--workers", o.workers, "Worker threads per batch")->check(CLI::PositiveNumber);
    train->add_flag("--thin", o.thin, "Drop the readout gate branch");
    train->add_flag("--no-layer-weighting", o.no_layer_weighting, "Use only the final feature layer");

    auto* evaluate = app.add_subcommand("evaluate", "Score a trial list and report the EER");
    evaluate->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    evaluate->add_option("--manifest", o.manifest, "Evaluation manifest")->required();
    evaluate->add_option("--trials", o.trials, "Trial list: '<0|1> <enroll> <test>' per line")->required();
    evaluate->add_option("--out", o.out, "Directory for scores.csv and eer.txt");
    evaluate->add_option("--workers", o.workers, "Embedding worker threads")->check(CLI::PositiveNumber);

    auto* pool = app.add_subcommand("pool", "Pool one feature file into a vector");
    pool->add_option("--kind", o.kind, "mean|max|mean_std|quantile|first|middle|last|random|gnn")->required();
    pool->add_option("--features", o.features, "Feature file (.w2vf)")->required();
    pool->add_option("--checkpoint", o.checkpoint, "Checkpoint directory (gnn only)");
    pool->add_option("--seed", o.seed, "Seed for random pooling");
    pool->add_option("--out", o.out, "Output file (default stdout)");

    auto* adj = app.add_subcommand("inspect-adjacency", "Dump attention adjacency matrices as CSV");
    adj->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    adj->add_option("--features", o.features, "Single feature file");
    adj->add_option("--manifest", o.manifest, "Manifest; one <utt>.csv per entry under --out");
    adj->add_option("--out", o.out, "Output file (with --features) or directory (with --manifest)");

    auto* weights = app.add_subcommand("inspect-weights", "Dump normalized layer weights as CSV");
    weights->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
    weights->add_option("--out", o.out, "Output file (default stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        err << sub->help();
        return 1;
    }

    try {
        if (train->parsed()) detail::cmd_train(o, out);
        else if (evaluate->parsed()) detail::cmd_evaluate(o, out);
        else if (pool->parsed()) detail::cmd_pool(o, out);
        else if (adj->parsed()) detail::cmd_inspect_adjacency(o, out);
        else if (weights->parsed()) detail::cmd_inspect_weights(o, out);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

} // namespace gfusion::cli
