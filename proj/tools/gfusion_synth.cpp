// Writes a synthetic speaker corpus (features, manifest, trial list) for
// trying the gfusion CLI without exported features.

#include <iostream>

#include <CLI11.hpp>

#include "gfusion/synthetic.hpp"

int main(int argc, char** argv) {
    CLI::App app{"Generate a synthetic speaker corpus", "gfusion-synth"};
    gfusion::SyntheticSpec spec;
    std::string out;
    std::size_t train_per_speaker = 20;
    app.add_option("--out", out, "Output directory")->required();
    app.add_option("--speakers", spec.speakers, "Number of speakers");
    app.add_option("--utterances", spec.utterances_per_speaker, "Utterances per speaker");
    app.add_option("--train-per-speaker", train_per_speaker, "Utterances per speaker in the training manifest");
    app.add_option("--frames", spec.frames, "Frames per utterance");
    app.add_option("--dim", spec.dim, "Feature dimension");
    app.add_option("--layers", spec.layers, "Layers per feature stack");
    app.add_option("--noise", spec.noise, "Frame noise standard deviation");
    app.add_option("--seed", spec.seed, "Random seed");
    CLI11_PARSE(app, argc, argv);

    try {
        namespace fs = std::filesystem;
        const auto corpus = gfusion::write_synthetic_corpus(spec, out);
        std::vector<std::string> train_ids, eval_ids;
        std::vector<std::vector<std::string>> eval_by_speaker;
        for (const auto& utts : corpus.by_speaker) {
            eval_by_speaker.emplace_back();
            for (std::size_t i = 0; i < utts.size(); ++i) {
                if (i < train_per_speaker) {
                    train_ids.push_back(utts[i]);
                } else {
                    eval_ids.push_back(utts[i]);
                    eval_by_speaker.back().push_back(utts[i]);
                }
            }
        }
        const auto relative = gfusion::load_manifest(fs::path(out) / "manifest.jsonl");
        gfusion::write_manifest(gfusion::select(relative, train_ids), fs::path(out) / "train.jsonl");
        gfusion::write_manifest(gfusion::select(relative, eval_ids), fs::path(out) / "eval.jsonl");
        gfusion::write_trials(gfusion::make_trials(eval_by_speaker, spec.seed + 1), fs::path(out) / "trials.txt");
        std::cout << "wrote " << corpus.all.size() << " utterances to " << out << '\n';
    } catch (const gfusion::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    }
    return 0;
}
