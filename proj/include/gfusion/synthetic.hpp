#pragma once

// Synthetic speaker corpora: each speaker has a mean vector, each frame is
// that mean plus isotropic Gaussian noise.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "gfusion/dataio.hpp"

namespace gfusion {

struct SyntheticSpec {
    std::size_t speakers = 20;
    std::size_t utterances_per_speaker = 30;
    std::size_t frames = 149;
    std::size_t dim = 768;
    std::size_t layers = 1;
    double mean_scale = 1.0;
    double noise = 2.0;
    std::uint64_t seed = 0;
};

struct SyntheticCorpus {
    Manifest all;
    /// Utterance ids per speaker, in generation order.
    std::vector<std::vector<std::string>> by_speaker;
};

inline std::string synthetic_speaker(std::size_t s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "spk%03zu", s);
    return buf;
}

/// Writes <dir>/feats/<utt>.w2vf and <dir>/manifest.jsonl (relative paths).
inline SyntheticCorpus write_synthetic_corpus(const SyntheticSpec& spec, const fs::path& dir) {
    fs::create_directories(dir / "feats");
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<ManifestEntry> entries;
    SyntheticCorpus corpus;
    for (std::size_t s = 0; s < spec.speakers; ++s) {
        std::vector<double> mean(spec.dim);
        for (auto& m : mean) m = spec.mean_scale * normal(rng);
        const std::string speaker = synthetic_speaker(s);
        corpus.by_speaker.emplace_back();
        for (std::size_t u = 0; u < spec.utterances_per_speaker; ++u) {
            FeatureStack stack(static_cast<std::uint32_t>(spec.layers), static_cast<std::uint32_t>(spec.frames),
                               static_cast<std::uint32_t>(spec.dim));
            for (std::size_t l = 0; l < spec.layers; ++l) {
                for (std::size_t n = 0; n < spec.frames; ++n) {
                    for (std::size_t f = 0; f < spec.dim; ++f) {
                        stack.at(l, n, f) = static_cast<float>(mean[f] + spec.noise * normal(rng));
                    }
                }
            }
            const std::string utt = speaker + "-u" + std::to_string(u);
            const fs::path rel = fs::path("feats") / (utt + ".w2vf");
            write_feature_stack(stack, dir / rel);
            entries.push_back({utt, speaker, rel, stack.frames});
            corpus.by_speaker.back().push_back(utt);
        }
    }
    Manifest relative(entries);
    write_manifest(relative, dir / "manifest.jsonl");
    for (auto& e : entries) e.path = dir / e.path;
    corpus.all = Manifest(std::move(entries));
    return corpus;
}

/// Subset of a manifest, keeping entry order.
inline Manifest select(const Manifest& m, const std::vector<std::string>& ids) {
    std::vector<ManifestEntry> out;
    for (const auto& id : ids) out.push_back(m.at(id));
    return Manifest(std::move(out));
}

/// All same-speaker pairs as targets, plus as many random cross-speaker pairs.
inline TrialList make_trials(const std::vector<std::vector<std::string>>& by_speaker, std::uint64_t seed) {
    TrialList trials;
    for (const auto& utts : by_speaker) {
        for (std::size_t i = 0; i < utts.size(); ++i) {
            for (std::size_t j = i + 1; j < utts.size(); ++j) trials.push_back({1, utts[i], utts[j]});
        }
    }
    const std::size_t targets = trials.size();
    std::mt19937_64 rng(seed);
    const std::size_t speakers = by_speaker.size();
    for (std::size_t k = 0; k < targets && speakers > 1; ++k) {
        const std::size_t a = rng() % speakers;
        const std::size_t b = (a + 1 + rng() % (speakers - 1)) % speakers;
        const auto& ua = by_speaker[a];
        const auto& ub = by_speaker[b];
        trials.push_back({0, ua[rng() % ua.size()], ub[rng() % ub.size()]});
    }
    return trials;
}

inline void write_trials(const TrialList& trials, const fs::path& path) {
    std::string out;
    for (const auto& t : trials) out += std::to_string(t.label) + " " + t.enroll + " " + t.test + "\n";
    detail::write_file(path, out);
}

} // namespace gfusion
