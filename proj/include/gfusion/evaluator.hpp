#pragma once

// Embedding extraction, cosine trial scoring and equal error rate.

#include <algorithm>
#include <cmath>
#include <exception>
#include <iomanip>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "gfusion/dataio.hpp"
#include "gfusion/mpnn_model.hpp"

namespace gfusion {

using EmbeddingMap = std::map<std::string, RowVector<double>>;

/// Full-length (uncropped) embedding of every manifest entry. Utterances are
/// split round-robin over `workers` threads.
inline EmbeddingMap embed_all(const Manifest& manifest, const ModelParams<double>& params, const ModelConfig& config,
                              std::size_t workers = 1) {
    const auto& entries = manifest.entries();
    std::vector<RowVector<double>> out(entries.size());
    workers = std::max<std::size_t>(1, std::min(workers, entries.size()));
    std::vector<std::exception_ptr> errors(workers);
    auto work = [&](std::size_t w) {
        try {
            for (std::size_t i = w; i < entries.size(); i += workers) {
                out[i] = embed(params, config, read_entry(entries[i]));
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
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
    EmbeddingMap map;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        map.emplace(entries[i].utt, std::move(out[i]));
    }
    return map;
}

struct ScoredTrial {
    int label = 0;
    std::string enroll;
    std::string test;
    double score = 0.0;
};

using ScoredTrials = std::vector<ScoredTrial>;

inline double cosine_score(const RowVector<double>& a, const RowVector<double>& b) {
    if (a.size() != b.size()) {
        throw ShapeError("cosine_score: embeddings of different length");
    }
    const double na = a.norm();
    const double nb = b.norm();
    if (!(na > 0.0) || !(nb > 0.0)) {
        throw NumericError("cosine_score: zero-norm embedding");
    }
    return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

inline ScoredTrials score_trials(const EmbeddingMap& embeddings, const TrialList& trials) {
    ScoredTrials out;
    out.reserve(trials.size());
    auto lookup = [&embeddings](const std::string& id) -> const RowVector<double>& {
        auto it = embeddings.find(id);
        if (it == embeddings.end()) {
            throw DataError("no embedding for utterance '" + id + "'");
        }
        return it->second;
    };
    for (const auto& t : trials) {
        out.push_back({t.label, t.enroll, t.test, cosine_score(lookup(t.enroll), lookup(t.test))});
    }
    return out;
}

struct EerResult {
    double eer = 0.0;
    double threshold = 0.0;
};

/// Equal error rate from a threshold sweep.
///
/// A trial is accepted when score >= threshold. Sweeping the threshold over
/// every distinct score (plus one point above the maximum) traces ROC points
/// with FRR rising and FAR falling. The EER is read where FRR - FAR changes
/// sign, interpolating linearly between the two adjacent points.
inline EerResult compute_eer(const ScoredTrials& scored) {
    std::vector<std::pair<double, int>> s;
    s.reserve(scored.size());
    std::size_t targets = 0;
    for (const auto& t : scored) {
        if (!std::isfinite(t.score)) {
            throw NumericError("compute_eer: non-finite score for " + t.enroll + "/" + t.test);
        }
        s.emplace_back(t.score, t.label);
        targets += t.label == 1 ? 1 : 0;
    }
    const std::size_t nontargets = s.size() - targets;
    if (targets == 0 || nontargets == 0) {
        throw DomainError("compute_eer: need at least one target and one non-target trial");
    }
    std::sort(s.begin(), s.end());

    // Point k: threshold at the k-th distinct score; below it lie rejected trials.
    std::size_t rejected_targets = 0;
    std::size_t rejected_nontargets = 0;
    double prev_frr = 0.0;
    double prev_far = 1.0;
    double prev_threshold = s.front().first;
    std::size_t i = 0;
    while (true) {
        const bool past_end = i == s.size();
        const double threshold = past_end ? std::numeric_limits<double>::infinity() : s[i].first;
        const double frr = static_cast<double>(rejected_targets) / static_cast<double>(targets);
        const double far = 1.0 - static_cast<double>(rejected_nontargets) / static_cast<double>(nontargets);
        const double d = frr - far;
        if (d >= 0.0) {
            if (d == 0.0 || i == 0) {
                return {frr, threshold};
            }
            const double d_prev = prev_frr - prev_far;
            const double alpha = d_prev / (d_prev - d);
            const double eer = prev_frr + alpha * (frr - prev_frr);
            const double thr = std::isfinite(threshold) ? prev_threshold + alpha * (threshold - prev_threshold) : prev_threshold;
            return {eer, thr};
        }
        prev_frr = frr;
        prev_far = far;
        prev_threshold = threshold;
        const double v = s[i].first;
        while (i < s.size() && s[i].first == v) {
            (s[i].second == 1 ? rejected_targets : rejected_nontargets) += 1;
            ++i;
        }
    }
}

inline void write_scores_csv(std::ostream& out, const ScoredTrials& scored) {
    out << "label,enroll,test,score\n";
    out << std::setprecision(17);
    for (const auto& t : scored) {
        out << t.label << ',' << t.enroll << ',' << t.test << ',' << t.score << '\n';
    }
}

inline std::string format_eer(const EerResult& r) {
    std::ostringstream ss;
    ss << std::setprecision(10) << "eer=" << r.eer << " threshold=" << r.threshold;
    return ss.str();
}

} // namespace gfusion
