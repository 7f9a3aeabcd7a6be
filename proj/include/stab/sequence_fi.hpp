#pragma once

// Monte-Carlo FI for autoregressive generation: per-step FI averaged over
// sampled continuations, aggregated over a fixed horizon or with geometric
// discounting.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "stab/datasets.hpp"
#include "stab/error.hpp"
#include "stab/fi.hpp"
#include "stab/parallel.hpp"
#include "stab/random.hpp"
#include "stab/zoo.hpp"

namespace stab {

struct TokenFI {
    std::size_t l = 0;
    double mean = 0.0;
    double stderr_ = 0.0;
    std::size_t samples = 0;
};

enum class SeqMode { fixed, discounted };

inline std::string seq_mode_name(SeqMode m) { return m == SeqMode::fixed ? "fixed-L" : "discounted-gamma"; }

struct SeqFIEstimate {
    SeqMode mode = SeqMode::fixed;
    std::vector<TokenFI> per_token;
    double aggregate = 0.0;
    std::size_t horizon = 0;          // L for fixed mode
    double gamma = 0.0;               // discounted mode only
    double truncation_mass = 0.0;     // discounted mode: weight of the dropped tail
};

/// FI of the next token after `tokens`, anchored at the argmax token.
inline double next_token_fi(const ZooModel& m, const Sample& s, const PerturbationTarget& t) {
    validate_target(m, t);
    ClassDistribution probs;
    const Matrix block = score_block(m, s, t.kind, &probs);
    const ScoreMatrix sm = restrict_scores(block, t);
    Vector grad = sm.column(probs.argmax());
    for (double& v : grad) v = -v;
    return fi_value(grad, sm, probs).value;
}

inline TokenFI summarize_samples(std::size_t l, const Vector& values) {
    TokenFI r;
    r.l = l;
    r.samples = values.size();
    double s = 0.0;
    for (double v : values) s += v;
    r.mean = s / static_cast<double>(values.size());
    if (values.size() > 1) {
        double ss = 0.0;
        for (double v : values) ss += (v - r.mean) * (v - r.mean);
        const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
        r.stderr_ = sd / std::sqrt(static_cast<double>(values.size()));
    }
    return r;
}

/// Mean next-token FI after sampling `continuation` tokens past the prompt,
/// over N independent continuations. Sample n uses seed stream (seed, l, n).
inline TokenFI fi_after_continuation(const ZooModel& m, const Sample& prompt, std::size_t continuation,
                                     std::size_t l, const PerturbationTarget& t, std::size_t n_samples,
                                     std::uint64_t seed) {
    require(m.arch == Arch::tiny_transformer, "sequence FI requires a tiny-transformer");
    require(n_samples >= 1, "sequence FI needs at least one sample");
    require(!prompt.tokens.empty(), "sequence FI needs a nonempty prompt");
    require(prompt.tokens.size() + continuation <= m.input.context,
            "context overflow: prompt plus continuation exceeds the model context");
    if (continuation == 0) {
        TokenFI r;
        r.l = l;
        r.samples = n_samples;
        r.mean = next_token_fi(m, prompt, t);
        return r;
    }
    Vector values(n_samples, 0.0);
    parallel_for(n_samples, [&](std::size_t n) {
        Sample s = prompt;
        s.tokens = generate(m, prompt.tokens, continuation, derive_seed(seed, l, n));
        values[n] = next_token_fi(m, s, t);
    });
    return summarize_samples(l, values);
}

/// FI_l for l >= 1: continuations of length l - 1 precede the scored step.
inline TokenFI fi_token_mc(const ZooModel& m, const Sample& prompt, std::size_t l, const PerturbationTarget& t,
                           std::size_t n_samples, std::uint64_t seed) {
    require(l >= 1, "token index l must be at least 1");
    return fi_after_continuation(m, prompt, l - 1, l, t, n_samples, seed);
}

inline double aggregate_fixed(const std::vector<double>& per_token) {
    require(!per_token.empty(), "fixed-horizon aggregate needs at least one term");
    double s = 0.0;
    for (double v : per_token) s += v;
    return s / static_cast<double>(per_token.size());
}

/// (1 - gamma) sum_l gamma^l v_l with terms starting at l = 0.
inline double aggregate_discounted(double gamma, const std::vector<double>& per_token) {
    double s = 0.0, w = 1.0;
    for (double v : per_token) {
        s += w * v;
        w *= gamma;
    }
    return (1.0 - gamma) * s;
}

/// Number of discounted terms (l = 0 .. count-1): stop before the first
/// gamma^l < 1e-6, at l_max, or when the context is full.
inline std::size_t discounted_terms(double gamma, std::size_t l_max, std::size_t capacity) {
    std::size_t count = 0;
    double w = 1.0;
    while (count <= l_max && count <= capacity && w >= 1e-6) {
        ++count;
        w *= gamma;
    }
    return count;
}

inline SeqFIEstimate fi_seq_fixed(const ZooModel& m, const Sample& prompt, std::size_t L, const PerturbationTarget& t,
                                  std::size_t n_samples, std::uint64_t seed) {
    require(L >= 1, "horizon L must be at least 1");
    SeqFIEstimate e;
    e.mode = SeqMode::fixed;
    e.horizon = L;
    std::vector<double> means;
    for (std::size_t l = 1; l <= L; ++l) {
        e.per_token.push_back(fi_token_mc(m, prompt, l, t, n_samples, seed));
        means.push_back(e.per_token.back().mean);
    }
    e.aggregate = aggregate_fixed(means);
    return e;
}

/// Discounted aggregate; term l scores the step after l sampled tokens
/// (l = 0 is the prompt itself).
inline SeqFIEstimate fi_seq_discounted(const ZooModel& m, const Sample& prompt, double gamma,
                                       const PerturbationTarget& t, std::size_t n_samples, std::uint64_t seed,
                                       std::size_t l_max = 256) {
    require(std::isfinite(gamma) && gamma >= 0.0 && gamma < 1.0, "discount factor must lie in [0, 1)");
    require(m.arch == Arch::tiny_transformer, "sequence FI requires a tiny-transformer");
    require(!prompt.tokens.empty() && prompt.tokens.size() <= m.input.context, "prompt does not fit the context");
    SeqFIEstimate e;
    e.mode = SeqMode::discounted;
    e.gamma = gamma;
    const std::size_t terms = discounted_terms(gamma, l_max, m.input.context - prompt.tokens.size());
    std::vector<double> means;
    for (std::size_t l = 0; l < terms; ++l) {
        e.per_token.push_back(fi_after_continuation(m, prompt, l, l, t, n_samples, seed));
        means.push_back(e.per_token.back().mean);
    }
    e.aggregate = aggregate_discounted(gamma, means);
    e.truncation_mass = std::pow(gamma, static_cast<double>(terms));
    e.horizon = terms;
    return e;
}

struct SeqFIParams {
    SeqMode mode = SeqMode::fixed;
    std::size_t L = 5;
    double gamma = 0.9;
    std::size_t samples = 10;
    std::size_t l_max = 256;
    std::uint64_t seed = 0;
};

inline SeqFIEstimate fi_seq(const ZooModel& m, const Sample& prompt, const PerturbationTarget& t,
                            const SeqFIParams& p) {
    return p.mode == SeqMode::fixed ? fi_seq_fixed(m, prompt, p.L, t, p.samples, p.seed)
                                    : fi_seq_discounted(m, prompt, p.gamma, t, p.samples, p.seed, p.l_max);
}

/// Mean per-prompt aggregate. Every prompt shares the seed, so repeated
/// prompts yield identical estimates.
inline double fi_dataset_mean(const ZooModel& m, const Dataset& prompts, const PerturbationTarget& t,
                              const SeqFIParams& p, std::vector<SeqFIEstimate>* per_prompt = nullptr) {
    require(!prompts.empty(), "fi_dataset_mean: empty prompt set");
    std::vector<SeqFIEstimate> est(prompts.size());
    for (std::size_t i = 0; i < prompts.size(); ++i) est[i] = fi_seq(m, prompts[i], t, p);
    double s = 0.0;
    for (const auto& e : est) s += e.aggregate;
    if (per_prompt) *per_prompt = std::move(est);
    return s / static_cast<double>(prompts.size());
}

inline nlohmann::json seq_estimate_to_json(const SeqFIEstimate& e) {
    nlohmann::json j;
    j["mode"] = seq_mode_name(e.mode);
    j["aggregate"] = e.aggregate;
    if (e.mode == SeqMode::fixed) {
        j["L"] = e.horizon;
    } else {
        j["gamma"] = e.gamma;
        j["terms"] = e.horizon;
        j["truncation_mass"] = e.truncation_mass;
    }
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : e.per_token)
        rows.push_back({{"l", r.l}, {"mean", r.mean}, {"stderr", r.stderr_}, {"samples", r.samples}});
    j["per_token"] = std::move(rows);
    return j;
}

} // namespace stab
