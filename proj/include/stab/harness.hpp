#pragma once

// Measure-guided attacks (pixel masking, embedding perturbation), parameter
// sparsification, and evaluation reports.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stab/checkpoint.hpp"
#include "stab/datasets.hpp"
#include "stab/error.hpp"
#include "stab/fi.hpp"
#include "stab/parallel.hpp"
#include "stab/random.hpp"
#include "stab/zoo.hpp"

namespace stab {

inline constexpr const char* kTieBreakRule = "value-desc-id-asc";

struct RankedUnits {
    std::vector<std::size_t> ids;   // most sensitive first
    Vector values;
    std::string measure;
    std::string tie_break = kTieBreakRule;

    std::size_t size() const { return ids.size(); }
};

inline RankedUnits rank_units(const StabilityMap& map) {
    require(map.size() > 0, "rank_units: empty map");
    std::vector<std::size_t> order(map.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (map.values[a] != map.values[b]) return map.values[a] > map.values[b];
        return map.unit_ids[a] < map.unit_ids[b];
    });
    RankedUnits r;
    r.measure = measure_name(map.measure);
    for (std::size_t i : order) {
        r.ids.push_back(map.unit_ids[i]);
        r.values.push_back(map.values[i]);
    }
    return r;
}

/// Uniformly random order over unit ids 0..n-1.
inline RankedUnits random_ranking(std::size_t n, std::uint64_t seed) {
    RankedUnits r;
    r.measure = "random";
    r.tie_break = "shuffle";
    r.ids.resize(n);
    std::iota(r.ids.begin(), r.ids.end(), std::size_t{0});
    Rng rng(seed);
    rng.shuffle(r.ids);
    r.values.assign(n, 0.0);
    return r;
}

/// Sets the three channels of the top-k ranked pixels to mask_value.
inline Sample mask_pixels(const Sample& image, const RankedUnits& ranked, std::size_t k, double mask_value = 0.0) {
    require(k <= ranked.size(), "mask_pixels: k exceeds the number of ranked pixels");
    Sample out = image;
    for (std::size_t i = 0; i < k; ++i) {
        const std::size_t px = ranked.ids[i];
        require(3 * px + 2 < out.x.size(), "mask_pixels: pixel id outside the image");
        for (std::size_t c = 0; c < 3; ++c) out.x[3 * px + c] = mask_value;
    }
    return out;
}

inline std::size_t ceil_count(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

inline std::size_t floor_count(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

/// Moves the selected embedding dimensions by -eps * g / |g|, where g is the
/// gradient of log P(y_pred) restricted to those dimensions.
inline Sample embed_attack(const ZooModel& m, const Sample& input, const RankedUnits& ranked, double fraction,
                           double eps) {
    require(m.arch == Arch::tiny_transformer, "embed_attack requires a tiny-transformer");
    require(fraction > 0.0 && fraction <= 1.0, "embed_attack: fraction must lie in (0, 1]");
    require(eps > 0.0 && std::isfinite(eps), "embed_attack: eps must be positive");
    const std::size_t D = m.input.d_model;
    const std::size_t count = std::max<std::size_t>(1, ceil_count(fraction, D));
    require(count <= ranked.size(), "embed_attack: ranking has too few dimensions");
    ClassDistribution probs;
    const Matrix block = score_block(m, input, TargetKind::embedding_dim, &probs);
    const std::size_t y_pred = probs.argmax();
    std::vector<std::size_t> dims(ranked.ids.begin(), ranked.ids.begin() + static_cast<std::ptrdiff_t>(count));
    Vector g(count);
    for (std::size_t i = 0; i < count; ++i) {
        require(dims[i] < D, "embed_attack: dimension id outside the embedding");
        g[i] = block(y_pred, dims[i]);
    }
    const double nrm = norm2(g);
    if (!(nrm > 0.0)) throw DegenerateAttack("embed_attack: gradient vanishes on the selected dimensions");
    Vector omega(count);
    for (std::size_t i = 0; i < count; ++i) omega[i] = -eps * g[i] / nrm;
    PerturbationTarget t{TargetKind::embedding_dim, dims};
    return apply_perturbation(m, input, t, omega).second;
}

enum class SparsifyStrategy { fi_high, random };

inline SparsifyStrategy parse_sparsify_strategy(const std::string& s) {
    if (s == "fi-high") return SparsifyStrategy::fi_high;
    if (s == "random") return SparsifyStrategy::random;
    throw InvalidInput("unknown sparsification strategy '" + s + "'");
}

inline std::string sparsify_strategy_name(SparsifyStrategy s) {
    return s == SparsifyStrategy::fi_high ? "fi-high" : "random";
}

/// Zeroes exactly floor(fraction * total) coordinates: the top of the map's
/// ranking for fi-high, a uniform sample without replacement for random.
inline Checkpoint sparsify(const Checkpoint& ck, double fraction, SparsifyStrategy strategy,
                           const StabilityMap* map, std::uint64_t seed) {
    require(fraction >= 0.0 && fraction <= 1.0, "sparsify: fraction must lie in [0, 1]");
    const std::size_t total = ck.total();
    const std::size_t count = floor_count(fraction, total);
    std::vector<std::size_t> chosen;
    if (strategy == SparsifyStrategy::fi_high) {
        if (!map) throw InvalidInput("sparsify: fi-high needs a stability map");
        require(map->kind == TargetKind::parameter, "sparsify: map must score parameters");
        const RankedUnits r = rank_units(*map);
        require(count <= r.size(), "sparsify: map covers fewer parameters than requested");
        chosen.assign(r.ids.begin(), r.ids.begin() + static_cast<std::ptrdiff_t>(count));
    } else {
        std::vector<std::size_t> all(total);
        std::iota(all.begin(), all.end(), std::size_t{0});
        Rng rng(seed);
        for (std::size_t i = 0; i < count; ++i) std::swap(all[i], all[i + rng.index(total - i)]);
        chosen.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(count));
    }
    Vector flat = ck.flatten();
    for (std::size_t i : chosen) {
        require(i < total, "sparsify: parameter id out of range");
        flat[i] = 0.0;
    }
    return ck.with_flat(flat);
}

// ---------------------------------------------------------------------------
// Evaluation

enum class Metric { accuracy, rouge1 };

inline std::string metric_name(Metric m) { return m == Metric::accuracy ? "accuracy" : "rouge1"; }

struct EvalReport {
    Metric metric = Metric::accuracy;
    double value = 0.0;
    double std = 0.0;   // across seeds when more than one
    std::size_t samples = 0;
    std::vector<std::uint64_t> seeds;
    std::string condition;
    std::string tie_rule = "argmax-lowest-index";
};

/// Unigram F1 with multiset overlap.
inline double rouge1(const std::vector<std::size_t>& candidate, const std::vector<std::size_t>& reference) {
    if (candidate.empty() && reference.empty()) return 1.0;
    if (candidate.empty() || reference.empty()) return 0.0;
    std::map<std::size_t, std::size_t> ref;
    for (std::size_t t : reference) ++ref[t];
    std::size_t overlap = 0;
    for (std::size_t t : candidate) {
        auto it = ref.find(t);
        if (it != ref.end() && it->second > 0) {
            --it->second;
            ++overlap;
        }
    }
    if (overlap == 0) return 0.0;
    const double p = static_cast<double>(overlap) / static_cast<double>(candidate.size());
    const double r = static_cast<double>(overlap) / static_cast<double>(reference.size());
    return 2.0 * p * r / (p + r);
}

inline EvalReport evaluate_accuracy(const ZooModel& m, const Dataset& data, std::string condition = "clean") {
    require(!data.empty(), "evaluate: empty dataset");
    std::vector<char> hit(data.size(), 0);
    parallel_for(data.size(), [&](std::size_t i) { hit[i] = predict(m, data[i]) == data[i].y; });
    EvalReport r;
    r.metric = Metric::accuracy;
    r.samples = data.size();
    r.value = static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(data.size());
    r.condition = std::move(condition);
    return r;
}

/// Continuations of `length` tokens for each prompt; prompt i samples with seed stream (seed, i).
inline std::vector<std::vector<std::size_t>> generate_continuations(const ZooModel& m, const Dataset& prompts,
                                                                    std::size_t length, std::uint64_t seed) {
    std::vector<std::vector<std::size_t>> out(prompts.size());
    parallel_for(prompts.size(), [&](std::size_t i) {
        auto full = generate(m, prompts[i].tokens, length, derive_seed(seed, i));
        out[i].assign(full.begin() + static_cast<std::ptrdiff_t>(prompts[i].tokens.size()), full.end());
    });
    return out;
}

/// Mean ROUGE-1 of the model's continuations against reference continuations.
inline EvalReport evaluate_rouge(const ZooModel& m, const Dataset& prompts,
                                 const std::vector<std::vector<std::size_t>>& references, std::size_t length,
                                 std::uint64_t seed, std::string condition = "clean") {
    require(!prompts.empty(), "evaluate: empty dataset");
    require(references.size() == prompts.size(), "evaluate: one reference per prompt is required");
    const auto cand = generate_continuations(m, prompts, length, seed);
    double s = 0.0;
    for (std::size_t i = 0; i < cand.size(); ++i) s += rouge1(cand[i], references[i]);
    EvalReport r;
    r.metric = Metric::rouge1;
    r.samples = prompts.size();
    r.value = s / static_cast<double>(prompts.size());
    r.seeds = {seed};
    r.condition = std::move(condition);
    return r;
}

/// Mean and sample standard deviation of per-seed reports.
inline EvalReport combine_reports(const std::vector<EvalReport>& runs) {
    require(!runs.empty(), "combine_reports: no runs");
    EvalReport r = runs.front();
    r.seeds.clear();
    double s = 0.0;
    for (const auto& x : runs) {
        s += x.value;
        r.seeds.insert(r.seeds.end(), x.seeds.begin(), x.seeds.end());
    }
    r.value = s / static_cast<double>(runs.size());
    r.std = 0.0;
    if (runs.size() > 1) {
        double ss = 0.0;
        for (const auto& x : runs) ss += (x.value - r.value) * (x.value - r.value);
        r.std = std::sqrt(ss / static_cast<double>(runs.size() - 1));
    }
    return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    return {{"metric", metric_name(r.metric)}, {"value", r.value},     {"std", r.std},
            {"samples", r.samples},            {"seeds", r.seeds},     {"condition", r.condition},
            {"tie_rule", r.tie_rule}};
}

inline std::string csv_header() { return "condition,metric,value,std,seeds\n"; }

inline std::string csv_row(const EvalReport& r) {
    std::ostringstream os;
    os.precision(17);
    os << '"' << r.condition << "\"," << metric_name(r.metric) << ',' << r.value << ',' << r.std << ',';
    for (std::size_t i = 0; i < r.seeds.size(); ++i) os << (i ? ";" : "") << r.seeds[i];
    os << '\n';
    return os.str();
}

// ---------------------------------------------------------------------------
// Attack pipelines. A ranking strategy is a measure, or nullopt for random.

using RankSource = std::optional<Measure>;

inline std::string rank_source_name(const RankSource& s) { return s ? measure_name(*s) : "random"; }

inline RankSource parse_rank_source(const std::string& s) {
    if (s == "random") return std::nullopt;
    return parse_measure(s);
}

/// Accuracy after masking the top-k pixels of every image, each ranked on its own map.
inline EvalReport pixel_attack(const ZooModel& m, const Dataset& data, const RankSource& source, std::size_t k,
                               std::uint64_t seed, double mask_value = 0.0) {
    require(m.arch == Arch::vision_classifier, "pixel attack requires a vision-classifier");
    require(!data.empty(), "pixel attack: empty dataset");
    const std::size_t pixels = m.input.width * m.input.height;
    std::vector<char> hit(data.size(), 0);
    parallel_for(data.size(), [&](std::size_t i) {
        const RankedUnits r = source ? rank_units(stability_map(m, data[i], Family::all_pixels, *source))
                                     : random_ranking(pixels, derive_seed(seed, i));
        hit[i] = predict(m, mask_pixels(data[i], r, k, mask_value)) == data[i].y;
    });
    EvalReport rep;
    rep.samples = data.size();
    rep.value = static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(data.size());
    rep.condition = "pixels k=" + std::to_string(k) + " rank=" + rank_source_name(source);
    if (!source) rep.seeds = {seed};
    return rep;
}

/// Accuracy after the embedding attack on every prompt. Samples whose
/// gradient vanishes are left unperturbed and counted in `degenerate`.
inline EvalReport embedding_attack(const ZooModel& m, const Dataset& data, const RankSource& source,
                                   double fraction, double eps, std::uint64_t seed, std::size_t* degenerate = nullptr) {
    require(m.arch == Arch::tiny_transformer, "embedding attack requires a tiny-transformer");
    require(!data.empty(), "embedding attack: empty dataset");
    std::vector<char> hit(data.size(), 0), skipped(data.size(), 0);
    parallel_for(data.size(), [&](std::size_t i) {
        const RankedUnits r = source ? rank_units(stability_map(m, data[i], Family::all_embed_dims, *source))
                                     : random_ranking(m.input.d_model, derive_seed(seed, i));
        Sample attacked = data[i];
        try {
            attacked = embed_attack(m, data[i], r, fraction, eps);
        } catch (const DegenerateAttack&) {
            skipped[i] = 1;
        }
        hit[i] = predict(m, attacked) == data[i].y;
    });
    if (degenerate) *degenerate = static_cast<std::size_t>(std::count(skipped.begin(), skipped.end(), 1));
    EvalReport rep;
    rep.samples = data.size();
    rep.value = static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(data.size());
    std::ostringstream cond;
    cond << "embed fraction=" << fraction << " eps=" << eps << " rank=" << rank_source_name(source);
    rep.condition = cond.str();
    if (!source) rep.seeds = {seed};
    return rep;
}

/// Plain-text RGB image (P3) of a vision sample.
inline std::string sample_to_ppm(const Sample& s, std::size_t width, std::size_t height) {
    require(s.x.size() == width * height * 3, "PPM export: sample does not match the image size");
    std::string out = "P3\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (std::size_t r = 0; r < height; ++r) {
        for (std::size_t c = 0; c < width; ++c)
            for (std::size_t ch = 0; ch < 3; ++ch) {
                if (c || ch) out += ' ';
                const double v = std::clamp(s.x[(r * width + c) * 3 + ch], 0.0, 1.0);
                out += std::to_string(static_cast<int>(std::lround(v * 255.0)));
            }
        out += '\n';
    }
    return out;
}

} // namespace stab
