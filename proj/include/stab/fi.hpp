#pragma once

// First-order local influence (FI) and the competing stability measures.
//
// For a perturbation omega of dimension p, the score matrix S (p x K) holds
// per-class log-likelihood gradients at omega = 0. The metric on the
// perturbation manifold is G = sum_y P(y) s_y s_y^T = B B^T, where B has
// columns sqrt(P(y)) s_y. With f(omega) = -log P(y_pred | ...),
//
//     FI = grad_f^T G^+ grad_f,
//
// the inverse when G is full rank and the Moore-Penrose pseudo-inverse via
// the compact SVD of B otherwise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "stab/datasets.hpp"
#include "stab/error.hpp"
#include "stab/io.hpp"
#include "stab/numeric.hpp"
#include "stab/parallel.hpp"
#include "stab/zoo.hpp"

namespace stab {

struct MetricTensor {
    Matrix g;
};

/// B with columns sqrt(P(y)) s_y, so that G = B B^T is p x p.
inline Matrix fisher_factor(const ScoreMatrix& scores, const ClassDistribution& probs) {
    require(scores.classes() == probs.size(), "score matrix and distribution disagree on class count");
    Matrix b(scores.p(), scores.classes());
    for (std::size_t y = 0; y < scores.classes(); ++y) {
        const double w = std::sqrt(probs.probs[y]);
        for (std::size_t i = 0; i < scores.p(); ++i) b(i, y) = w * scores.m(i, y);
    }
    return b;
}

inline MetricTensor metric_tensor(const ScoreMatrix& scores, const ClassDistribution& probs) {
    const Matrix b = fisher_factor(scores, probs);
    Matrix g = matmul(b, transpose(b));
    // Exact symmetry regardless of summation order.
    for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = i + 1; j < g.cols; ++j) g(j, i) = g(i, j);
    return {std::move(g)};
}

enum class FIPath { inverse, csvd };

inline std::string fi_path_name(FIPath p) { return p == FIPath::inverse ? "inverse" : "csvd"; }

struct FIResult {
    double value = 0.0;
    std::size_t rank = 0;
    FIPath path = FIPath::inverse;
    double gradient_norm = 0.0;
};

namespace detail {

inline void check_fi_inputs(std::span<const double> grad, const ScoreMatrix& scores, const ClassDistribution& probs) {
    require(grad.size() == scores.p(), "gradient length does not match the score matrix");
    require(scores.classes() == probs.size(), "score matrix and distribution disagree on class count");
    require(all_finite(grad) && all_finite(scores.m.data), "FI inputs must be finite");
}

} // namespace detail

/// Pseudo-inverse path: compact SVD B = V L U, FI = || L^-1 V^T grad ||^2.
inline FIResult fi_value_csvd(std::span<const double> grad, const ScoreMatrix& scores, const ClassDistribution& probs) {
    detail::check_fi_inputs(grad, scores, probs);
    FIResult r;
    r.path = FIPath::csvd;
    r.gradient_norm = norm2(grad);
    const CompactSVD svd = compact_svd(fisher_factor(scores, probs));
    r.rank = svd.rank;
    if (r.gradient_norm == 0.0) return r;
    Vector residual(grad.begin(), grad.end());
    for (std::size_t k = 0; k < svd.rank; ++k) {
        double c = 0.0;
        for (std::size_t i = 0; i < grad.size(); ++i) c += svd.left(i, k) * grad[i];
        r.value += (c / svd.singular[k]) * (c / svd.singular[k]);
        for (std::size_t i = 0; i < grad.size(); ++i) residual[i] -= c * svd.left(i, k);
    }
    if (norm2(residual) > 1e-8 * r.gradient_norm)
        throw OutOfRange("FI gradient lies outside the range of the metric tensor");
    return r;
}

/// Closed form grad^T G^-1 grad by Cholesky; requires a positive definite metric.
inline FIResult fi_value_inverse(std::span<const double> grad, const ScoreMatrix& scores,
                                 const ClassDistribution& probs) {
    detail::check_fi_inputs(grad, scores, probs);
    FIResult r;
    r.path = FIPath::inverse;
    r.gradient_norm = norm2(grad);
    const MetricTensor g = metric_tensor(scores, probs);
    const auto x = cholesky_solve(g.g, grad);
    if (!x) throw OutOfRange("metric tensor is not positive definite");
    r.rank = scores.p();
    r.value = std::max(0.0, dot(grad, *x));
    return r;
}

/// Dispatch: p = 1 by scalar division, p <= 3 through the compact SVD, larger
/// p by the inverse when the metric has full, well-conditioned rank and the
/// compact SVD otherwise.
inline FIResult fi_value(std::span<const double> grad, const ScoreMatrix& scores, const ClassDistribution& probs) {
    detail::check_fi_inputs(grad, scores, probs);
    const std::size_t p = scores.p();
    if (p == 1) {
        FIResult r;
        r.path = FIPath::inverse;
        r.gradient_norm = std::abs(grad[0]);
        double g = 0.0;
        for (std::size_t y = 0; y < scores.classes(); ++y) g += probs.probs[y] * scores.m(0, y) * scores.m(0, y);
        r.rank = g > 0.0 ? 1 : 0;
        if (grad[0] == 0.0) return r;
        if (g <= 0.0) throw OutOfRange("FI gradient lies outside the range of the metric tensor");
        r.value = grad[0] * grad[0] / g;
        return r;
    }
    if (p <= 3) return fi_value_csvd(grad, scores, probs);
    const CompactSVD svd = compact_svd(fisher_factor(scores, probs));
    // Forming G squares the condition number of B; past cond(G) = 1e8 the
    // Cholesky solve loses the 1e-8 accuracy the compact SVD keeps.
    const bool well_conditioned =
        svd.rank == p && svd.singular.back() * svd.singular.back() > 1e-8 * svd.singular.front() * svd.singular.front();
    if (well_conditioned) {
        try {
            return fi_value_inverse(grad, scores, probs);
        } catch (const OutOfRange&) {
            // Numerically semidefinite despite full SVD rank.
        }
    }
    return fi_value_csvd(grad, scores, probs);
}

// ---------------------------------------------------------------------------
// Baseline measures

enum class Measure { fi, jacobian, snip, saliency };

inline std::string measure_name(Measure m) {
    switch (m) {
    case Measure::fi: return "fi";
    case Measure::jacobian: return "jacobian";
    case Measure::snip: return "snip";
    case Measure::saliency: return "saliency";
    }
    return "unknown";
}

inline Measure parse_measure(const std::string& s) {
    if (s == "fi") return Measure::fi;
    if (s == "jacobian") return Measure::jacobian;
    if (s == "snip") return Measure::snip;
    if (s == "saliency") return Measure::saliency;
    throw InvalidInput("unknown measure '" + s + "'");
}

/// Gradients of f(y, omega) = -log P(y | ...) for every class (p x K).
inline Matrix f_gradients(const ScoreMatrix& scores) {
    Matrix out = scores.m;
    for (double& v : out.data) v = -v;
    return out;
}

/// Jacobian norm, SNIP and saliency over one unit. `f_grads` is p x K with
/// column y = d f(y, omega) / d omega. `base_values` (length p) is only read by SNIP.
inline double baseline_measure(Measure kind, const Matrix& f_grads, std::size_t y_pred,
                               std::span<const double> base_values = {}) {
    require(y_pred < f_grads.cols, "y_pred outside the class range");
    const std::size_t p = f_grads.rows;
    switch (kind) {
    case Measure::jacobian: {
        double s = 0.0;
        for (std::size_t i = 0; i < p; ++i) s += f_grads(i, y_pred) * f_grads(i, y_pred);
        return std::sqrt(s);
    }
    case Measure::snip: {
        require(base_values.size() == p, "SNIP needs one base value per perturbation coordinate");
        double s = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            const double v = base_values[i] * f_grads(i, y_pred);
            s += v * v;
        }
        return std::sqrt(s);
    }
    case Measure::saliency: {
        double total = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            const double own = f_grads(i, y_pred);
            double others = 0.0;
            for (std::size_t y = 0; y < f_grads.cols; ++y)
                if (y != y_pred) others += f_grads(i, y);
            if (own < 0.0 || others > 0.0) continue;
            total += -own * others;
        }
        return total;
    }
    case Measure::fi: break;
    }
    throw InvalidInput("baseline_measure: unsupported measure '" + measure_name(kind) + "'");
}

// ---------------------------------------------------------------------------
// Stability maps

enum class Family { all_pixels, all_params, all_embed_dims, all_input_dims, param_subset };

inline std::string family_name(Family f) {
    switch (f) {
    case Family::all_pixels: return "pixels";
    case Family::all_params: return "params";
    case Family::all_embed_dims: return "embed-dims";
    case Family::all_input_dims: return "input-dims";
    case Family::param_subset: return "param-subset";
    }
    return "unknown";
}

inline Family parse_family(const std::string& s) {
    if (s == "pixels" || s == "all-pixels") return Family::all_pixels;
    if (s == "params" || s == "all-params") return Family::all_params;
    if (s == "embed-dims" || s == "all-embed-dims") return Family::all_embed_dims;
    if (s == "input-dims" || s == "all-input-dims") return Family::all_input_dims;
    if (s == "param-subset") return Family::param_subset;
    throw InvalidInput("unknown target family '" + s + "'");
}

inline TargetKind family_kind(Family f) {
    switch (f) {
    case Family::all_pixels: return TargetKind::pixel;
    case Family::all_params:
    case Family::param_subset: return TargetKind::parameter;
    case Family::all_embed_dims: return TargetKind::embedding_dim;
    case Family::all_input_dims: return TargetKind::input_dim;
    }
    return TargetKind::parameter;
}

/// Per-unit values of one measure. Unit ids are pixel indices, flat parameter
/// indices, embedding dimensions, or input dimensions depending on the kind.
struct StabilityMap {
    Measure measure = Measure::fi;
    TargetKind kind = TargetKind::parameter;
    std::vector<std::size_t> unit_ids;
    Vector values;
    std::string model_id;
    std::string input_id;
    std::size_t width = 0;   // pixel maps only
    std::size_t height = 0;

    std::size_t size() const { return unit_ids.size(); }
};

/// Units of a family; `subset` is used for param_subset only.
inline std::vector<std::size_t> family_units(const ZooModel& m, Family f, const std::vector<std::size_t>& subset = {}) {
    const TargetKind kind = family_kind(f);
    const std::size_t n = coordinate_space(m, kind);
    std::vector<std::size_t> ids;
    if (f == Family::param_subset) {
        for (std::size_t i : subset) require(i < n, "parameter subset index out of range");
        ids = subset;
    } else {
        const std::size_t units = kind == TargetKind::pixel ? n / 3 : n;
        ids.resize(units);
        for (std::size_t i = 0; i < units; ++i) ids[i] = i;
    }
    require(!ids.empty(), "target family is empty");
    return ids;
}

inline PerturbationTarget unit_target(TargetKind kind, std::size_t unit) {
    switch (kind) {
    case TargetKind::parameter: return PerturbationTarget::parameter(unit);
    case TargetKind::pixel: return PerturbationTarget::pixel(unit);
    case TargetKind::input_dim: return PerturbationTarget::input_dim(unit);
    case TargetKind::embedding_dim: return PerturbationTarget::embedding_dim(unit);
    }
    return {};
}

/// Values the perturbation coordinates are added to (SNIP base values).
/// Embedding dimensions use the mean over the input's token embeddings.
inline Vector coordinate_values(const ZooModel& m, const Sample& s, TargetKind kind) {
    switch (kind) {
    case TargetKind::parameter: return m.checkpoint.flatten();
    case TargetKind::pixel:
    case TargetKind::input_dim: return s.x;
    case TargetKind::embedding_dim: {
        const std::size_t d = m.input.d_model;
        const auto& te = m.checkpoint.at("tok_emb").data;
        const auto& pe = m.checkpoint.at("pos_emb").data;
        Vector out(d, 0.0);
        for (std::size_t t = 0; t < s.tokens.size(); ++t)
            for (std::size_t k = 0; k < d; ++k) out[k] += te[s.tokens[t] * d + k] + pe[t * d + k];
        for (std::size_t k = 0; k < d; ++k) {
            out[k] /= static_cast<double>(s.tokens.size());
            if (!s.embed_offset.empty()) out[k] += s.embed_offset[k];
        }
        return out;
    }
    }
    return {};
}

/// Measure value of a single unit given the full K x n score block.
inline double unit_measure(Measure measure, const Matrix& block, const ClassDistribution& probs, std::size_t y_pred,
                           const PerturbationTarget& t, std::span<const double> coord_values) {
    const ScoreMatrix sm = restrict_scores(block, t);
    if (measure == Measure::fi) {
        Vector grad = sm.column(y_pred);
        for (double& v : grad) v = -v;
        return fi_value(grad, sm, probs).value;
    }
    Vector base;
    if (measure == Measure::snip) {
        base.reserve(t.p());
        for (std::size_t c : t.coords) base.push_back(coord_values[c]);
    }
    return baseline_measure(measure, f_gradients(sm), y_pred, base);
}

inline StabilityMap stability_map(const ZooModel& m, const Sample& s, Family family, Measure measure,
                                  const std::vector<std::size_t>& subset = {}) {
    StabilityMap map;
    map.measure = measure;
    map.kind = family_kind(family);
    map.unit_ids = family_units(m, family, subset);
    if (map.kind == TargetKind::pixel) {
        map.width = m.input.width;
        map.height = m.input.height;
    }
    ClassDistribution probs;
    const Matrix block = score_block(m, s, map.kind, &probs);
    const std::size_t y_pred = probs.argmax();
    const Vector coord_values = measure == Measure::snip ? coordinate_values(m, s, map.kind) : Vector{};
    map.values.assign(map.unit_ids.size(), 0.0);
    for (std::size_t u = 0; u < map.unit_ids.size(); ++u)
        map.values[u] = unit_measure(measure, block, probs, y_pred, unit_target(map.kind, map.unit_ids[u]), coord_values);
    return map;
}

/// Unit-wise mean of per-sample maps over a calibration set.
inline StabilityMap stability_map_mean(const ZooModel& m, const Dataset& data, Family family, Measure measure,
                                       const std::vector<std::size_t>& subset = {}) {
    require(!data.empty(), "stability_map_mean: empty calibration set");
    std::vector<StabilityMap> maps(data.size());
    parallel_for(data.size(), [&](std::size_t i) { maps[i] = stability_map(m, data[i], family, measure, subset); });
    StabilityMap out = maps.front();
    for (std::size_t i = 1; i < maps.size(); ++i)
        for (std::size_t u = 0; u < out.values.size(); ++u) out.values[u] += maps[i].values[u];
    for (double& v : out.values) v /= static_cast<double>(maps.size());
    return out;
}

// ---------------------------------------------------------------------------
// Map files

inline nlohmann::json map_to_json(const StabilityMap& map) {
    nlohmann::json j;
    j["measure"] = measure_name(map.measure);
    j["target"] = target_kind_name(map.kind);
    if (!map.model_id.empty()) j["model"] = map.model_id;
    if (!map.input_id.empty()) j["input"] = map.input_id;
    if (map.width) {
        j["width"] = map.width;
        j["height"] = map.height;
    }
    nlohmann::json units = nlohmann::json::array();
    for (std::size_t i = 0; i < map.size(); ++i) units.push_back({{"id", map.unit_ids[i]}, {"value", map.values[i]}});
    j["units"] = std::move(units);
    return j;
}

inline TargetKind parse_target_kind(const std::string& s) {
    if (s == "parameter") return TargetKind::parameter;
    if (s == "pixel") return TargetKind::pixel;
    if (s == "input-dim") return TargetKind::input_dim;
    if (s == "embedding-dim") return TargetKind::embedding_dim;
    throw InvalidInput("unknown target kind '" + s + "'");
}

inline StabilityMap map_from_json(const nlohmann::json& j) {
    StabilityMap map;
    try {
        map.measure = parse_measure(j.at("measure").get<std::string>());
        map.kind = parse_target_kind(j.at("target").get<std::string>());
        map.model_id = j.value("model", "");
        map.input_id = j.value("input", "");
        map.width = j.value("width", std::size_t{0});
        map.height = j.value("height", std::size_t{0});
        for (const auto& u : j.at("units")) {
            map.unit_ids.push_back(u.at("id").get<std::size_t>());
            map.values.push_back(u.at("value").get<double>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed stability map: ") + e.what());
    }
    require(all_finite(map.values), "stability map has non-finite values");
    return map;
}

inline void save_map(const StabilityMap& map, const std::filesystem::path& path) {
    io::write_text_atomic(path, map_to_json(map).dump(1) + "\n");
}

inline StabilityMap load_map(const std::filesystem::path& path) {
    try {
        return map_from_json(nlohmann::json::parse(io::read_text(path)));
    } catch (const nlohmann::json::parse_error& e) {
        throw InvalidInput("cannot parse map " + path.string() + ": " + e.what());
    }
}

/// Plain (P2) graymap of a pixel map, linearly rescaled so min -> 0 and max -> 255.
inline std::string map_to_pgm(const StabilityMap& map) {
    require(map.kind == TargetKind::pixel && map.width * map.height == map.size(),
            "PGM export needs a full pixel map");
    const auto [lo, hi] = std::minmax_element(map.values.begin(), map.values.end());
    const double span = *hi - *lo;
    std::vector<int> level(map.size(), 0);
    for (std::size_t i = 0; i < map.size(); ++i)
        level[map.unit_ids[i]] = span > 0.0 ? static_cast<int>(std::lround((map.values[i] - *lo) / span * 255.0)) : 0;
    std::string out = "P2\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
    for (std::size_t r = 0; r < map.height; ++r) {
        for (std::size_t c = 0; c < map.width; ++c) {
            if (c) out += ' ';
            out += std::to_string(level[r * map.width + c]);
        }
        out += '\n';
    }
    return out;
}

} // namespace stab
