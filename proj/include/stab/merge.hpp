#pragma once

// Two-model merging (average, task arithmetic, TIES, DARE) with FI-guided
// protection of each donor's most sensitive parameters.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stab/checkpoint.hpp"
#include "stab/datasets.hpp"
#include "stab/error.hpp"
#include "stab/fi.hpp"
#include "stab/harness.hpp"
#include "stab/parallel.hpp"
#include "stab/random.hpp"
#include "stab/zoo.hpp"

namespace stab {

/// theta_model - theta_base, in the base's index space.
inline Checkpoint task_vector(const Checkpoint& model, const Checkpoint& base) {
    return zip_checkpoints(model, base, [](double m, double b) { return m - b; });
}

inline Checkpoint average_merge(const Checkpoint& a, const Checkpoint& b) {
    return zip_checkpoints(a, b, [](double x, double y) { return (x + y) / 2.0; });
}

inline Checkpoint task_arithmetic(const Checkpoint& a, const Checkpoint& b, const Checkpoint& base, double gamma) {
    require_aligned(a, base, "task_arithmetic");
    const Checkpoint da = task_vector(a, base), db = task_vector(b, base);
    const Checkpoint sum = zip_checkpoints(da, db, [](double x, double y) { return x + y; });
    return zip_checkpoints(base, sum, [gamma](double t, double d) { return t + gamma * d; });
}

// ---------------------------------------------------------------------------
// Protection sets

struct ProtectionSets {
    std::vector<std::size_t> a;   // sorted flat indices
    std::vector<std::size_t> b;
    double k = 0.0;
};

/// Top ceil(k * total) parameters of a map, returned sorted by index.
inline std::vector<std::size_t> top_fraction(const StabilityMap& map, double k) {
    require(k >= 0.0 && k <= 1.0, "protection ratio k must lie in [0, 1]");
    const RankedUnits r = rank_units(map);
    const std::size_t n = ceil_count(k, map.size());
    std::vector<std::size_t> out(r.ids.begin(), r.ids.begin() + static_cast<std::ptrdiff_t>(n));
    std::sort(out.begin(), out.end());
    return out;
}

inline ProtectionSets protection_sets(const StabilityMap& map_a, const StabilityMap& map_b, double k) {
    require(map_a.kind == TargetKind::parameter && map_b.kind == TargetKind::parameter,
            "protection sets need parameter maps");
    std::vector<std::size_t> ia = map_a.unit_ids, ib = map_b.unit_ids;
    std::sort(ia.begin(), ia.end());
    std::sort(ib.begin(), ib.end());
    require(ia == ib, "protection maps cover different parameter spaces");
    return {top_fraction(map_a, k), top_fraction(map_b, k), k};
}

inline bool contains_sorted(const std::vector<std::size_t>& v, std::size_t i) {
    return std::binary_search(v.begin(), v.end(), i);
}

/// Reverts A-only protected locations to theta_A and B-only ones to theta_B.
inline Checkpoint apply_protection(const Checkpoint& merged, const Checkpoint& a, const Checkpoint& b,
                                   const ProtectionSets& sets) {
    require_aligned(merged, a, "apply_protection");
    require_aligned(merged, b, "apply_protection");
    Vector out = merged.flatten();
    const Vector fa = a.flatten(), fb = b.flatten();
    for (std::size_t i : sets.a) {
        require(i < out.size(), "protection index out of range");
        if (!contains_sorted(sets.b, i)) out[i] = fa[i];
    }
    for (std::size_t i : sets.b) {
        require(i < out.size(), "protection index out of range");
        if (!contains_sorted(sets.a, i)) out[i] = fb[i];
    }
    return merged.with_flat(out);
}

// ---------------------------------------------------------------------------
// TIES

enum class ProtectStage { none, one, two };

inline std::string protect_stage_name(ProtectStage s) {
    switch (s) {
    case ProtectStage::none: return "none";
    case ProtectStage::one: return "I";
    case ProtectStage::two: return "II";
    }
    return "none";
}

inline ProtectStage parse_protect_stage(const std::string& s) {
    if (s == "none") return ProtectStage::none;
    if (s == "I" || s == "1") return ProtectStage::one;
    if (s == "II" || s == "2") return ProtectStage::two;
    throw InvalidInput("unknown protection stage '" + s + "'");
}

struct TiesStats {
    std::vector<std::size_t> kept_a;   // per tensor, after trim (including exemptions)
    std::vector<std::size_t> kept_b;
    std::size_t overlap = 0;           // stage II entries protected by both sets (resolved to A)
};

/// Trim mask over one tensor: the top ceil(density * n) entries by magnitude
/// (ties by ascending index).
inline std::vector<char> trim_mask(std::span<const double> v, double density) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t keep = std::min(n, ceil_count(density, n));
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return std::abs(v[x]) > std::abs(v[y]); });
    std::vector<char> mask(n, 0);
    for (std::size_t i = 0; i < keep; ++i) mask[order[i]] = 1;
    return mask;
}

inline Checkpoint ties_merge(const Checkpoint& a, const Checkpoint& b, const Checkpoint& base, double gamma,
                             double density, const ProtectionSets* protection, ProtectStage stage,
                             TiesStats* stats = nullptr) {
    require(density > 0.0 && density <= 1.0, "TIES density must lie in (0, 1]");
    if (stage != ProtectStage::none && !protection)
        throw InvalidInput("TIES protection stage requested without protection sets");
    require_aligned(a, base, "ties_merge");
    require_aligned(b, base, "ties_merge");
    const Checkpoint da = task_vector(a, base), db = task_vector(b, base);
    Checkpoint out = base;
    TiesStats st;
    std::size_t off = 0;
    auto ia = da.tensors.begin();
    auto ib = db.tensors.begin();
    for (auto& [name, t] : out.tensors) {
        const auto& va = ia->second.data;
        const auto& vb = ib->second.data;
        const std::size_t n = t.size();
        std::vector<char> ka = trim_mask(va, density), kb = trim_mask(vb, density);
        auto in_a = [&](std::size_t j) { return protection && contains_sorted(protection->a, off + j); };
        auto in_b = [&](std::size_t j) { return protection && contains_sorted(protection->b, off + j); };
        if (stage == ProtectStage::one)
            for (std::size_t j = 0; j < n; ++j) {
                if (in_a(j)) ka[j] = 1;
                if (in_b(j)) kb[j] = 1;
            }
        st.kept_a.push_back(static_cast<std::size_t>(std::count(ka.begin(), ka.end(), 1)));
        st.kept_b.push_back(static_cast<std::size_t>(std::count(kb.begin(), kb.end(), 1)));
        for (std::size_t j = 0; j < n; ++j) {
            const double xa = ka[j] ? va[j] : 0.0;
            const double xb = kb[j] ? vb[j] : 0.0;
            double elected = std::abs(xa) >= std::abs(xb) ? xa : xb;
            if (stage == ProtectStage::two) {
                const bool pa = in_a(j), pb = in_b(j);
                if (pa && pb) ++st.overlap;
                if (pa)
                    elected = va[j];
                else if (pb)
                    elected = vb[j];
            }
            t.data[j] += gamma * elected;
        }
        off += n;
        ++ia;
        ++ib;
    }
    if (stats) *stats = std::move(st);
    return out;
}

// ---------------------------------------------------------------------------
// DARE

/// Drops each entry with probability `drop_rate` and rescales survivors.
inline Checkpoint dare_transform(const Checkpoint& delta, double drop_rate, std::uint64_t seed) {
    require(drop_rate >= 0.0 && drop_rate < 1.0, "DARE drop rate must lie in [0, 1)");
    if (drop_rate == 0.0) return delta;
    Rng rng(seed);
    const double scale = 1.0 / (1.0 - drop_rate);
    Checkpoint out = delta;
    for (auto& [_, t] : out.tensors)
        for (double& v : t.data) v = rng.uniform() < drop_rate ? 0.0 : v * scale;
    return out;
}

// ---------------------------------------------------------------------------
// Configured merges and grid search

enum class MergeMethod { average, task, ties, dare_task, dare_ties };

inline std::string merge_method_name(MergeMethod m) {
    switch (m) {
    case MergeMethod::average: return "average";
    case MergeMethod::task: return "task";
    case MergeMethod::ties: return "ties";
    case MergeMethod::dare_task: return "dare-task";
    case MergeMethod::dare_ties: return "dare-ties";
    }
    return "unknown";
}

inline MergeMethod parse_merge_method(const std::string& s) {
    if (s == "average") return MergeMethod::average;
    if (s == "task") return MergeMethod::task;
    if (s == "ties") return MergeMethod::ties;
    if (s == "dare-task") return MergeMethod::dare_task;
    if (s == "dare-ties") return MergeMethod::dare_ties;
    throw InvalidInput("unknown merge method '" + s + "'");
}

inline bool merge_uses_gamma(MergeMethod m) { return m != MergeMethod::average; }
inline bool merge_is_ties(MergeMethod m) { return m == MergeMethod::ties || m == MergeMethod::dare_ties; }

struct MergeConfig {
    MergeMethod method = MergeMethod::average;
    double gamma = 1.0;
    std::optional<double> k;   // protection ratio; unset means no protection
    double ties_density = 0.2;
    double dare_drop = 0.9;
    ProtectStage stage = ProtectStage::none;   // TIES methods only
    std::uint64_t seed = 0;

    void validate() const {
        require(gamma > 0.0 && std::isfinite(gamma), "merge: gamma must be positive");
        require(!k || (*k >= 0.0 && *k <= 1.0), "merge: k must lie in [0, 1]");
        require(ties_density > 0.0 && ties_density <= 1.0, "merge: ties density must lie in (0, 1]");
        require(dare_drop >= 0.0 && dare_drop < 1.0, "merge: DARE drop must lie in [0, 1)");
        require(stage == ProtectStage::none || merge_is_ties(method), "merge: protection stages apply to TIES only");
        require(stage == ProtectStage::none || k, "merge: a protection stage needs k");
    }

    std::string protection_label() const {
        if (!k) return "none";
        if (merge_is_ties(method)) return stage == ProtectStage::none ? "none" : protect_stage_name(stage);
        return "revert";
    }
};

struct MergeInputs {
    const Checkpoint* a = nullptr;
    const Checkpoint* b = nullptr;
    const Checkpoint* base = nullptr;
    const StabilityMap* map_a = nullptr;   // needed when k is set
    const StabilityMap* map_b = nullptr;
};

/// Non-TIES methods protect by post-hoc reversion; TIES protects inside the
/// algorithm at the configured stage.
inline Checkpoint run_merge(const MergeConfig& cfg, const MergeInputs& in, TiesStats* stats = nullptr) {
    cfg.validate();
    require(in.a && in.b, "merge: both donor checkpoints are required");
    require(cfg.method == MergeMethod::average || in.base, "merge: this method needs a base checkpoint");
    std::optional<ProtectionSets> sets;
    if (cfg.k) {
        require(in.map_a && in.map_b, "merge: protection needs stability maps for both donors");
        sets = protection_sets(*in.map_a, *in.map_b, *cfg.k);
    }
    Checkpoint merged;
    switch (cfg.method) {
    case MergeMethod::average: merged = average_merge(*in.a, *in.b); break;
    case MergeMethod::task: merged = task_arithmetic(*in.a, *in.b, *in.base, cfg.gamma); break;
    case MergeMethod::ties:
    case MergeMethod::dare_task:
    case MergeMethod::dare_ties: {
        Checkpoint a = *in.a, b = *in.b;
        if (cfg.method != MergeMethod::ties) {
            const Checkpoint da = dare_transform(task_vector(*in.a, *in.base), cfg.dare_drop, derive_seed(cfg.seed, 0));
            const Checkpoint db = dare_transform(task_vector(*in.b, *in.base), cfg.dare_drop, derive_seed(cfg.seed, 1));
            auto add = [](double t, double d) { return t + d; };
            a = zip_checkpoints(*in.base, da, add);
            b = zip_checkpoints(*in.base, db, add);
        }
        if (cfg.method == MergeMethod::dare_task)
            merged = task_arithmetic(a, b, *in.base, cfg.gamma);
        else
            merged = ties_merge(a, b, *in.base, cfg.gamma, cfg.ties_density, sets ? &*sets : nullptr, cfg.stage,
                                stats);
        break;
    }
    }
    if (sets && !merge_is_ties(cfg.method)) merged = apply_protection(merged, *in.a, *in.b, *sets);
    return merged;
}

struct MergeGrid {
    MergeConfig base_config;
    std::vector<double> ks;       // empty: no protection
    std::vector<double> gammas;   // ignored for average

    static MergeGrid standard(MergeConfig cfg) {
        MergeGrid g;
        g.base_config = cfg;
        for (int i = 1; i <= 10; ++i) g.ks.push_back(i / 100.0);
        g.gammas = {0.3, 0.4, 0.5, 0.6, 0.9, 1.0};
        return g;
    }

    std::vector<MergeConfig> expand() const {
        std::vector<MergeConfig> out;
        const bool use_gamma = merge_uses_gamma(base_config.method) && !gammas.empty();
        const std::vector<double> gs = use_gamma ? gammas : std::vector<double>{base_config.gamma};
        std::vector<std::optional<double>> kk;
        if (ks.empty())
            kk.push_back(base_config.k);
        else
            for (double k : ks) kk.push_back(k);
        for (const auto& k : kk)
            for (double g : gs) {
                MergeConfig c = base_config;
                c.k = k;
                c.gamma = g;
                out.push_back(c);
            }
        return out;
    }
};

struct MergeRow {
    MergeConfig config;
    double acc_a = 0.0;
    double acc_b = 0.0;
    double mean = 0.0;
};

struct SearchResult {
    MergeRow best;
    std::vector<MergeRow> table;
};

/// Prefers higher mean, then smaller k (unprotected counts as 0), then smaller gamma.
inline bool better_row(const MergeRow& x, const MergeRow& y) {
    if (x.mean != y.mean) return x.mean > y.mean;
    const double kx = x.config.k.value_or(0.0), ky = y.config.k.value_or(0.0);
    if (kx != ky) return kx < ky;
    return x.config.gamma < y.config.gamma;
}

inline MergeRow evaluate_merge(const MergeConfig& cfg, const MergeInputs& in, const ZooModel& prototype,
                               const Dataset& val_a, const Dataset& val_b) {
    ZooModel m = prototype;
    m.checkpoint = run_merge(cfg, in);
    MergeRow row;
    row.config = cfg;
    row.acc_a = accuracy(m, val_a);
    row.acc_b = accuracy(m, val_b);
    row.mean = (row.acc_a + row.acc_b) / 2.0;
    return row;
}

/// Evaluates every configuration on both validation domains; `prototype`
/// supplies the architecture the merged checkpoints are loaded into.
inline SearchResult hyper_search(const std::vector<MergeConfig>& grid, const MergeInputs& in,
                                 const ZooModel& prototype, const Dataset& val_a, const Dataset& val_b) {
    require(!grid.empty(), "hyper_search: empty grid");
    require(!val_a.empty() && !val_b.empty(), "hyper_search: validation sets must be nonempty");
    SearchResult res;
    res.table.resize(grid.size());
    parallel_for(grid.size(), [&](std::size_t i) { res.table[i] = evaluate_merge(grid[i], in, prototype, val_a, val_b); });
    res.best = res.table.front();
    for (const auto& r : res.table)
        if (better_row(r, res.best)) res.best = r;
    return res;
}

inline std::string merge_table_header() { return "method,protection,k,gamma,acc_a,acc_b,mean\n"; }

inline std::string merge_table_row(const MergeRow& r) {
    std::ostringstream os;
    os.precision(17);
    auto setting = [](double v) {
        std::ostringstream s;
        s.precision(12);
        s << v;
        return s.str();
    };
    os << merge_method_name(r.config.method) << ',' << r.config.protection_label() << ',';
    if (r.config.k) os << setting(*r.config.k);
    os << ',';
    if (merge_uses_gamma(r.config.method)) os << setting(r.config.gamma);
    os << ',' << r.acc_a << ',' << r.acc_b << ',' << r.mean << '\n';
    return os.str();
}

inline std::string merge_table_csv(const std::vector<MergeRow>& rows) {
    std::string out = merge_table_header();
    for (const auto& r : rows) out += merge_table_row(r);
    return out;
}

} // namespace stab
