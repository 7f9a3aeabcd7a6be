#pragma once

// Samples, line-delimited dataset files, and the seeded synthetic generators
// that feed the model zoo.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "stab/error.hpp"
#include "stab/io.hpp"
#include "stab/numeric.hpp"
#include "stab/random.hpp"

namespace stab {

/// One model input with its label. Feature and vision models read `x`
/// (pixels are stored y-major, then x, then RGB channel); the transformer
/// reads `tokens` plus an optional additive offset on every token embedding.
struct Sample {
    Vector x;
    std::vector<std::size_t> tokens;
    Vector embed_offset;
    std::size_t y = 0;
};

using Dataset = std::vector<Sample>;

inline nlohmann::json sample_to_json(const Sample& s) {
    nlohmann::json j;
    if (!s.tokens.empty())
        j["tokens"] = s.tokens;
    else
        j["x"] = s.x;
    j["y"] = s.y;
    return j;
}

inline Sample sample_from_json(const nlohmann::json& j) {
    Sample s;
    try {
        if (j.contains("tokens"))
            s.tokens = j.at("tokens").get<std::vector<std::size_t>>();
        else
            s.x = j.at("x").get<Vector>();
        s.y = j.at("y").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed dataset record: ") + e.what());
    }
    require(all_finite(s.x), "dataset record has non-finite features");
    return s;
}

inline std::string dataset_to_text(const Dataset& d) {
    std::string out;
    for (const auto& s : d) out += sample_to_json(s).dump() + "\n";
    return out;
}

inline void save_dataset(const Dataset& d, const std::filesystem::path& path) {
    io::write_text_atomic(path, dataset_to_text(d));
}

inline Dataset load_dataset(const std::filesystem::path& path) {
    std::istringstream in(io::read_text(path));
    Dataset d;
    std::string line;
    while (std::getline(in, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            d.push_back(sample_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error& e) {
            throw InvalidInput("cannot parse dataset line in " + path.string() + ": " + e.what());
        }
    }
    return d;
}

namespace data {

/// Gaussian blobs around well-separated class centers.
inline Dataset blobs(std::size_t n, std::size_t classes, std::size_t dim, double margin, std::uint64_t seed) {
    require(classes >= 2 && dim >= 1, "blobs: need at least two classes and one feature");
    Rng rng(seed);
    std::vector<Vector> centers(classes, Vector(dim));
    for (auto& c : centers) {
        for (double& v : c) v = rng.normal();
        const double nrm = norm2(c);
        for (double& v : c) v *= margin / std::max(nrm, 1e-12);
    }
    Dataset d(n);
    for (std::size_t i = 0; i < n; ++i) {
        d[i].y = i % classes;
        d[i].x.resize(dim);
        for (std::size_t k = 0; k < dim; ++k) d[i].x[k] = centers[d[i].y][k] + rng.normal();
    }
    rng.shuffle(d);
    return d;
}

inline constexpr std::size_t kImageSide = 16;
inline constexpr std::size_t kShapeClasses = 8;
inline constexpr std::array<const char*, kShapeClasses> kShapeNames = {
    "disk", "square", "triangle", "plus", "ring", "frame", "cross", "diamond"};

/// Does pixel (px, py) belong to shape `cls` centred at (cx, cy) with size r?
inline bool shape_covers(std::size_t cls, double px, double py, double cx, double cy, double r) {
    const double dx = px - cx, dy = py - cy;
    const double ax = std::abs(dx), ay = std::abs(dy);
    const double rad = std::sqrt(dx * dx + dy * dy);
    switch (cls) {
    case 0: return rad <= r;
    case 1: return ax <= r * 0.85 && ay <= r * 0.85;
    case 2: return dy >= -r && dy <= r * 0.8 && ax <= (dy + r) * 0.55;
    case 3: return (ax <= 1.0 && ay <= r) || (ay <= 1.0 && ax <= r);
    case 4: return rad <= r && rad >= r - 1.6;
    case 5: return std::max(ax, ay) <= r * 0.9 && std::max(ax, ay) >= r * 0.9 - 1.5;
    case 6: return std::abs(ax - ay) <= 1.0 && ax <= r * 0.85;
    case 7: return ax + ay <= r;
    default: return false;
    }
}

/// 16x16 RGB shapes on a textured dark background; label = shape class.
inline Sample render_shape(std::size_t cls, Rng& rng) {
    Sample s;
    s.y = cls;
    s.x.assign(kImageSide * kImageSide * 3, 0.0);
    std::array<double, 3> bg{}, fg{};
    for (auto& c : bg) c = rng.uniform(0.05, 0.3);
    for (auto& c : fg) c = rng.uniform(0.55, 1.0);
    const double cx = 7.5 + rng.uniform(-2.0, 2.0);
    const double cy = 7.5 + rng.uniform(-2.0, 2.0);
    const double r = rng.uniform(4.0, 5.5);
    const double stripe = rng.uniform(0.0, 6.283185307179586);
    for (std::size_t py = 0; py < kImageSide; ++py)
        for (std::size_t px = 0; px < kImageSide; ++px) {
            const bool on = shape_covers(cls, static_cast<double>(px), static_cast<double>(py), cx, cy, r);
            const double texture = 0.05 * std::sin(0.9 * static_cast<double>(px + py) + stripe);
            for (std::size_t c = 0; c < 3; ++c) {
                double v = on ? fg[c] : bg[c] + texture;
                v += 0.03 * rng.normal();
                s.x[(py * kImageSide + px) * 3 + c] = std::clamp(v, 0.0, 1.0);
            }
        }
    return s;
}

inline Dataset shapes(std::size_t n, std::uint64_t seed, std::size_t classes = kShapeClasses) {
    require(classes >= 2 && classes <= kShapeClasses, "shapes: unsupported class count");
    Rng rng(seed);
    Dataset d;
    d.reserve(n);
    for (std::size_t i = 0; i < n; ++i) d.push_back(render_shape(i % classes, rng));
    rng.shuffle(d);
    return d;
}

/// Sparse first-order regular grammar over `vocab` symbols: every symbol has
/// a preferred successor, a secondary successor, and a uniform fallback.
struct Grammar {
    std::size_t vocab = 32;
    std::vector<std::size_t> primary;
    std::vector<std::size_t> secondary;
    double p_primary = 0.75;
    double p_secondary = 0.15;

    static Grammar make(std::size_t vocab, std::uint64_t seed, double p_primary = 0.75, double p_secondary = 0.15) {
        Grammar g;
        g.vocab = vocab;
        g.p_primary = p_primary;
        g.p_secondary = p_secondary;
        Rng rng(seed);
        g.primary.resize(vocab);
        g.secondary.resize(vocab);
        std::vector<std::size_t> perm(vocab);
        for (std::size_t i = 0; i < vocab; ++i) perm[i] = i;
        rng.shuffle(perm);
        for (std::size_t i = 0; i < vocab; ++i) {
            g.primary[perm[i]] = perm[(i + 1) % vocab];
            g.secondary[perm[i]] = perm[(i + 7) % vocab];
        }
        return g;
    }

    std::size_t next(std::size_t s, Rng& rng) const {
        const double u = rng.uniform();
        if (u < p_primary) return primary[s];
        if (u < p_primary + p_secondary) return secondary[s];
        return rng.index(vocab);
    }

    std::vector<std::size_t> sequence(std::size_t len, Rng& rng) const {
        std::vector<std::size_t> seq;
        seq.reserve(len);
        seq.push_back(rng.index(vocab));
        while (seq.size() < len) seq.push_back(next(seq.back(), rng));
        return seq;
    }
};

/// Next-token samples: a prefix of random length in [min_len, max_len] and the token that follows.
inline Dataset grammar_samples(const Grammar& g, std::size_t n, std::size_t min_len, std::size_t max_len,
                               std::uint64_t seed) {
    require(min_len >= 1 && min_len <= max_len, "grammar_samples: bad prefix length range");
    Rng rng(seed);
    Dataset d(n);
    for (auto& s : d) {
        const std::size_t len = min_len + rng.index(max_len - min_len + 1);
        auto seq = g.sequence(len + 1, rng);
        s.y = seq.back();
        seq.pop_back();
        s.tokens = std::move(seq);
    }
    return d;
}

/// Two feature domains occupying disjoint halves of the input, each labelled
/// by its own linear teacher. Used for the two-task merging zoo.
struct TwoTaskSpec {
    std::size_t dim = 16;
    std::size_t classes = 4;
    double off_domain_noise = 0.1;
};

inline Matrix random_teacher(std::size_t classes, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    Matrix w(classes, dim);
    for (double& v : w.data) v = rng.normal();
    return w;
}

/// domain 0 activates the first half of the features, domain 1 the second half;
/// domain 2 activates both (used for generic pretraining of the shared base).
inline Dataset domain_samples(const TwoTaskSpec& spec, std::size_t domain, const Matrix& teacher, std::size_t n,
                              std::uint64_t seed) {
    require(domain <= 2, "domain_samples: domain must be 0, 1 or 2");
    Rng rng(seed);
    const std::size_t half = spec.dim / 2;
    Dataset d(n);
    for (auto& s : d) {
        s.x.resize(spec.dim);
        for (std::size_t k = 0; k < spec.dim; ++k) {
            const bool active = domain == 2 || (domain == 0 ? k < half : k >= half);
            s.x[k] = active ? rng.normal() : spec.off_domain_noise * rng.normal();
        }
        const Vector logits = matvec(teacher, s.x);
        s.y = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    return d;
}

} // namespace data
} // namespace stab
