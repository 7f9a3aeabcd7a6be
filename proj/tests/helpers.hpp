#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "stab/stab.hpp"

namespace stab::testing {

/// Randomly initialized model whose parameters all carry generic noise
/// (biases and layer-norm gains included).
inline ZooModel random_model(Arch arch, std::uint64_t seed, std::size_t features = 6, std::size_t classes = 4) {
    TrainConfig cfg;
    cfg.context = 12;
    cfg.d_model = 8;
    cfg.layers = 1;
    cfg.vocab = 6;
    if (arch == Arch::vision_classifier) features = 4 * 4 * 3;
    ZooModel m = init_model(arch, features, classes, seed, cfg);
    Rng rng(derive_seed(seed, 99));
    for (auto& [_, t] : m.checkpoint.tensors)
        for (double& v : t.data) v += 0.3 * rng.normal();
    return m;
}

inline Sample random_sample(const ZooModel& m, std::uint64_t seed) {
    Rng rng(seed);
    Sample s;
    if (m.arch == Arch::tiny_transformer) {
        const std::size_t len = 2 + rng.index(5);
        for (std::size_t i = 0; i < len; ++i) s.tokens.push_back(rng.index(m.input.vocab));
    } else {
        s.x.resize(m.input.features);
        for (double& v : s.x) v = m.arch == Arch::vision_classifier ? rng.uniform() : rng.normal();
    }
    s.y = rng.index(m.class_count);
    return s;
}

inline std::vector<TargetKind> kinds_for(Arch a) {
    switch (a) {
    case Arch::vision_classifier: return {TargetKind::parameter, TargetKind::pixel, TargetKind::input_dim};
    case Arch::tiny_transformer: return {TargetKind::parameter, TargetKind::embedding_dim};
    default: return {TargetKind::parameter, TargetKind::input_dim};
    }
}

inline PerturbationTarget random_unit(const ZooModel& m, TargetKind kind, Rng& rng) {
    const std::size_t n = coordinate_space(m, kind);
    if (kind == TargetKind::pixel) return PerturbationTarget::pixel(rng.index(n / 3));
    return unit_target(kind, rng.index(n));
}

/// log P(y) after adding omega at the target.
inline double log_prob_at(const ZooModel& m, const Sample& s, const PerturbationTarget& t, std::size_t y,
                          std::span<const double> omega) {
    const auto [mp, sp] = apply_perturbation(m, s, t, omega);
    return std::log(forward_probs(mp, sp).probs[y]);
}

inline double rel_err(const Vector& a, const Vector& b) {
    double d = 0.0, n = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d = std::max(d, std::abs(a[i] - b[i]));
        n = std::max({n, std::abs(a[i]), std::abs(b[i])});
    }
    return n == 0.0 ? d : d / n;
}

/// Random p x K score matrix with a probability vector; columns are
/// re-centred so the Fisher score identity holds.
struct FiInstance {
    ScoreMatrix scores;
    ClassDistribution probs;
    std::size_t y_pred = 0;

    Vector grad() const {
        Vector g = scores.column(y_pred);
        for (double& v : g) v = -v;
        return g;
    }
};

inline FiInstance random_fi_instance(std::size_t p, std::size_t K, Rng& rng) {
    FiInstance in;
    Vector pr(K);
    for (double& v : pr) v = std::exp(rng.normal());
    double s = 0.0;
    for (double v : pr) s += v;
    for (double& v : pr) v /= s;
    in.probs.probs = pr;
    in.scores.m = Matrix(p, K);
    for (double& v : in.scores.m.data) v = rng.normal();
    for (std::size_t i = 0; i < p; ++i) {
        double mean = 0.0;
        for (std::size_t y = 0; y < K; ++y) mean += pr[y] * in.scores.m(i, y);
        for (std::size_t y = 0; y < K; ++y) in.scores.m(i, y) -= mean;
    }
    in.y_pred = rng.index(K);
    return in;
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and column eigenvectors.
inline std::pair<Vector, Matrix> jacobi_eigen(Matrix a) {
    const std::size_t n = a.rows;
    Matrix v = Matrix::identity(n);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off < 1e-30) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (a(p, q) == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - s * vkq;
                    v(k, q) = s * vkp + c * vkq;
                }
            }
    }
    Vector ev(n);
    for (std::size_t i = 0; i < n; ++i) ev[i] = a(i, i);
    return {ev, v};
}

/// Direct-summation metric G = sum_y P(y) s_y s_y^T.
inline Matrix metric_by_summation(const ScoreMatrix& s, const ClassDistribution& p) {
    Matrix g(s.p(), s.p());
    for (std::size_t y = 0; y < s.classes(); ++y)
        for (std::size_t i = 0; i < s.p(); ++i)
            for (std::size_t j = 0; j < s.p(); ++j) g(i, j) += p.probs[y] * s.m(i, y) * s.m(j, y);
    return g;
}

/// Pseudo-inverse applied to v through the eigen-decomposition; eigenvalues
/// below tol * max eigenvalue are treated as zero.
inline Vector pinv_apply(const Matrix& g, const Vector& v, double tol = 1e-10) {
    const auto [ev, vec] = jacobi_eigen(g);
    double mx = 0.0;
    for (double e : ev) mx = std::max(mx, std::abs(e));
    Vector out(v.size(), 0.0);
    for (std::size_t k = 0; k < ev.size(); ++k) {
        if (ev[k] <= tol * mx) continue;
        double c = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) c += vec(i, k) * v[i];
        for (std::size_t i = 0; i < v.size(); ++i) out[i] += vec(i, k) * c / ev[k];
    }
    return out;
}

inline double quad(const Matrix& g, const Vector& h) {
    double s = 0.0;
    for (std::size_t i = 0; i < h.size(); ++i)
        for (std::size_t j = 0; j < h.size(); ++j) s += h[i] * g(i, j) * h[j];
    return s;
}

/// Rayleigh check: max over random directions of (h.g)^2 / h^T G h, and the
/// quotient at h* = G^+ g.
struct RayleighResult {
    double sampled_max = 0.0;
    double at_optimum = 0.0;
};

inline RayleighResult rayleigh(const ScoreMatrix& scores, const ClassDistribution& probs, const Vector& grad,
                               std::size_t directions, Rng& rng) {
    RayleighResult r;
    // Denominator as sum_y P(y) (s_y.h)^2: same value as h^T G h without cancellation near null(G).
    auto metric_quad = [&](const Vector& h) {
        double den = 0.0;
        for (std::size_t y = 0; y < probs.size(); ++y) {
            const double d = dot(scores.column(y), h);
            den += probs.probs[y] * d * d;
        }
        return den;
    };
    for (std::size_t n = 0; n < directions; ++n) {
        Vector h(grad.size());
        for (double& v : h) v = rng.normal();
        const double den = metric_quad(h);
        if (den <= 1e-12) continue;
        const double num = dot(h, grad);
        r.sampled_max = std::max(r.sampled_max, num * num / den);
    }
    const Vector hs = pinv_apply(metric_by_summation(scores, probs), grad);
    const double den = metric_quad(hs);
    const double num = dot(hs, grad);
    r.at_optimum = den > 0.0 ? num * num / den : 0.0;
    return r;
}

/// Random invertible p x p matrix with condition number at most `cond`.
inline Matrix random_conditioned(std::size_t p, double cond, Rng& rng) {
    auto orth = [&] {
        Matrix q(p, p);
        for (double& v : q.data) v = rng.normal();
        for (std::size_t j = 0; j < p; ++j) {
            for (std::size_t k = 0; k < j; ++k) {
                double d = 0.0;
                for (std::size_t i = 0; i < p; ++i) d += q(i, j) * q(i, k);
                for (std::size_t i = 0; i < p; ++i) q(i, j) -= d * q(i, k);
            }
            double n = 0.0;
            for (std::size_t i = 0; i < p; ++i) n += q(i, j) * q(i, j);
            n = std::sqrt(n);
            for (std::size_t i = 0; i < p; ++i) q(i, j) /= n;
        }
        return q;
    };
    const Matrix u = orth(), v = orth();
    Vector sig(p);
    for (double& s : sig) s = std::exp(rng.uniform(0.0, std::log(cond)));
    sig[0] = 1.0;
    if (p > 1) sig[1] = cond;
    Matrix out(p, p);
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < p; ++j)
            for (std::size_t k = 0; k < p; ++k) out(i, j) += u(i, k) * sig[k] * v(j, k);
    return out;
}

/// Transformer whose output ignores its input: all weights zero, head bias set.
inline ZooModel constant_transformer(const Vector& head_bias, std::size_t context = 16) {
    TrainConfig cfg;
    cfg.vocab = head_bias.size();
    cfg.context = context;
    cfg.d_model = 4;
    cfg.layers = 1;
    ZooModel m = init_model(Arch::tiny_transformer, 0, cfg.vocab, 1, cfg);
    for (auto& [_, t] : m.checkpoint.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
    m.checkpoint.at("head.b").data = head_bias;
    return m;
}

} // namespace stab::testing

namespace stab::testing {

/// Relative errors of the local ratio [f(th) - f(0)]^2 / S_C(th, 0)^2 against
/// the directional quadratic form (h.grad_f)^2 / h^T G h, for each t. The
/// geodesic length S_C is integrated along the straight path by the midpoint
/// rule, with the metric re-evaluated at every node.
inline std::vector<double> definition_limit_errors(const ZooModel& m, const Sample& s, const PerturbationTarget& t,
                                                   const Vector& h, const std::vector<double>& ts,
                                                   std::size_t steps = 1000) {
    ClassDistribution p0;
    const ScoreMatrix s0 = score_matrix(m, s, t, &p0);
    const std::size_t y = p0.argmax();
    Vector grad = s0.column(y);
    for (double& v : grad) v = -v;
    const double gd = dot(h, grad);
    const double target = gd * gd / quad(metric_by_summation(s0, p0), h);
    const double f0 = -std::log(p0.probs[y]);
    std::vector<double> errs;
    for (double tt : ts) {
        double length = 0.0;
        for (std::size_t k = 0; k < steps; ++k) {
            const double tau = (static_cast<double>(k) + 0.5) * tt / static_cast<double>(steps);
            Vector w = h;
            for (double& v : w) v *= tau;
            const auto [mp, sp] = apply_perturbation(m, s, t, w);
            ClassDistribution pk;
            const ScoreMatrix sk = score_matrix(mp, sp, t, &pk);
            length += std::sqrt(quad(metric_by_summation(sk, pk), h)) * tt / static_cast<double>(steps);
        }
        Vector w = h;
        for (double& v : w) v *= tt;
        const auto [mp, sp] = apply_perturbation(m, s, t, w);
        const double ft = -std::log(forward_probs(mp, sp).probs[y]);
        const double ratio = (ft - f0) * (ft - f0) / (length * length);
        errs.push_back(std::abs(ratio - target) / target);
    }
    return errs;
}

} // namespace stab::testing
