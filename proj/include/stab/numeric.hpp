#pragma once

// Dense linear algebra for the small matrices that show up in metric
// computations (p x K with p rarely above a handful), plus a central
// difference gradient used as an oracle throughout the test suites.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "stab/error.hpp"

namespace stab {

using Vector = std::vector<double>;

/// Row-major dense matrix of doubles.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
        require(data.size() == rows * cols, "matrix data length does not match shape");
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix diagonal(std::span<const double> d) {
        Matrix m(d.size(), d.size());
        for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
        return m;
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    Vector column(std::size_t c) const {
        Vector out(rows);
        for (std::size_t r = 0; r < rows; ++r) out[r] = (*this)(r, c);
        return out;
    }

    bool empty() const { return data.empty(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

inline bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    require(a.size() == b.size(), "dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline double frobenius(const Matrix& m) { return norm2(m.data); }

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (std::size_t r = 0; r < m.rows; ++r)
        for (std::size_t c = 0; c < m.cols; ++c) t(c, r) = m(r, c);
    return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    require(a.cols == b.rows, "matmul: inner dimensions differ");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        double* orow = out.data.data() + i * out.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

inline Vector matvec(const Matrix& a, std::span<const double> x) {
    require(a.cols == x.size(), "matvec: dimension mismatch");
    Vector out(a.rows, 0.0);
    for (std::size_t i = 0; i < a.rows; ++i) out[i] = dot(a.row(i), x);
    return out;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
    require(a.same_shape(b), "matrix subtraction: shape mismatch");
    Matrix out = a;
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= b.data[i];
    return out;
}

inline bool is_symmetric(const Matrix& g, double tol = 1e-10) {
    if (g.rows != g.cols) return false;
    double scale = 1.0;
    for (double x : g.data) scale = std::max(scale, std::abs(x));
    for (std::size_t i = 0; i < g.rows; ++i)
        for (std::size_t j = i + 1; j < g.cols; ++j)
            if (std::abs(g(i, j) - g(j, i)) > tol * scale) return false;
    return true;
}

/// Thin factorization m = left * diag(singular) * right, keeping only the
/// numerically nonzero part of the spectrum.
struct CompactSVD {
    Matrix left;            // rows x rank, orthonormal columns
    Vector singular;        // descending, all above the rank tolerance
    Matrix right;           // rank x cols, orthonormal rows
    std::size_t rank = 0;

    Matrix reconstruct(std::size_t rows, std::size_t cols) const {
        Matrix out(rows, cols);
        for (std::size_t k = 0; k < rank; ++k)
            for (std::size_t i = 0; i < rows; ++i) {
                const double li = left(i, k) * singular[k];
                for (std::size_t j = 0; j < cols; ++j) out(i, j) += li * right(k, j);
            }
        return out;
    }
};

namespace detail {

// One-sided (Hestenes) Jacobi on a tall matrix. On return `a` holds U*Sigma
// column-wise and `v` the accumulated right rotations.
inline void hestenes_jacobi(Matrix& a, Matrix& v) {
    const std::size_t m = a.rows;
    const std::size_t n = a.cols;
    constexpr double eps = 1e-15;
    constexpr int max_sweeps = 80;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t i = 0; i + 1 < n; ++i) {
            for (std::size_t j = i + 1; j < n; ++j) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t k = 0; k < m; ++k) {
                    const double x = a(k, i), y = a(k, j);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if (gamma == 0.0 || std::abs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < m; ++k) {
                    const double x = a(k, i), y = a(k, j);
                    a(k, i) = c * x - s * y;
                    a(k, j) = s * x + c * y;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double x = v(k, i), y = v(k, j);
                    v(k, i) = c * x - s * y;
                    v(k, j) = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }
}

} // namespace detail

/// Compact SVD by one-sided Jacobi. Rank cutoff is max(rows, cols) * sigma_max * 1e-12.
inline CompactSVD compact_svd(const Matrix& m) {
    require(all_finite(m.data), "compact_svd: matrix has non-finite entries");
    const bool wide = m.rows < m.cols;
    Matrix a = wide ? transpose(m) : m;
    Matrix v = Matrix::identity(a.cols);
    detail::hestenes_jacobi(a, v);

    const std::size_t n = a.cols;
    Vector sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < a.rows; ++k) s += a(k, j) * a(k, j);
        sigma[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    const double smax = n == 0 ? 0.0 : sigma[order.front()];
    const double tol = static_cast<double>(std::max(m.rows, m.cols)) * smax * 1e-12;
    std::size_t rank = 0;
    while (rank < n && sigma[order[rank]] > tol && sigma[order[rank]] > 0.0) ++rank;

    // For the tall factorization: a = U*Sigma (a.rows x n), v is n x n.
    Matrix u(a.rows, rank);
    Matrix vt(rank, n);
    Vector s(rank);
    for (std::size_t r = 0; r < rank; ++r) {
        const std::size_t j = order[r];
        s[r] = sigma[j];
        for (std::size_t k = 0; k < a.rows; ++k) u(k, r) = a(k, j) / sigma[j];
        for (std::size_t k = 0; k < n; ++k) vt(r, k) = v(k, j);
    }

    CompactSVD out;
    out.rank = rank;
    out.singular = std::move(s);
    if (!wide) {
        out.left = std::move(u);
        out.right = std::move(vt);
    } else {
        // m^T = u * S * vt  =>  m = vt^T * S * u^T
        out.left = transpose(vt);
        out.right = transpose(u);
    }
    return out;
}

/// v^T g^+ v for a symmetric PSD g. Components of v outside range(g) above
/// 1e-8 relative norm raise OutOfRange; smaller ones are projected away.
inline double psd_quadform_pinv(const Matrix& g, std::span<const double> v) {
    require(g.rows == g.cols && g.rows == v.size(), "psd_quadform_pinv: dimension mismatch");
    require(all_finite(v), "psd_quadform_pinv: vector has non-finite entries");
    require(is_symmetric(g), "psd_quadform_pinv: metric is not symmetric");
    const CompactSVD svd = compact_svd(g);
    const double vnorm = norm2(v);
    if (vnorm == 0.0) return 0.0;

    Vector residual(v.begin(), v.end());
    double quad = 0.0;
    for (std::size_t k = 0; k < svd.rank; ++k) {
        double c = 0.0;
        for (std::size_t i = 0; i < v.size(); ++i) c += svd.left(i, k) * v[i];
        quad += c * c / svd.singular[k];
        for (std::size_t i = 0; i < v.size(); ++i) residual[i] -= c * svd.left(i, k);
    }
    if (norm2(residual) > 1e-8 * vnorm)
        throw OutOfRange("vector has a component outside the range of the metric");
    return quad;
}

/// Solves g x = b for symmetric positive definite g; nullopt when a pivot is not positive.
inline std::optional<Vector> cholesky_solve(const Matrix& g, std::span<const double> b) {
    require(g.rows == g.cols && g.rows == b.size(), "cholesky_solve: dimension mismatch");
    const std::size_t n = g.rows;
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = g(j, j);
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > 0.0)) return std::nullopt;
        l(j, j) = std::sqrt(d);
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = g(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / l(j, j);
        }
    }
    Vector y(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = b[i];
        for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
        y[i] = s / l(i, i);
    }
    Vector x(n);
    for (std::size_t ii = n; ii-- > 0;) {
        double s = y[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
        x[ii] = s / l(ii, ii);
    }
    return x;
}

/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h.
template <class F>
Vector finite_diff_gradient(F&& f, std::span<const double> x0, double h = 1e-5) {
    require(h > 0.0, "finite_diff_gradient: step must be positive");
    Vector x(x0.begin(), x0.end());
    Vector grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = x[i];
        x[i] = orig + h;
        const double fp = f(std::span<const double>(x));
        x[i] = orig - h;
        const double fm = f(std::span<const double>(x));
        x[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw InvalidInput("finite_diff_gradient: non-finite function value");
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

} // namespace stab
