#pragma once

// Dense 64-bit float vectors/matrices and the norm/eigenvalue toolkit the
// rest of the library is built on. Row-major storage, value semantics, no
// views into foreign memory. Everything here is pure: safe to share across
// threads once constructed.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "nthlab/errors.hpp"
#include "nthlab/rng.hpp"

namespace nthlab {

struct Vector {
    std::vector<double> data;

    Vector() = default;
    explicit Vector(std::size_t n, double fill = 0.0) : data(n, fill) {}
    Vector(std::initializer_list<double> init) : data(init) {}

    std::size_t size() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
};

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data; // row-major, data.size() == rows*cols

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }
};

inline std::string shape_str(const Matrix& a) {
    return std::to_string(a.rows) + "x" + std::to_string(a.cols);
}

inline bool all_finite(const Vector& v) {
    for (double x : v.data)
        if (!std::isfinite(x)) return false;
    return true;
}

inline bool all_finite(const Matrix& a) {
    for (double x : a.data)
        if (!std::isfinite(x)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Elementary operations
// ---------------------------------------------------------------------------

inline double dot(const Vector& a, const Vector& b) {
    if (a.size() != b.size())
        throw DimensionError("dot: length mismatch " + std::to_string(a.size()) +
                             " vs " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// y += alpha * x
inline void axpy(double alpha, const Vector& x, Vector& y) {
    if (x.size() != y.size())
        throw DimensionError("axpy: length mismatch " + std::to_string(x.size()) +
                             " vs " + std::to_string(y.size()));
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline void scale(Vector& v, double alpha) {
    for (double& x : v.data) x *= alpha;
}

inline double norm2(const Vector& v) { return std::sqrt(dot(v, v)); }

inline double vector_inf_norm(const Vector& v) {
    double m = 0.0;
    for (double x : v.data) m = std::max(m, std::abs(x));
    return m;
}

inline Vector matvec(const Matrix& a, const Vector& v) {
    if (a.cols != v.size())
        throw DimensionError("matvec: A is " + shape_str(a) + ", v has length " +
                             std::to_string(v.size()));
    Vector out(a.rows);
    const double* row = a.data.data();
    for (std::size_t i = 0; i < a.rows; ++i, row += a.cols) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) s += row[j] * v[j];
        out[i] = s;
    }
    return out;
}

// out = A^T v, computed by row-major accumulation so it stays cache-friendly.
inline Vector matvec_transpose(const Matrix& a, const Vector& v) {
    if (a.rows != v.size())
        throw DimensionError("matvec_transpose: A is " + shape_str(a) +
                             ", v has length " + std::to_string(v.size()));
    Vector out(a.cols);
    const double* row = a.data.data();
    for (std::size_t i = 0; i < a.rows; ++i, row += a.cols) {
        const double alpha = v[i];
        if (alpha == 0.0) continue;
        for (std::size_t j = 0; j < a.cols; ++j) out[j] += row[j] * alpha;
    }
    return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw DimensionError("matmul: " + shape_str(a) + " * " + shape_str(b));
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            const double* brow = &b.data[k * b.cols];
            double* orow = &out.data[i * out.cols];
            for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& a) {
    Matrix out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) out(j, i) = a(i, j);
    return out;
}

// rank-1 update: A += alpha * u v^T
inline void add_outer(Matrix& a, double alpha, const Vector& u, const Vector& v) {
    if (a.rows != u.size() || a.cols != v.size())
        throw DimensionError("add_outer: A is " + shape_str(a) + ", u,v have lengths " +
                             std::to_string(u.size()) + "," + std::to_string(v.size()));
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double c = alpha * u[i];
        if (c == 0.0) continue;
        double* row = &a.data[i * a.cols];
        for (std::size_t j = 0; j < a.cols; ++j) row[j] += c * v[j];
    }
}

inline double frobenius_norm(const Matrix& a) {
    double s = 0.0;
    for (double x : a.data) s += x * x;
    return std::sqrt(s);
}

inline double matrix_inf_entry_norm(const Matrix& a) {
    double m = 0.0;
    for (double x : a.data) m = std::max(m, std::abs(x));
    return m;
}

// max over rows of the row's Euclidean norm; equals sup_{||x||_2=1} ||Ax||_inf.
inline double two_to_infinity_norm(const Matrix& a) {
    double best = 0.0;
    const double* row = a.data.data();
    for (std::size_t i = 0; i < a.rows; ++i, row += a.cols) {
        double s = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) s += row[j] * row[j];
        best = std::max(best, s);
    }
    return std::sqrt(best);
}

// ---------------------------------------------------------------------------
// Spectral norm by power iteration on A^T A
// ---------------------------------------------------------------------------
//
// Deterministic: starts from the normalized all-ones vector. `tol` is the
// relative change of the singular-value estimate between sweeps; convergence
// requires the change to stay below tol on two consecutive sweeps (a single
// small step can be a plateau, not a limit). If the iteration has not
// converged after max_iter sweeps it restarts once from a deterministically
// perturbed vector; failing that, it throws carrying the last estimate.

inline double spectral_norm(const Matrix& a, double tol = 1e-10,
                            std::size_t max_iter = 2000) {
    if (tol <= 0.0) throw NumericError("spectral_norm: tol must be positive");
    if (a.rows == 0 || a.cols == 0) return 0.0;

    auto run = [&](Vector v) -> std::pair<bool, double> {
        double nv = norm2(v);
        if (nv == 0.0) return {true, 0.0};
        scale(v, 1.0 / nv);
        double sigma = 0.0;
        int calm = 0;
        for (std::size_t it = 0; it < max_iter; ++it) {
            Vector av = matvec(a, v);
            const double s = norm2(av); // Rayleigh estimate of sigma_max
            if (s == 0.0) return {true, 0.0};
            Vector w = matvec_transpose(a, av);
            const double nw = norm2(w);
            if (nw == 0.0) return {true, s};
            scale(w, 1.0 / nw);
            v = std::move(w);
            const double change = std::abs(s - sigma) / std::max(s, 1e-300);
            sigma = s;
            calm = (change <= tol) ? calm + 1 : 0;
            if (calm >= 2) return {true, sigma};
        }
        return {false, sigma};
    };

    Vector ones(a.cols, 1.0);
    auto [ok, sigma] = run(ones);
    if (ok) return sigma;

    // Retry once from a perturbed start; breaks the rare symmetric stall.
    Vector tilted(a.cols);
    for (std::size_t j = 0; j < a.cols; ++j)
        tilted[j] = 1.0 + ((j % 2 == 0) ? 1e-3 : -1e-3) * static_cast<double>(j % 7 + 1);
    auto [ok2, sigma2] = run(tilted);
    if (ok2) return sigma2;
    throw ConvergenceError("spectral_norm: power iteration did not reach tol=" +
                               std::to_string(tol) + " in " + std::to_string(max_iter) +
                               " iterations (last estimate " + std::to_string(sigma2) + ")",
                           sigma2, std::abs(sigma2 - sigma));
}

// ---------------------------------------------------------------------------
// Symmetric eigenproblem: cyclic Jacobi
// ---------------------------------------------------------------------------

struct EigenDecomposition {
    Vector values;   // ascending
    Matrix vectors;  // columns are eigenvectors, same order
};

inline double max_asymmetry(const Matrix& a) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = i + 1; j < a.cols; ++j)
            worst = std::max(worst, std::abs(a(i, j) - a(j, i)));
    return worst;
}

inline void check_symmetric(const Matrix& a, double rel_tol = 1e-12) {
    if (a.rows != a.cols)
        throw DimensionError("eig: matrix not square, " + shape_str(a));
    double scale = 0.0;
    for (double x : a.data) scale = std::max(scale, std::abs(x));
    const double asym = max_asymmetry(a);
    if (asym > rel_tol * std::max(scale, 1.0))
        throw NumericError("eig: input asymmetric, max |A_ij - A_ji| = " +
                           std::to_string(asym));
}

// Cyclic Jacobi rotations until the off-diagonal Frobenius mass drops to
// tol * ||A||_F. Exact (zero sweeps) for diagonal input. n stays small
// (Gram matrices, quadrature tridiagonals), so O(n^3) per sweep is fine.
inline EigenDecomposition jacobi_eigen(Matrix a, double tol = 1e-12,
                                       std::size_t max_sweeps = 100) {
    check_symmetric(a);
    const std::size_t n = a.rows;
    Matrix v = Matrix::identity(n);
    const double anorm = std::max(frobenius_norm(a), 1e-300);

    auto off_mass = [&]() {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) s += 2.0 * a(i, j) * a(i, j);
        return std::sqrt(s);
    };

    std::size_t sweep = 0;
    while (off_mass() > tol * anorm) {
        if (++sweep > max_sweeps)
            throw ConvergenceError("jacobi_eigen: off-diagonal mass " +
                                       std::to_string(off_mass()) + " after " +
                                       std::to_string(max_sweeps) + " sweeps",
                                   off_mass(), tol * anorm);
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (apq == 0.0) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
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
    }

    // sort ascending, carrying eigenvector columns along
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    for (std::size_t i = 0; i + 1 < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (a(order[j], order[j]) < a(order[i], order[i])) std::swap(order[i], order[j]);

    EigenDecomposition out;
    out.values = Vector(n);
    out.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = a(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
    }
    return out;
}

inline double sym_eig_min(const Matrix& a, double tol = 1e-12) {
    return jacobi_eigen(a, tol).values[0];
}

// ---------------------------------------------------------------------------
// 2x2 Cholesky for bivariate Gaussian whitening
// ---------------------------------------------------------------------------

struct Cholesky2x2 {
    double l11, l21, l22;
};

// Errors on inputs that are non-PSD beyond a -1e-12 tolerance; tiny negative
// pivots from floating-point roundoff are clamped to zero.
inline Cholesky2x2 cholesky_2x2(double a11, double a12, double a22) {
    const double scale = std::max({std::abs(a11), std::abs(a22), 1.0});
    if (a11 < -1e-12 * scale || a22 < -1e-12 * scale)
        throw NumericError("cholesky_2x2: negative diagonal, a11=" + std::to_string(a11) +
                           " a22=" + std::to_string(a22));
    const double p11 = std::max(a11, 0.0);
    Cholesky2x2 l{};
    l.l11 = std::sqrt(p11);
    l.l21 = (l.l11 > 0.0) ? a12 / l.l11 : 0.0;
    double rem = a22 - l.l21 * l.l21;
    if (rem < -1e-12 * scale)
        throw NumericError("cholesky_2x2: not PSD, Schur complement " + std::to_string(rem));
    l.l22 = std::sqrt(std::max(rem, 0.0));
    return l;
}

// ---------------------------------------------------------------------------
// Gaussian sampling (Xavier-style N(0,1) entries)
// ---------------------------------------------------------------------------

inline Vector gaussian_vector(std::size_t len, Rng& rng) {
    Vector v(len);
    for (std::size_t i = 0; i < len; ++i) v[i] = rng.normal();
    return v;
}

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng) {
    Matrix m(rows, cols);
    for (double& x : m.data) x = rng.normal();
    return m;
}

} // namespace nthlab
