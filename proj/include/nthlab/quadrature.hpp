#pragma once

// Gauss-Hermite quadrature and Gaussian expectations. Rules are built once
// per node count (Golub-Welsch on the symmetric tridiagonal recurrence
// matrix) and cached process-wide behind a mutex.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>

#include "nthlab/errors.hpp"
#include "nthlab/linalg.hpp"

namespace nthlab {

struct QuadratureRule {
    std::vector<double> nodes;   // abscissae for weight exp(-x^2)
    std::vector<double> weights; // sum to sqrt(pi)
};

namespace detail {
inline const QuadratureRule& hermite_rule(std::size_t n) {
    static std::mutex mu;
    static std::map<std::size_t, std::unique_ptr<QuadratureRule>> cache;
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find(n);
    if (it != cache.end()) return *it->second;

    // Jacobi matrix of the Hermite recurrence: zero diagonal, off-diagonal
    // beta_k = sqrt(k/2). Eigenvalues are the nodes; weights come from the
    // squared first components of the eigenvectors.
    Matrix j(n, n);
    for (std::size_t k = 1; k < n; ++k) {
        const double b = std::sqrt(static_cast<double>(k) / 2.0);
        j(k - 1, k) = b;
        j(k, k - 1) = b;
    }
    EigenDecomposition eig = jacobi_eigen(j, 1e-14, 200);

    auto rule = std::make_unique<QuadratureRule>();
    rule->nodes.resize(n);
    rule->weights.resize(n);
    const double sqrt_pi = 1.7724538509055160272981674833411;
    for (std::size_t k = 0; k < n; ++k) {
        rule->nodes[k] = eig.values[k];
        const double v0 = eig.vectors(0, k);
        rule->weights[k] = sqrt_pi * v0 * v0;
    }
    const QuadratureRule& ref = *rule;
    cache.emplace(n, std::move(rule));
    return ref;
}
} // namespace detail

// E_{x ~ N(0, variance)}[f(x)]
template <typename F>
double gauss1d_expect(F&& f, double variance, std::size_t nodes = 200) {
    if (variance < 0.0) {
        if (variance < -1e-12)
            throw NumericError("gauss1d_expect: negative variance " + std::to_string(variance));
        variance = 0.0;
    }
    const QuadratureRule& rule = detail::hermite_rule(nodes);
    const double s = std::sqrt(2.0 * variance);
    const double inv_sqrt_pi = 0.56418958354775628694807945156077;
    double acc = 0.0;
    for (std::size_t k = 0; k < rule.nodes.size(); ++k)
        acc += rule.weights[k] * f(s * rule.nodes[k]);
    return acc * inv_sqrt_pi;
}

// E_{(u,v) ~ N(0, A)}[f(u) g(v)] for a 2x2 covariance A, by tensor
// Gauss-Hermite after Cholesky whitening. Correlations outside [-1,1] by
// more than 1e-12 are an error; within that they are clamped. At
// |rho| > 1 - 1e-10 the 2D rule degenerates badly, so the expectation is
// taken in the exact comonotone limit E[f(s_u x) g(+-s_v x)].
template <typename F, typename G>
double gauss2d_expect(double a11, double a12, double a22, F&& f, G&& g,
                      std::size_t nodes = 60) {
    const double scale = std::max({std::abs(a11), std::abs(a22), 1e-300});
    if (a11 < -1e-12 * scale || a22 < -1e-12 * scale)
        throw NumericError("gauss2d_expect: negative variance on the diagonal");
    const double s_u = std::sqrt(std::max(a11, 0.0));
    const double s_v = std::sqrt(std::max(a22, 0.0));

    double rho = 0.0;
    if (s_u > 0.0 && s_v > 0.0) {
        rho = a12 / (s_u * s_v);
        if (rho > 1.0 || rho < -1.0) {
            if (std::abs(rho) > 1.0 + 1e-12)
                throw NumericError("gauss2d_expect: |correlation| = " + std::to_string(std::abs(rho)) +
                                   " exceeds 1 beyond tolerance");
            rho = (rho > 0.0) ? 1.0 : -1.0;
        }
    }

    if (s_u == 0.0 || s_v == 0.0) {
        // One margin is a point mass at zero: factorizes exactly.
        if (s_u == 0.0 && s_v == 0.0) return f(0.0) * g(0.0);
        if (s_u == 0.0)
            return f(0.0) * gauss1d_expect(g, a22, std::max<std::size_t>(nodes, 60));
        return g(0.0) * gauss1d_expect(f, a11, std::max<std::size_t>(nodes, 60));
    }

    if (std::abs(rho) > 1.0 - 1e-10) {
        const double sign = (rho > 0.0) ? 1.0 : -1.0;
        auto h = [&](double x) { return f(s_u * x) * g(sign * s_v * x); };
        return gauss1d_expect(h, 1.0, std::max<std::size_t>(2 * nodes, 120));
    }

    const Cholesky2x2 l = cholesky_2x2(a11, a12, a22);
    const QuadratureRule& rule = detail::hermite_rule(nodes);
    const double inv_pi = 0.31830988618379067153776752674503;
    const double sqrt2 = 1.4142135623730950488016887242097;
    double acc = 0.0;
    for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
        const double z1 = sqrt2 * rule.nodes[i];
        const double fu = f(l.l11 * z1);
        double inner = 0.0;
        for (std::size_t k = 0; k < rule.nodes.size(); ++k) {
            const double z2 = sqrt2 * rule.nodes[k];
            inner += rule.weights[k] * g(l.l21 * z1 + l.l22 * z2);
        }
        acc += rule.weights[i] * fu * inner;
    }
    return acc * inv_pi;
}

} // namespace nthlab
