#pragma once

// Activation functions with first and second derivatives, plus the
// normalization constant c_sigma = 1 / E_{x~N(0,1)}[sigma(x)^2].

#include <cmath>
#include <string>

#include "nthlab/errors.hpp"
#include "nthlab/quadrature.hpp"

namespace nthlab {

enum class ActKind {
    Softplus,
    Sigmoid,
    Identity, // for tests
    Zero,     // test stub; degenerate for c_sigma on purpose
};

namespace detail {
inline double sigmoid_stable(double x) {
    // evaluate from the side that keeps exp() small
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}
} // namespace detail

struct Activation {
    ActKind kind = ActKind::Softplus;

    double value(double x) const {
        switch (kind) {
        case ActKind::Softplus:
            // softplus overflows in its naive form; x + log1p(e^-x) is exact
            // for positive x and log1p(e^x) for the rest
            return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
        case ActKind::Sigmoid:
            return detail::sigmoid_stable(x);
        case ActKind::Identity:
            return x;
        case ActKind::Zero:
            return 0.0;
        }
        return 0.0;
    }

    double d1(double x) const {
        switch (kind) {
        case ActKind::Softplus:
            return detail::sigmoid_stable(x);
        case ActKind::Sigmoid: {
            const double s = detail::sigmoid_stable(x);
            return s * (1.0 - s);
        }
        case ActKind::Identity:
            return 1.0;
        case ActKind::Zero:
            return 0.0;
        }
        return 0.0;
    }

    double d2(double x) const {
        switch (kind) {
        case ActKind::Softplus: {
            const double s = detail::sigmoid_stable(x);
            return s * (1.0 - s);
        }
        case ActKind::Sigmoid: {
            const double s = detail::sigmoid_stable(x);
            return s * (1.0 - s) * (1.0 - 2.0 * s);
        }
        case ActKind::Identity:
        case ActKind::Zero:
            return 0.0;
        }
        return 0.0;
    }

    const char* name() const {
        switch (kind) {
        case ActKind::Softplus: return "softplus";
        case ActKind::Sigmoid: return "sigmoid";
        case ActKind::Identity: return "identity";
        case ActKind::Zero: return "zero";
        }
        return "?";
    }
};

inline Activation activation_softplus() { return {ActKind::Softplus}; }
inline Activation activation_sigmoid() { return {ActKind::Sigmoid}; }
inline Activation activation_identity() { return {ActKind::Identity}; }
inline Activation activation_zero() { return {ActKind::Zero}; }

inline Activation activation_from_name(const std::string& name) {
    if (name == "softplus") return activation_softplus();
    if (name == "sigmoid") return activation_sigmoid();
    if (name == "identity") return activation_identity();
    if (name == "zero") return activation_zero();
    throw ConfigError("unknown activation '" + name + "'");
}

// c_sigma = (E_{x~N(0,1)} sigma(x)^2)^-1, by 200-node Gauss-Hermite. The
// result is cross-checked against a 400-node rule; disagreement beyond 1e-10
// relative means the activation is unsuitable for quadrature and is an error.
inline double compute_c_sigma(const Activation& act) {
    auto sq = [&](double x) { const double s = act.value(x); return s * s; };
    const double m2 = gauss1d_expect(sq, 1.0, 200);
    const double m2_check = gauss1d_expect(sq, 1.0, 400);
    if (m2 <= 1e-300)
        throw NumericError(std::string("compute_c_sigma: E[sigma^2] is degenerate for ") +
                           act.name());
    if (std::abs(m2 - m2_check) > 1e-10 * std::abs(m2_check))
        throw NumericError("compute_c_sigma: quadrature not converged, 200 vs 400 nodes differ by " +
                           std::to_string(std::abs(m2 - m2_check) / std::abs(m2_check)));
    return 1.0 / m2;
}

} // namespace nthlab
