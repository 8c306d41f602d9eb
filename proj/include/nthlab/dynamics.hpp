#pragma once

// Gradient-flow machinery: skip-connection matrices E^[l], analytic
// gradients of f and of the empirical risk, explicit euler/rk4 integration
// of theta' = -grad R_S, and the xi/omega spectral diagnostics.
//
// E^[l] = I + (c_res/L) diag(sigma'_[l]) W^[l] / sqrt(m) is only ever
// applied to vectors; products E^[from:to] are accumulated matrix-vector
// style, O(L m^2), never materialized.

#include <cmath>
#include <vector>

#include "nthlab/errors.hpp"
#include "nthlab/linalg.hpp"
#include "nthlab/model.hpp"

namespace nthlab {

// ---------------------------------------------------------------------------
// Skip-connection operators
// ---------------------------------------------------------------------------

// E^[l] v
inline Vector apply_skip(const NetworkConfig& cfg, const Params& params,
                         const ForwardCache& cache, std::size_t l, const Vector& v) {
    if (l < 2 || l > cfg.L)
        throw DimensionError("apply_skip: layer " + std::to_string(l) + " out of [2," +
                             std::to_string(cfg.L) + "]");
    const double c = cfg.c_res / (static_cast<double>(cfg.L) * std::sqrt(static_cast<double>(cfg.m)));
    Vector wv = matvec(params.weight(l), v);
    Vector out = v;
    for (std::size_t i = 0; i < cfg.m; ++i) out[i] += c * cache.sprime[l][i] * wv[i];
    return out;
}

// (E^[l])^T v
inline Vector apply_skip_transpose(const NetworkConfig& cfg, const Params& params,
                                   const ForwardCache& cache, std::size_t l, const Vector& v) {
    if (l < 2 || l > cfg.L)
        throw DimensionError("apply_skip_transpose: layer " + std::to_string(l) + " out of [2," +
                             std::to_string(cfg.L) + "]");
    const double c = cfg.c_res / (static_cast<double>(cfg.L) * std::sqrt(static_cast<double>(cfg.m)));
    Vector sv(cfg.m);
    for (std::size_t i = 0; i < cfg.m; ++i) sv[i] = cache.sprime[l][i] * v[i];
    Vector wtv = matvec_transpose(params.weight(l), sv);
    Vector out = v;
    for (std::size_t i = 0; i < cfg.m; ++i) out[i] += c * wtv[i];
    return out;
}

// E^[from:to] v = E^[to] ... E^[from] v; the empty range (from > to) is the
// identity.
inline Vector apply_skip_range(const NetworkConfig& cfg, const Params& params,
                               const ForwardCache& cache, std::size_t from, std::size_t to,
                               Vector v) {
    for (std::size_t l = from; l <= to && from <= to; ++l)
        v = apply_skip(cfg, params, cache, l, v);
    return v;
}

// (E^[from:to])^T v = (E^[from])^T ... (E^[to])^T v
inline Vector apply_skip_range_transpose(const NetworkConfig& cfg, const Params& params,
                                         const ForwardCache& cache, std::size_t from,
                                         std::size_t to, Vector v) {
    if (from > to) return v;
    for (std::size_t l = to + 1; l-- > from;)
        v = apply_skip_transpose(cfg, params, cache, l, v);
    return v;
}

// Dense E^[l] for tests and small m. The diagonal scaling is row scaling of
// W; no diagonal matrix is formed.
inline Matrix skip_matrix(const NetworkConfig& cfg, const Params& params,
                          const ForwardCache& cache, std::size_t l) {
    if (l < 2 || l > cfg.L)
        throw DimensionError("skip_matrix: layer " + std::to_string(l) + " out of [2," +
                             std::to_string(cfg.L) + "]");
    const double c = cfg.c_res / (static_cast<double>(cfg.L) * std::sqrt(static_cast<double>(cfg.m)));
    const Matrix& w = params.weight(l);
    Matrix e = Matrix::identity(cfg.m);
    for (std::size_t i = 0; i < cfg.m; ++i) {
        const double rowscale = c * cache.sprime[l][i];
        for (std::size_t j = 0; j < cfg.m; ++j) e(i, j) += rowscale * w(i, j);
    }
    return e;
}

// Backward vectors w^(l) = (E^[(l+1):L])^T a for l = 1..L, built by one
// descending sweep: w^(L) = a, w^(l) = (E^[l+1])^T w^(l+1).
inline std::vector<Vector> backward_vectors(const NetworkConfig& cfg, const Params& params,
                                            const ForwardCache& cache) {
    std::vector<Vector> w(cfg.L + 1);
    w[cfg.L] = params.a;
    for (std::size_t l = cfg.L; l-- > 1;)
        w[l] = apply_skip_transpose(cfg, params, cache, l + 1, w[l + 1]);
    return w;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

struct GradTheta {
    Matrix gW1;
    std::vector<Matrix> gW; // layers 2..L
    Vector ga;

    static GradTheta zeros(const NetworkConfig& cfg) {
        GradTheta g;
        g.gW1 = Matrix(cfg.m, cfg.d);
        g.gW.assign(cfg.L - 1, Matrix(cfg.m, cfg.m));
        g.ga = Vector(cfg.m);
        return g;
    }
};

// Per-sample gradient of f(x, theta) w.r.t. every block. Each W-block is the
// rank-1 outer product of a backward column vector with (x^[l-1])^T:
//   d_a f      = x^[L]
//   d_W^[l] f  = (c_res/(L sqrt m)) (sigma'_[l] . w^(l)) (x^[l-1])^T
//   d_W^[1] f  = sqrt(c_sigma/m)   (sigma'_[1] . w^(1)) x^T
inline GradTheta grad_theta_f(const NetworkConfig& cfg, const Params& params,
                              const ForwardCache& cache) {
    GradTheta g = GradTheta::zeros(cfg);
    const std::vector<Vector> w = backward_vectors(cfg, params, cache);
    g.ga = cache.x[cfg.L];

    const double sres = cfg.c_res / (static_cast<double>(cfg.L) * std::sqrt(static_cast<double>(cfg.m)));
    Vector u(cfg.m);
    for (std::size_t l = 2; l <= cfg.L; ++l) {
        for (std::size_t i = 0; i < cfg.m; ++i) u[i] = sres * cache.sprime[l][i] * w[l][i];
        add_outer(g.gW[l - 2], 1.0, u, cache.x[l - 1]);
    }
    const double s1 = std::sqrt(cfg.c_sigma / static_cast<double>(cfg.m));
    for (std::size_t i = 0; i < cfg.m; ++i) u[i] = s1 * cache.sprime[1][i] * w[1][i];
    add_outer(g.gW1, 1.0, u, cache.x[0]);
    return g;
}

struct LossGradient {
    GradTheta grad;
    std::vector<double> residuals; // f_beta - y_beta
    double loss = 0.0;             // R_S = (1/2n) sum residual^2
};

// grad R_S = (1/n) sum_beta (f_beta - y_beta) grad_theta f_beta, accumulated
// in sample index order so the result is independent of any outer threading.
inline LossGradient grad_loss(const NetworkConfig& cfg, const Params& params,
                              const Dataset& ds) {
    const std::size_t n = ds.size();
    if (n == 0) throw ConfigError("grad_loss: empty dataset");
    LossGradient out;
    out.grad = GradTheta::zeros(cfg);
    out.residuals.resize(n);

    const double sres = cfg.c_res / (static_cast<double>(cfg.L) * std::sqrt(static_cast<double>(cfg.m)));
    const double s1 = std::sqrt(cfg.c_sigma / static_cast<double>(cfg.m));
    Vector u(cfg.m);
    for (std::size_t b = 0; b < n; ++b) {
        ForwardCache cache = forward(cfg, params, ds.inputs[b]);
        const double r = network_output(cache, params) - ds.labels[b];
        out.residuals[b] = r;
        out.loss += r * r;
        const double coef = r / static_cast<double>(n);
        if (coef == 0.0) continue;
        const std::vector<Vector> w = backward_vectors(cfg, params, cache);
        axpy(coef, cache.x[cfg.L], out.grad.ga);
        for (std::size_t l = 2; l <= cfg.L; ++l) {
            for (std::size_t i = 0; i < cfg.m; ++i)
                u[i] = sres * cache.sprime[l][i] * w[l][i];
            add_outer(out.grad.gW[l - 2], coef, u, cache.x[l - 1]);
        }
        for (std::size_t i = 0; i < cfg.m; ++i) u[i] = s1 * cache.sprime[1][i] * w[1][i];
        add_outer(out.grad.gW1, coef, u, cache.x[0]);
    }
    out.loss /= 2.0 * static_cast<double>(n);
    return out;
}

inline double loss_value(const NetworkConfig& cfg, const Params& params, const Dataset& ds) {
    double s = 0.0;
    for (std::size_t b = 0; b < ds.size(); ++b) {
        const double r = network_output(cfg, params, ds.inputs[b]) - ds.labels[b];
        s += r * r;
    }
    return s / (2.0 * static_cast<double>(ds.size()));
}

// ---------------------------------------------------------------------------
// Flow integration
// ---------------------------------------------------------------------------

enum class Scheme { Euler, Rk4 };

struct FlowState {
    double t = 0.0;
    Params params;
    double step = 1e-3;
    Scheme scheme = Scheme::Rk4;
};

namespace detail {
inline void axpy_params(double alpha, const GradTheta& g, Params& p) {
    for (std::size_t k = 0; k < p.W1.data.size(); ++k) p.W1.data[k] += alpha * g.gW1.data[k];
    for (std::size_t l = 0; l < p.W.size(); ++l)
        for (std::size_t k = 0; k < p.W[l].data.size(); ++k)
            p.W[l].data[k] += alpha * g.gW[l].data[k];
    for (std::size_t k = 0; k < p.a.size(); ++k) p.a[k] += alpha * g.ga[k];
}
} // namespace detail

// One explicit step of theta' = -grad R_S with signed step h (negative h
// integrates backwards in time; used by finite-difference probes of kernel
// drift).
inline Params integrate_step(const NetworkConfig& cfg, const Params& params, const Dataset& ds,
                             double h, Scheme scheme) {
    if (scheme == Scheme::Euler) {
        LossGradient lg = grad_loss(cfg, params, ds);
        Params next = params;
        detail::axpy_params(-h, lg.grad, next);
        return next;
    }
    // classical rk4 on theta' = -grad R_S, folding each stage into the
    // accumulator as soon as it is produced so only one stage gradient is
    // alive at a time (the stage matrices are as large as the parameters)
    Params acc = params;
    Params tmp = params;
    {
        GradTheta k1 = grad_loss(cfg, params, ds).grad;
        detail::axpy_params(-h / 6.0, k1, acc);
        detail::axpy_params(-h / 2.0, k1, tmp);
    }
    {
        GradTheta k2 = grad_loss(cfg, tmp, ds).grad;
        detail::axpy_params(-h / 3.0, k2, acc);
        tmp = params;
        detail::axpy_params(-h / 2.0, k2, tmp);
    }
    {
        GradTheta k3 = grad_loss(cfg, tmp, ds).grad;
        detail::axpy_params(-h / 3.0, k3, acc);
        tmp = params;
        detail::axpy_params(-h, k3, tmp);
    }
    {
        GradTheta k4 = grad_loss(cfg, tmp, ds).grad;
        detail::axpy_params(-h / 6.0, k4, acc);
    }
    return acc;
}

struct FlowStepResult {
    FlowState state;
    double loss_before = 0.0;
    double loss_after = 0.0;
    bool loss_increased = false; // warning flag, not fatal
};

inline FlowStepResult flow_step(const FlowState& state, const NetworkConfig& cfg,
                                const Dataset& ds) {
    if (!(state.step > 0.0)) throw ConfigError("flow_step: step must be positive");
    FlowStepResult out;
    out.loss_before = loss_value(cfg, state.params, ds);
    out.state.params = integrate_step(cfg, state.params, ds, state.step, state.scheme);
    out.state.t = state.t + state.step;
    out.state.step = state.step;
    out.state.scheme = state.scheme;
    out.loss_after = loss_value(cfg, out.state.params, ds);
    out.loss_increased = out.loss_after > out.loss_before + 1e-12;
    return out;
}

// ---------------------------------------------------------------------------
// Spectral diagnostics
// ---------------------------------------------------------------------------

struct SpectralDiag {
    double xi = 1.0;    // max(1, ||W^[l]||_{2->2}/sqrt(m) for l=2..L, ||a||_2/sqrt(m))
    double omega = 0.0; // max 2->inf norm over W^[2..L] and their transposes
};

inline SpectralDiag spectral_diag(const NetworkConfig& cfg, const Params& params,
                                  double tol = 1e-5, std::size_t max_iter = 600) {
    SpectralDiag d;
    const double inv_sqrt_m = 1.0 / std::sqrt(static_cast<double>(cfg.m));
    d.xi = std::max(1.0, norm2(params.a) * inv_sqrt_m);
    for (std::size_t l = 2; l <= cfg.L; ++l) {
        const Matrix& w = params.weight(l);
        d.xi = std::max(d.xi, spectral_norm(w, tol, max_iter) * inv_sqrt_m);
        d.omega = std::max(d.omega, two_to_infinity_norm(w));
        // the transposed 2->inf norm is the max column norm
        double best_col = 0.0;
        for (std::size_t j = 0; j < w.cols; ++j) {
            double s = 0.0;
            for (std::size_t i = 0; i < w.rows; ++i) s += w(i, j) * w(i, j);
            best_col = std::max(best_col, s);
        }
        d.omega = std::max(d.omega, std::sqrt(best_col));
    }
    return d;
}

// Relative Frobenius drift per block, maximized over blocks. The absolute
// drift ||theta_t - theta_0||_F is O(1) in m (the a-block alone absorbs an
// O(1) update), so the width scaling lives in the relative change.
inline double param_drift(const Params& now, const Params& at_init) {
    auto rel = [](const std::vector<double>& a, const std::vector<double>& b) {
        double num = 0.0, den = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) {
            const double d = a[k] - b[k];
            num += d * d;
            den += b[k] * b[k];
        }
        return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
    };
    double worst = rel(now.W1.data, at_init.W1.data);
    for (std::size_t l = 0; l < now.W.size(); ++l)
        worst = std::max(worst, rel(now.W[l].data, at_init.W[l].data));
    worst = std::max(worst, rel(now.a.data, at_init.a.data));
    return worst;
}

} // namespace nthlab
