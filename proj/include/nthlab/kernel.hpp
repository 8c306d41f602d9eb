#pragma once

// Empirical NTK and its per-layer decomposition
//   K2(x_a, x_b) = sum_{l=1}^{L+1} G^[l](x_a, x_b),
//   G^[l]   = scale_l <v_a^(l), v_b^(l)> <x_a^[l-1], x_b^[l-1]>,
//   G^[L+1] = <x_a^[L], x_b^[L]>,
// with v^(l) = sigma'_[l] . (E^[(l+1):L])^T a, plus the explicit third-order
// kernel G^(3) generated from the top-layer kernel, the order-2/order-3
// hierarchy consistency residual, and closed-form kernel regression.

#include <cmath>
#include <vector>

#include "nthlab/dynamics.hpp"
#include "nthlab/errors.hpp"
#include "nthlab/linalg.hpp"
#include "nthlab/model.hpp"

namespace nthlab {

enum class GramKind { EmpiricalK2, LayerG, Limit };

struct GramMatrix {
    std::size_t n = 0;
    Matrix data; // n x n, symmetric
    GramKind kind = GramKind::LayerG;

    GramMatrix() = default;
    GramMatrix(std::size_t n_, GramKind k) : n(n_), data(n_, n_), kind(k) {}

    double& operator()(std::size_t i, std::size_t j) { return data(i, j); }
    double operator()(std::size_t i, std::size_t j) const { return data(i, j); }

    void symmetrize() {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const double v = 0.5 * (data(i, j) + data(j, i));
                data(i, j) = v;
                data(j, i) = v;
            }
    }

    double trace() const {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += data(i, i);
        return s;
    }
};

inline double gram_inf_norm(const GramMatrix& g) { return matrix_inf_entry_norm(g.data); }

inline double gram_diff_inf(const GramMatrix& a, const GramMatrix& b) {
    if (a.n != b.n) throw DimensionError("gram_diff_inf: size mismatch");
    double worst = 0.0;
    for (std::size_t k = 0; k < a.data.data.size(); ++k)
        worst = std::max(worst, std::abs(a.data.data[k] - b.data.data[k]));
    return worst;
}

inline double gram_diff_fro(const GramMatrix& a, const GramMatrix& b) {
    if (a.n != b.n) throw DimensionError("gram_diff_fro: size mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < a.data.data.size(); ++k) {
        const double d = a.data.data[k] - b.data.data[k];
        s += d * d;
    }
    return std::sqrt(s);
}

struct KernelSnapshot {
    double t = 0.0;
    GramMatrix K2;
    std::vector<GramMatrix> per_layer; // [0] unused; [1..L+1] are G^[l]
    double lambda_min = 0.0;
};

namespace detail {
// sigma'_[l] . w^(l) for every layer of one sample, the column vectors the
// layer kernels are built from (unscaled).
inline std::vector<Vector> layer_columns(const NetworkConfig& cfg, const Params& params,
                                         const ForwardCache& cache) {
    const std::vector<Vector> w = backward_vectors(cfg, params, cache);
    std::vector<Vector> v(cfg.L + 1);
    for (std::size_t l = 1; l <= cfg.L; ++l) {
        v[l] = Vector(cfg.m);
        for (std::size_t i = 0; i < cfg.m; ++i) v[l][i] = cache.sprime[l][i] * w[l][i];
    }
    return v;
}

inline double layer_scale(const NetworkConfig& cfg, std::size_t l) {
    if (l == 1) return cfg.c_sigma / static_cast<double>(cfg.m);
    const double L = static_cast<double>(cfg.L);
    return cfg.c_res * cfg.c_res / (L * L * static_cast<double>(cfg.m));
}
} // namespace detail

inline std::vector<ForwardCache> forward_all(const NetworkConfig& cfg, const Params& params,
                                             const Dataset& ds) {
    std::vector<ForwardCache> caches;
    caches.reserve(ds.size());
    for (const Vector& x : ds.inputs) caches.push_back(forward(cfg, params, x));
    return caches;
}

// The n x n layer-l kernel, 1 <= l <= L+1.
inline GramMatrix layer_kernel(const NetworkConfig& cfg, const Params& params,
                               const std::vector<ForwardCache>& caches, std::size_t l) {
    const std::size_t n = caches.size();
    if (l < 1 || l > cfg.L + 1)
        throw DimensionError("layer_kernel: layer " + std::to_string(l) + " out of [1," +
                             std::to_string(cfg.L + 1) + "]");
    GramMatrix g(n, GramKind::LayerG);
    if (l == cfg.L + 1) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                const double v = dot(caches[i].x[cfg.L], caches[j].x[cfg.L]);
                g(i, j) = v;
                g(j, i) = v;
            }
        return g;
    }
    std::vector<Vector> cols(n);
    for (std::size_t i = 0; i < n; ++i)
        cols[i] = detail::layer_columns(cfg, params, caches[i])[l];
    const double scale = detail::layer_scale(cfg, l);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            const double v =
                scale * dot(cols[i], cols[j]) * dot(caches[i].x[l - 1], caches[j].x[l - 1]);
            g(i, j) = v;
            g(j, i) = v;
        }
    return g;
}

// Full NTK with its decomposition and smallest eigenvalue. One backward
// sweep per sample covers all layers.
inline KernelSnapshot empirical_ntk_from_caches(const NetworkConfig& cfg, const Params& params,
                                                const std::vector<ForwardCache>& caches,
                                                double t = 0.0) {
    const std::size_t n = caches.size();
    std::vector<std::vector<Vector>> cols(n);
    for (std::size_t i = 0; i < n; ++i)
        cols[i] = detail::layer_columns(cfg, params, caches[i]);

    KernelSnapshot snap;
    snap.t = t;
    snap.per_layer.assign(cfg.L + 2, GramMatrix(n, GramKind::LayerG));
    snap.K2 = GramMatrix(n, GramKind::EmpiricalK2);

    for (std::size_t l = 1; l <= cfg.L; ++l) {
        const double scale = detail::layer_scale(cfg, l);
        GramMatrix& g = snap.per_layer[l];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                const double v = scale * dot(cols[i][l], cols[j][l]) *
                                 dot(caches[i].x[l - 1], caches[j].x[l - 1]);
                g(i, j) = v;
                g(j, i) = v;
            }
    }
    GramMatrix& top = snap.per_layer[cfg.L + 1];
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            const double v = dot(caches[i].x[cfg.L], caches[j].x[cfg.L]);
            top(i, j) = v;
            top(j, i) = v;
        }

    for (std::size_t l = 1; l <= cfg.L + 1; ++l)
        for (std::size_t k = 0; k < snap.K2.data.data.size(); ++k)
            snap.K2.data.data[k] += snap.per_layer[l].data.data[k];
    snap.K2.symmetrize();

    snap.lambda_min = sym_eig_min(snap.K2.data);
    if (snap.lambda_min < -1e-8 * std::max(snap.K2.trace() / static_cast<double>(n), 1.0))
        throw NumericError("empirical_ntk: K2 not PSD within tolerance, lambda_min = " +
                           std::to_string(snap.lambda_min));
    return snap;
}

inline KernelSnapshot empirical_ntk(const NetworkConfig& cfg, const Params& params,
                                    const Dataset& ds, double t = 0.0) {
    return empirical_ntk_from_caches(cfg, params, forward_all(cfg, params, ds), t);
}

// ---------------------------------------------------------------------------
// Third-order kernel G^(3)
// ---------------------------------------------------------------------------

// Dense n^3 tensor, symmetric in the first two indices.
struct G3Tensor {
    std::size_t n = 0;
    std::vector<double> data;

    explicit G3Tensor(std::size_t n_ = 0) : n(n_), data(n_ * n_ * n_, 0.0) {}
    double& at(std::size_t a1, std::size_t a2, std::size_t b) {
        return data[(a1 * n + a2) * n + b];
    }
    double at(std::size_t a1, std::size_t a2, std::size_t b) const {
        return data[(a1 * n + a2) * n + b];
    }
    double max_abs() const {
        double w = 0.0;
        for (double x : data) w = std::max(w, std::abs(x));
        return w;
    }
};

// The exact time-derivative kernel of the top-layer kernel
// G^(2) := G^[L+1] = <x_a1^[L], x_a2^[L]>: four term groups, the k = 1
// (first-layer) term at weight c_sigma/m, the k = 2..L sum at weight
// c_res^2/(L^2 m), plus both with a1 and a2 exchanged.
//
// optional truncate_k: only k <= truncate_k contribute (0 = no truncation);
// used by the effective-term accounting test.
inline G3Tensor g3_kernel(const NetworkConfig& cfg, const Params& params,
                          const std::vector<ForwardCache>& caches, std::size_t truncate_k = 0) {
    const std::size_t n = caches.size();
    const std::size_t kmax = (truncate_k == 0) ? cfg.L : std::min(truncate_k, cfg.L);

    // per-sample backward vectors w^(k) = (E^[(k+1):L])^T a
    std::vector<std::vector<Vector>> w(n);
    for (std::size_t b = 0; b < n; ++b) w[b] = backward_vectors(cfg, params, caches[b]);

    G3Tensor half(n); // contribution with a1 in the derivative slot
    Vector q(cfg.m);
    for (std::size_t a1 = 0; a1 < n; ++a1) {
        for (std::size_t b = 0; b < n; ++b) {
            for (std::size_t k = 1; k <= kmax; ++k) {
                for (std::size_t i = 0; i < cfg.m; ++i)
                    q[i] = caches[a1].sprime[k][i] * caches[b].sprime[k][i] * w[b][k][i];
                Vector u = apply_skip_range(cfg, params, caches[a1], k + 1, cfg.L, q);
                const double scale = detail::layer_scale(cfg, k);
                const double inner = dot(caches[a1].x[k - 1], caches[b].x[k - 1]);
                for (std::size_t a2 = 0; a2 < n; ++a2)
                    half.at(a1, a2, b) += scale * dot(u, caches[a2].x[cfg.L]) * inner;
            }
        }
    }

    G3Tensor g3(n);
    for (std::size_t a1 = 0; a1 < n; ++a1)
        for (std::size_t a2 = 0; a2 < n; ++a2)
            for (std::size_t b = 0; b < n; ++b)
                g3.at(a1, a2, b) = half.at(a1, a2, b) + half.at(a2, a1, b);
    return g3;
}

// ---------------------------------------------------------------------------
// Hierarchy consistency
// ---------------------------------------------------------------------------

struct NthResidual {
    double residual = 0.0;  // max-abs of drift + (1/n) sum_b G3 (f_b - y_b)
    double drift_inf = 0.0; // max-abs of the finite-difference kernel drift
    double relative = 0.0;  // residual / drift_inf
};

// Central-difference check of d/dt G^(2) = -(1/n) sum_b G^(3)(.,.,x_b) r_b.
// The order-2 member of the hierarchy expanded in the proof sketch is the
// top-layer kernel, so the snapshots' per_layer[L+1] components are
// differenced. A small value certifies the order-2/order-3 consistency; the
// leftover is the O(delta^2) central-difference truncation.
inline NthResidual nth_residual(const NetworkConfig& cfg, const KernelSnapshot& at_minus,
                                const KernelSnapshot& at_plus, const G3Tensor& g3_mid,
                                const std::vector<double>& residuals_mid, double delta) {
    if (!(delta > 0.0)) throw ConfigError("nth_residual: delta must be positive");
    const std::size_t n = residuals_mid.size();
    if (g3_mid.n != n) throw DimensionError("nth_residual: G3 size mismatch");
    const GramMatrix& top_minus = at_minus.per_layer.at(cfg.L + 1);
    const GramMatrix& top_plus = at_plus.per_layer.at(cfg.L + 1);

    NthResidual out;
    for (std::size_t a1 = 0; a1 < n; ++a1)
        for (std::size_t a2 = 0; a2 < n; ++a2) {
            const double drift = (top_plus(a1, a2) - top_minus(a1, a2)) / delta;
            double hier = 0.0;
            for (std::size_t b = 0; b < n; ++b) hier += g3_mid.at(a1, a2, b) * residuals_mid[b];
            hier /= static_cast<double>(n);
            out.drift_inf = std::max(out.drift_inf, std::abs(drift));
            out.residual = std::max(out.residual, std::abs(drift + hier));
        }
    out.relative = out.residual / std::max(out.drift_inf, 1e-300);
    return out;
}

// ---------------------------------------------------------------------------
// Kernel regression
// ---------------------------------------------------------------------------

// (f(t) - y) = exp(-t K / n) (f(0) - y) through the symmetric
// eigendecomposition of K; exact for diagonal K. Errors on K that is
// non-PSD beyond tolerance; tiny negative eigenvalues are clamped to zero.
inline Vector kernel_regression_predict(const GramMatrix& k, const Vector& f0, double t,
                                        std::size_t n) {
    if (k.n != f0.size())
        throw DimensionError("kernel_regression_predict: K is " + std::to_string(k.n) +
                             "x" + std::to_string(k.n) + ", f0 has length " +
                             std::to_string(f0.size()));
    Matrix sym = k.data;
    for (std::size_t i = 0; i < k.n; ++i)
        for (std::size_t j = i + 1; j < k.n; ++j) {
            const double v = 0.5 * (sym(i, j) + sym(j, i));
            sym(i, j) = v;
            sym(j, i) = v;
        }
    EigenDecomposition eig = jacobi_eigen(sym);
    const double tol = 1e-8 * std::max(k.trace() / static_cast<double>(k.n), 1.0);
    if (eig.values[0] < -tol)
        throw NumericError("kernel_regression_predict: K not PSD, lambda_min = " +
                           std::to_string(eig.values[0]));

    Vector coeffs(k.n);
    for (std::size_t j = 0; j < k.n; ++j) {
        double c = 0.0;
        for (std::size_t i = 0; i < k.n; ++i) c += eig.vectors(i, j) * f0[i];
        const double lam = std::max(eig.values[j], 0.0);
        coeffs[j] = c * std::exp(-t * lam / static_cast<double>(n));
    }
    Vector out(k.n);
    for (std::size_t i = 0; i < k.n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < k.n; ++j) s += eig.vectors(i, j) * coeffs[j];
        out[i] = s;
    }
    return out;
}

} // namespace nthlab
