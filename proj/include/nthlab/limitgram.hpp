#pragma once

// Infinite-width limiting Gram matrices: the K-tilde / b-tilde recursion,
// the closed-form limits K^[L+1] and K^[L], lambda_0, the covariance
// hierarchy, Monte-Carlo estimates of the Definition-3.3 layer limits, and
// the initialization-concentration experiment.

#include <cmath>
#include <vector>

#include "nthlab/errors.hpp"
#include "nthlab/kernel.hpp"
#include "nthlab/linalg.hpp"
#include "nthlab/model.hpp"
#include "nthlab/quadrature.hpp"

namespace nthlab {

struct LimitKernelStack {
    std::size_t L = 0;
    std::vector<GramMatrix> Ktilde; // l = 0..L
    std::vector<Vector> btilde;     // [0] unused; l = 1..L
    GramMatrix K_L1;                // the (L+1)-level recursion value
    GramMatrix K_L;                 // derivative-kernel limit at layer L
    double lambda0 = 0.0;           // lambda_min(Ktilde^[1] - b b^T)
    std::vector<double> hierarchy_eigs; // lambda_min(Ktilde^[l] - b b^T), l = 1..L
    double quad_agreement = 0.0;    // max 60- vs 90-node discrepancy seen
};

namespace detail {
struct QuadContext {
    std::size_t l, i, j;
};

template <typename Fn>
double guarded(Fn&& fn, const QuadContext& ctx) {
    try {
        return fn();
    } catch (const Error& e) {
        throw NumericError("limit stack quadrature failed at l=" + std::to_string(ctx.l) +
                           " i=" + std::to_string(ctx.i) + " j=" + std::to_string(ctx.j) +
                           ": " + e.what());
    }
}
} // namespace detail

// One recursion increment: E[(c_res/L)(b_i sigma(v) + b_j sigma(u)) +
// (c_res^2/L^2) sigma(u) sigma(v)] under (u,v) ~ N(0, A^[l]_ij). The two
// linear pieces are exact 1D integrals of the marginals.
inline double recursion_increment(const Activation& act, double c_res, std::size_t L,
                                  double bi, double bj, double kii, double kij, double kjj,
                                  std::size_t nodes) {
    auto sig = [&](double x) { return act.value(x); };
    const double e_i = gauss1d_expect(sig, kii, std::max<std::size_t>(nodes, 120));
    const double e_j = gauss1d_expect(sig, kjj, std::max<std::size_t>(nodes, 120));
    const double e_uv = gauss2d_expect(kii, kij, kjj, sig, sig, nodes);
    const double Ld = static_cast<double>(L);
    return (c_res / Ld) * (bi * e_j + bj * e_i) + (c_res * c_res / (Ld * Ld)) * e_uv;
}

// Builds the whole stack; every 2D expectation is evaluated on both 60- and
// 90-node grids and the largest discrepancy is recorded (the recursion is
// advanced with the 60-node values).
inline LimitKernelStack build_limit_stack(const Dataset& ds, const Activation& act,
                                          double c_res, double c_sigma, std::size_t L,
                                          std::size_t nodes = 60, std::size_t check_nodes = 90) {
    validate_dataset(ds);
    const std::size_t n = ds.size();
    LimitKernelStack st;
    st.L = L;
    st.Ktilde.assign(L + 1, GramMatrix(n, GramKind::Limit));
    st.btilde.assign(L + 1, Vector(n));

    auto sig = [&](double x) { return act.value(x); };

    // level 0: input Gram
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) st.Ktilde[0](i, j) = dot(ds.inputs[i], ds.inputs[j]);

    // level 1
    const double sqrt_cs = std::sqrt(c_sigma);
    for (std::size_t i = 0; i < n; ++i)
        st.btilde[1][i] = sqrt_cs * gauss1d_expect(sig, st.Ktilde[0](i, i), 200);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            detail::QuadContext ctx{1, i, j};
            const double kii = st.Ktilde[0](i, i), kij = st.Ktilde[0](i, j),
                         kjj = st.Ktilde[0](j, j);
            const double v = detail::guarded(
                [&] { return c_sigma * gauss2d_expect(kii, kij, kjj, sig, sig, nodes); }, ctx);
            const double v_check = detail::guarded(
                [&] { return c_sigma * gauss2d_expect(kii, kij, kjj, sig, sig, check_nodes); }, ctx);
            st.quad_agreement = std::max(st.quad_agreement, std::abs(v - v_check));
            st.Ktilde[1](i, j) = v;
            st.Ktilde[1](j, i) = v;
        }

    // levels 2..L
    for (std::size_t l = 2; l <= L; ++l) {
        const GramMatrix& prev = st.Ktilde[l - 1];
        for (std::size_t i = 0; i < n; ++i)
            st.btilde[l][i] = st.btilde[l - 1][i] +
                              (c_res / static_cast<double>(L)) *
                                  gauss1d_expect(sig, prev(i, i), 200);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                detail::QuadContext ctx{l, i, j};
                const double inc = detail::guarded(
                    [&] {
                        return recursion_increment(act, c_res, L, st.btilde[l - 1][i],
                                                   st.btilde[l - 1][j], prev(i, i), prev(i, j),
                                                   prev(j, j), nodes);
                    },
                    ctx);
                const double inc_check = detail::guarded(
                    [&] {
                        return recursion_increment(act, c_res, L, st.btilde[l - 1][i],
                                                   st.btilde[l - 1][j], prev(i, i), prev(i, j),
                                                   prev(j, j), check_nodes);
                    },
                    ctx);
                st.quad_agreement = std::max(st.quad_agreement, std::abs(inc - inc_check));
                const double v = prev(i, j) + inc;
                st.Ktilde[l](i, j) = v;
                st.Ktilde[l](j, i) = v;
            }
    }

    // K^[L+1]: one more recursion step from level L
    st.K_L1 = GramMatrix(n, GramKind::Limit);
    {
        const GramMatrix& prev = st.Ktilde[L];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                detail::QuadContext ctx{L + 1, i, j};
                const double inc = detail::guarded(
                    [&] {
                        return recursion_increment(act, c_res, L, st.btilde[L][i], st.btilde[L][j],
                                                   prev(i, i), prev(i, j), prev(j, j), nodes);
                    },
                    ctx);
                const double v = prev(i, j) + inc;
                st.K_L1(i, j) = v;
                st.K_L1(j, i) = v;
            }
    }

    // K^[L]: (c_res^2/L^2) Ktilde^[L-1] .* E[sigma'(u) sigma'(v)]
    st.K_L = GramMatrix(n, GramKind::Limit);
    {
        auto sigp = [&](double x) { return act.d1(x); };
        const GramMatrix& prev = st.Ktilde[L - 1];
        const double pref = c_res * c_res / (static_cast<double>(L) * static_cast<double>(L));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j) {
                detail::QuadContext ctx{L, i, j};
                const double e = detail::guarded(
                    [&] {
                        return gauss2d_expect(prev(i, i), prev(i, j), prev(j, j), sigp, sigp,
                                              nodes);
                    },
                    ctx);
                const double v = pref * prev(i, j) * e;
                st.K_L(i, j) = v;
                st.K_L(j, i) = v;
            }
    }

    // covariance hierarchy M^[l] = Ktilde^[l] - b^[l] (b^[l])^T
    st.hierarchy_eigs.resize(L + 1, 0.0);
    for (std::size_t l = 1; l <= L; ++l) {
        Matrix m = st.Ktilde[l].data;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) m(i, j) -= st.btilde[l][i] * st.btilde[l][j];
        st.hierarchy_eigs[l] = sym_eig_min(m);
    }
    st.lambda0 = st.hierarchy_eigs[1];
    return st;
}

inline double lambda0(const LimitKernelStack& st) {
    if (st.lambda0 <= 0.0)
        throw NumericError("lambda0: non-positive (" + std::to_string(st.lambda0) +
                           "); activation analytic+non-polynomial and non-parallel "
                           "inputs should make it strictly positive");
    return st.lambda0;
}

// The Appendix-B Lemma's diagonal-band constant: C is a grid-measured bound
// for |E sigma(alpha X)^2 - E sigma(X)^2| <= (C/c_sigma) |alpha - 1| over
// alpha in [1/2, 2], inflated 5% to stay conservative, and
//   c = C c_res^2 / (2 sqrt(c_sigma)) + sqrt(C^2 c_res^4/(4 c_sigma) + c_res^2).
inline double diagonal_band_constant(const Activation& act, double c_sigma, double c_res) {
    auto sq = [&](double x) { const double s = act.value(x); return s * s; };
    const double base = gauss1d_expect(sq, 1.0, 200);
    double worst = 0.0;
    for (double alpha = 0.5; alpha <= 2.0 + 1e-12; alpha += 0.01) {
        if (std::abs(alpha - 1.0) < 1e-9) continue;
        const double v = gauss1d_expect(sq, alpha * alpha, 200);
        worst = std::max(worst, std::abs(v - base) / std::abs(alpha - 1.0));
    }
    const double C = 1.05 * c_sigma * worst;
    const double sq_cs = std::sqrt(c_sigma);
    return C * c_res * c_res / (2.0 * sq_cs) +
           std::sqrt(C * C * std::pow(c_res, 4) / (4.0 * c_sigma) + c_res * c_res);
}

// ---------------------------------------------------------------------------
// Monte-Carlo layer limits (Definition-3.3 objects)
// ---------------------------------------------------------------------------

struct McGram {
    GramMatrix estimate;
    GramMatrix stderr_; // per-entry standard error of the mean
    std::size_t m_probe = 0;
    std::size_t replicates = 0;
};

// Width-limit layer kernel estimated at finite probe width:
// prefactor_ij * mean over replicates of (1/m) <sigma'_[l](x_i) w_i^(l),
// sigma'_[l](x_j) w_j^(l)>, with the K-tilde prefactor from the quadrature
// stack. Replicate r draws fresh parameters from seed + r; aggregation is
// in replicate order. This is an estimate and is reported with standard
// errors, never as exact.
inline McGram mc_layer_kernel(const Dataset& ds, const NetworkConfig& cfg,
                              const LimitKernelStack& stack, std::size_t l,
                              std::size_t m_probe, std::size_t replicates,
                              std::uint64_t seed) {
    if (m_probe < 256) throw ConfigError("mc_layer_kernel: m_probe must be >= 256");
    if (replicates < 8) throw ConfigError("mc_layer_kernel: replicates must be >= 8");
    if (l < 1 || l > cfg.L)
        throw DimensionError("mc_layer_kernel: layer " + std::to_string(l) + " out of [1," +
                             std::to_string(cfg.L) + "]");
    const std::size_t n = ds.size();
    NetworkConfig probe = cfg;
    probe.m = m_probe;

    std::vector<std::vector<double>> samples(n * n);
    for (std::size_t r = 0; r < replicates; ++r) {
        const Params params = init_params(probe, seed + r);
        std::vector<ForwardCache> caches = forward_all(probe, params, ds);
        std::vector<Vector> cols(n);
        for (std::size_t i = 0; i < n; ++i)
            cols[i] = detail::layer_columns(probe, params, caches[i])[l];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i; j < n; ++j)
                samples[i * n + j].push_back(dot(cols[i], cols[j]) /
                                             static_cast<double>(m_probe));
    }

    McGram out;
    out.estimate = GramMatrix(n, GramKind::Limit);
    out.stderr_ = GramMatrix(n, GramKind::Limit);
    out.m_probe = m_probe;
    out.replicates = replicates;
    const double R = static_cast<double>(replicates);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i; j < n; ++j) {
            const std::vector<double>& s = samples[i * n + j];
            double mean = 0.0;
            for (double x : s) mean += x;
            mean /= R;
            double var = 0.0;
            for (double x : s) var += (x - mean) * (x - mean);
            var /= (R - 1.0);
            const double pref = (l == 1) ? cfg.c_sigma * stack.Ktilde[0](i, j)
                                         : (cfg.c_res * cfg.c_res /
                                            (static_cast<double>(cfg.L) * static_cast<double>(cfg.L))) *
                                               stack.Ktilde[l - 1](i, j);
            out.estimate(i, j) = pref * mean;
            out.estimate(j, i) = pref * mean;
            const double se = std::abs(pref) * std::sqrt(var / R);
            out.stderr_(i, j) = se;
            out.stderr_(j, i) = se;
        }
    return out;
}

// ---------------------------------------------------------------------------
// Initialization concentration (Appendix-C experiment)
// ---------------------------------------------------------------------------

struct ConcentrationRow {
    std::size_t m = 0;
    std::uint64_t seed = 0;
    double gap_G1 = 0.0;      // max |<x^[1]_i, x^[1]_j> - Ktilde^[1]_ij|
    double gap_GL = 0.0;      // max |<x^[L]_i, x^[L]_j> - Ktilde^[L]_ij|
    double gap_GL1 = 0.0;     // max |G^[L+1](0)_ij - K^[L+1]_ij|
    double lambda_min_GL1 = 0.0;
};

struct ConcentrationReport {
    std::vector<ConcentrationRow> rows;       // ordered by (m, seed)
    std::vector<std::size_t> m_list;
    std::vector<double> median_gap_GL1;       // per m
    double slope_loglog = 0.0;                // fit of log median gap vs log m
};

namespace detail {
inline double median_of(std::vector<double> v) {
    std::size_t n = v.size();
    std::sort(v.begin(), v.end());
    return (n % 2 == 1) ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double least_squares_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const double n = static_cast<double>(x.size());
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sx += x[i];
        sy += y[i];
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}
} // namespace detail

// G^[l](0) here are the layer-output Grams <x^[l]_i, x^[l]_j>, and the
// (L+1)-level object extends the network by one extra residual step with a
// fresh Gaussian matrix drawn from the same per-seed stream, matching the
// recursion K^[L+1] it concentrates on.
inline ConcentrationReport init_concentration(const Dataset& ds, const NetworkConfig& cfg,
                                              const LimitKernelStack& stack,
                                              const std::vector<std::size_t>& m_list,
                                              const std::vector<std::uint64_t>& seeds) {
    const std::size_t n = ds.size();
    ConcentrationReport rep;
    rep.m_list = m_list;

    for (std::size_t m : m_list) {
        NetworkConfig c = cfg;
        c.m = m;
        std::vector<double> gaps;
        for (std::uint64_t seed : seeds) {
            Rng rng(seed);
            Params params;
            params.W1 = gaussian_matrix(m, c.d, rng);
            for (std::size_t l = 2; l <= c.L; ++l)
                params.W.push_back(gaussian_matrix(m, m, rng));
            params.a = gaussian_vector(m, rng);
            Matrix w_ext = gaussian_matrix(m, m, rng);

            std::vector<ForwardCache> caches = forward_all(c, params, ds);
            const double sres =
                c.c_res / (static_cast<double>(c.L) * std::sqrt(static_cast<double>(m)));
            std::vector<Vector> x_ext(n);
            for (std::size_t i = 0; i < n; ++i) {
                Vector z = matvec(w_ext, caches[i].x[c.L]);
                x_ext[i] = caches[i].x[c.L];
                for (std::size_t k = 0; k < m; ++k)
                    x_ext[i][k] += sres * c.activation.value(z[k]);
            }

            ConcentrationRow row;
            row.m = m;
            row.seed = seed;
            GramMatrix gl1(n, GramKind::LayerG);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = i; j < n; ++j) {
                    row.gap_G1 = std::max(row.gap_G1,
                                          std::abs(dot(caches[i].x[1], caches[j].x[1]) -
                                                   stack.Ktilde[1](i, j)));
                    row.gap_GL = std::max(row.gap_GL,
                                          std::abs(dot(caches[i].x[c.L], caches[j].x[c.L]) -
                                                   stack.Ktilde[c.L](i, j)));
                    const double v = dot(x_ext[i], x_ext[j]);
                    gl1(i, j) = v;
                    gl1(j, i) = v;
                    row.gap_GL1 = std::max(row.gap_GL1, std::abs(v - stack.K_L1(i, j)));
                }
            row.lambda_min_GL1 = sym_eig_min(gl1.data);
            gaps.push_back(row.gap_GL1);
            rep.rows.push_back(row);
        }
        rep.median_gap_GL1.push_back(detail::median_of(gaps));
    }

    std::vector<double> lx, ly;
    for (std::size_t k = 0; k < m_list.size(); ++k) {
        lx.push_back(std::log(static_cast<double>(m_list[k])));
        ly.push_back(std::log(std::max(rep.median_gap_GL1[k], 1e-300)));
    }
    if (m_list.size() >= 2) rep.slope_loglog = detail::least_squares_slope(lx, ly);
    return rep;
}

} // namespace nthlab
