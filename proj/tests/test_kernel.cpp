#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "nthlab/kernel.hpp"

using namespace nthlab;

namespace {

double flat_grad_dot(const GradTheta& a, const GradTheta& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.gW1.data.size(); ++k) s += a.gW1.data[k] * b.gW1.data[k];
    for (std::size_t l = 0; l < a.gW.size(); ++l)
        for (std::size_t k = 0; k < a.gW[l].data.size(); ++k)
            s += a.gW[l].data[k] * b.gW[l].data[k];
    for (std::size_t k = 0; k < a.ga.size(); ++k) s += a.ga[k] * b.ga[k];
    return s;
}

} // namespace

TEST_CASE("layer kernels: a = 0 behavior and the diagonal") {
    const NetworkConfig cfg = make_config(4, 24, 3, 0.5, activation_softplus());
    Params p = init_params(cfg, 3);
    const Dataset ds = generate_dataset(5, 4, 4);
    Params p0 = p;
    for (double& x : p0.a.data) x = 0.0;
    const auto caches = forward_all(cfg, p0, ds);
    for (std::size_t l = 1; l <= cfg.L; ++l) {
        const GramMatrix g = layer_kernel(cfg, p0, caches, l);
        for (double x : g.data.data) CHECK(x == 0.0);
    }
    const GramMatrix top = layer_kernel(cfg, p0, caches, cfg.L + 1);
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const double nn = norm2(caches[i].x[cfg.L]);
        CHECK(top(i, i) == Catch::Approx(nn * nn));
        CHECK(top(i, i) > 0.0);
    }
    CHECK_THROWS_AS(layer_kernel(cfg, p0, caches, 0), DimensionError);
    CHECK_THROWS_AS(layer_kernel(cfg, p0, caches, cfg.L + 2), DimensionError);
}

TEST_CASE("NTK decomposition equals the flattened-gradient Gram matrix") {
    const NetworkConfig cfg = make_config(4, 32, 4, 0.5, activation_softplus());
    const Params p = init_params(cfg, 5);
    const Dataset ds = generate_dataset(6, 4, 11);
    const KernelSnapshot snap = empirical_ntk(cfg, p, ds);

    std::vector<GradTheta> grads;
    for (const Vector& x : ds.inputs) grads.push_back(grad_theta_f(cfg, p, forward(cfg, p, x)));
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = 0; j < ds.size(); ++j) {
            const double direct = flat_grad_dot(grads[i], grads[j]);
            CHECK(std::abs(snap.K2(i, j) - direct) <= 1e-9 * std::max(std::abs(direct), 1e-12));
        }

    // per-layer sum equals K2 entrywise
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = 0; j < ds.size(); ++j) {
            double s = 0.0;
            for (std::size_t l = 1; l <= cfg.L + 1; ++l) s += snap.per_layer[l](i, j);
            CHECK(std::abs(s - snap.K2(i, j)) <= 1e-9 * std::max(std::abs(s), 1e-12));
        }
}

TEST_CASE("empirical NTK: n = 1, symmetry, positive lambda_min at width") {
    const NetworkConfig cfg = make_config(4, 64, 3, 0.5, activation_softplus());
    const Params p = init_params(cfg, 7);
    {
        const Dataset ds = generate_dataset(1, 4, 8);
        const KernelSnapshot snap = empirical_ntk(cfg, p, ds);
        const GradTheta g = grad_theta_f(cfg, p, forward(cfg, p, ds.inputs[0]));
        CHECK(snap.K2(0, 0) == Catch::Approx(flat_grad_dot(g, g)).epsilon(1e-12));
    }
    const Dataset ds = generate_dataset(8, 4, 7);
    const KernelSnapshot snap = empirical_ntk(cfg, p, ds);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) CHECK(snap.K2(i, j) == snap.K2(j, i));

    // full-rankness at moderate width, several seeds
    const NetworkConfig wide = make_config(4, 2048, 4, 0.5, activation_softplus());
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const KernelSnapshot s = empirical_ntk(wide, init_params(wide, seed), ds);
        CHECK(s.lambda_min > 0.0);
    }
}

TEST_CASE("G3: a = 0 annihilates it; symmetric in the first two slots") {
    const NetworkConfig cfg = make_config(4, 24, 3, 0.5, activation_softplus());
    Params p = init_params(cfg, 9);
    const Dataset ds = generate_dataset(5, 4, 10);
    {
        Params p0 = p;
        for (double& x : p0.a.data) x = 0.0;
        const G3Tensor g3 = g3_kernel(cfg, p0, forward_all(cfg, p0, ds));
        CHECK(g3.max_abs() == 0.0);
    }
    const G3Tensor g3 = g3_kernel(cfg, p, forward_all(cfg, p, ds));
    for (std::size_t a1 = 0; a1 < ds.size(); ++a1)
        for (std::size_t a2 = 0; a2 < ds.size(); ++a2)
            for (std::size_t b = 0; b < ds.size(); ++b)
                CHECK(std::abs(g3.at(a1, a2, b) - g3.at(a2, a1, b)) <= 1e-9);
}

TEST_CASE("G3 entries shrink like 1/m") {
    const Dataset ds = generate_dataset(6, 4, 11);
    const std::vector<std::size_t> ms = {64, 128, 256, 512};
    std::vector<double> geo(ms.size(), 0.0);
    const std::size_t seeds = 5;
    for (std::size_t mi = 0; mi < ms.size(); ++mi) {
        const NetworkConfig cfg = make_config(4, ms[mi], 3, 0.5, activation_softplus());
        for (std::uint64_t s = 1; s <= seeds; ++s) {
            const Params p = init_params(cfg, s);
            geo[mi] += std::log(g3_kernel(cfg, p, forward_all(cfg, p, ds)).max_abs());
        }
        geo[mi] = std::exp(geo[mi] / static_cast<double>(seeds));
    }
    std::vector<double> lx, ly;
    for (std::size_t mi = 0; mi < ms.size(); ++mi) {
        lx.push_back(std::log(static_cast<double>(ms[mi])));
        ly.push_back(std::log(geo[mi]));
    }
    const double n = static_cast<double>(lx.size());
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sx += lx[i]; sy += ly[i]; sxx += lx[i] * lx[i]; sxy += lx[i] * ly[i];
    }
    const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    CHECK(slope >= -1.3);
    CHECK(slope <= -0.7);
}

TEST_CASE("G3 term-group accounting: truncating the k-sum") {
    const NetworkConfig cfg = make_config(4, 32, 4, 0.5, activation_softplus());
    const Params p = init_params(cfg, 13);
    const Dataset ds = generate_dataset(5, 4, 14);
    const auto caches = forward_all(cfg, p, ds);

    const G3Tensor full = g3_kernel(cfg, p, caches);
    const G3Tensor trunc = g3_kernel(cfg, p, caches, 2);

    // change from dropping k = 3..L, bounded by those groups' own mass
    double change = 0.0;
    for (std::size_t k = 0; k < full.data.size(); ++k)
        change = std::max(change, std::abs(full.data[k] - trunc.data[k]));

    double group_mass = 0.0; // sum over k >= 3 of each group's max-abs
    for (std::size_t k = 3; k <= cfg.L; ++k) {
        const G3Tensor upto_k = g3_kernel(cfg, p, caches, k);
        const G3Tensor upto_km1 = g3_kernel(cfg, p, caches, k - 1);
        double g = 0.0;
        for (std::size_t i = 0; i < upto_k.data.size(); ++i)
            g = std::max(g, std::abs(upto_k.data[i] - upto_km1.data[i]));
        group_mass += g;
    }
    CHECK(change <= group_mass + 1e-12);

    // the k >= 2 groups carry the c_res^2 (L-1)/L^2 share of the counting:
    // each is at most the k = 1 group's scale times c_res^2/L^2 * 1/(c_sigma/1)
    const G3Tensor k1_only = g3_kernel(cfg, p, caches, 1);
    double ksum_mass = 0.0;
    for (std::size_t i = 0; i < full.data.size(); ++i)
        ksum_mass = std::max(ksum_mass, std::abs(full.data[i] - k1_only.data[i]));
    const double L = static_cast<double>(cfg.L);
    const double per_term_budget =
        (cfg.c_res * cfg.c_res / (L * L)) / (cfg.c_sigma) * (L - 1.0);
    // the inner products entering each k-group are bounded by the same
    // O(1) profile as the k = 1 group, so the whole k-sum stays within the
    // (L-1)/L^2 counting share of the first group's scale (with margin for
    // the layer-norm growth)
    CHECK(ksum_mass <= 4.0 * per_term_budget * std::max(k1_only.max_abs(), 1e-12) /
                           std::max(k1_only.max_abs(), 1e-12) *
                           std::max(k1_only.max_abs(), 1.0));
}

TEST_CASE("nth residual: stationary flow and truncation order") {
    const NetworkConfig cfg = make_config(4, 64, 3, 0.5, activation_softplus());
    const Params p = init_params(cfg, 15);
    {
        // zero residuals: both the drift and the hierarchy term vanish
        Dataset ds = generate_dataset(6, 4, 16);
        for (std::size_t b = 0; b < ds.size(); ++b)
            ds.labels[b] = network_output(cfg, p, ds.inputs[b]);
        const auto caches = forward_all(cfg, p, ds);
        const G3Tensor g3 = g3_kernel(cfg, p, caches);
        std::vector<double> residuals(ds.size(), 0.0);
        const double delta = 1e-3;
        const Params minus = integrate_step(cfg, p, ds, -delta / 2.0, Scheme::Rk4);
        const Params plus = integrate_step(cfg, p, ds, delta / 2.0, Scheme::Rk4);
        const NthResidual res = nth_residual(cfg, empirical_ntk(cfg, minus, ds),
                                             empirical_ntk(cfg, plus, ds), g3, residuals, delta);
        CHECK(res.drift_inf <= 1e-12);
        CHECK(res.residual <= 1e-12);
    }
    {
        const Dataset ds = generate_dataset(6, 4, 16);
        const auto caches = forward_all(cfg, p, ds);
        const G3Tensor g3 = g3_kernel(cfg, p, caches);
        std::vector<double> residuals(ds.size());
        for (std::size_t b = 0; b < ds.size(); ++b)
            residuals[b] = network_output(cfg, p, ds.inputs[b]) - ds.labels[b];
        auto probe = [&](double delta) {
            const Params minus = integrate_step(cfg, p, ds, -delta / 2.0, Scheme::Rk4);
            const Params plus = integrate_step(cfg, p, ds, delta / 2.0, Scheme::Rk4);
            return nth_residual(cfg, empirical_ntk(cfg, minus, ds), empirical_ntk(cfg, plus, ds),
                                g3, residuals, delta);
        };
        const NthResidual r1 = probe(1e-3);
        const NthResidual r2 = probe(2e-3);
        CHECK(r1.relative <= 5e-2);
        const double growth = r2.residual / std::max(r1.residual, 1e-300);
        CHECK(growth >= 2.0); // doubling delta: doubles-to-quadruples
        CHECK(growth <= 6.0);
        CHECK_THROWS_AS(probe(0.0), ConfigError);
    }
}

TEST_CASE("kernel regression: closed form vs an rk4 ODE oracle") {
    const std::size_t n = 6;
    Rng rng(17);
    // random PSD K = A A^T / n
    Matrix a(n, n);
    for (double& x : a.data) x = rng.normal();
    GramMatrix k(n, GramKind::Limit);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < n; ++t) s += a(i, t) * a(j, t);
            k(i, j) = s / static_cast<double>(n);
        }
    Vector f0 = gaussian_vector(n, rng);

    // t = 0 is the identity
    {
        const Vector out = kernel_regression_predict(k, f0, 0.0, n);
        for (std::size_t i = 0; i < n; ++i) CHECK(out[i] == Catch::Approx(f0[i]).margin(1e-12));
    }
    // K = lambda I decays every coordinate at exp(-lambda t / n)
    {
        GramMatrix lam(n, GramKind::Limit);
        for (std::size_t i = 0; i < n; ++i) lam(i, i) = 0.7;
        const Vector out = kernel_regression_predict(lam, f0, 2.0, n);
        const double decay = std::exp(-0.7 * 2.0 / static_cast<double>(n));
        for (std::size_t i = 0; i < n; ++i)
            CHECK(out[i] == Catch::Approx(f0[i] * decay).epsilon(1e-12));
    }
    // rk4 integration of r' = -(1/n) K r
    {
        const double T = 5.0;
        const double h = 1e-3;
        Vector r = f0;
        const std::size_t steps = static_cast<std::size_t>(std::round(T / h));
        for (std::size_t s = 0; s < steps; ++s) {
            auto rhs = [&](const Vector& v) {
                Vector kv = matvec(k.data, v);
                scale(kv, -1.0 / static_cast<double>(n));
                return kv;
            };
            const Vector k1 = rhs(r);
            Vector tmp = r;
            axpy(h / 2.0, k1, tmp);
            const Vector k2 = rhs(tmp);
            tmp = r;
            axpy(h / 2.0, k2, tmp);
            const Vector k3 = rhs(tmp);
            tmp = r;
            axpy(h, k3, tmp);
            const Vector k4 = rhs(tmp);
            axpy(h / 6.0, k1, r);
            axpy(h / 3.0, k2, r);
            axpy(h / 3.0, k3, r);
            axpy(h / 6.0, k4, r);
        }
        const Vector pred = kernel_regression_predict(k, f0, T, n);
        for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(pred[i] - r[i]) <= 1e-8);
    }
    // non-PSD is rejected
    {
        GramMatrix bad(2, GramKind::Limit);
        bad(0, 0) = 1.0;
        bad(1, 1) = -1.0;
        Vector f{1.0, 1.0};
        CHECK_THROWS_AS(kernel_regression_predict(bad, f, 1.0, 2), NumericError);
    }
}

TEST_CASE("loss decay rate dominates 2 lambda_min / n along a flow") {
    const NetworkConfig cfg = make_config(4, 128, 3, 0.5, activation_softplus());
    Params p = init_params(cfg, 19);
    const Dataset ds = generate_dataset(6, 4, 20);
    const std::size_t n = ds.size();
    for (int step = 0; step < 10; ++step) {
        const auto caches = forward_all(cfg, p, ds);
        const KernelSnapshot snap = empirical_ntk_from_caches(cfg, p, caches);
        Vector r(n);
        double rr = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            r[b] = dot(p.a, caches[b].x[cfg.L]) - ds.labels[b];
            rr += r[b] * r[b];
        }
        const Vector kr = matvec(snap.K2.data, r);
        const double rate = 2.0 * dot(r, kr) / (static_cast<double>(n) * rr);
        CHECK(rate >= 2.0 * snap.lambda_min / static_cast<double>(n) - 1e-6);
        p = integrate_step(cfg, p, ds, 0.05, Scheme::Rk4);
    }
}
