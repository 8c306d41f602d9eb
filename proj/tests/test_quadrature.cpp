#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "nthlab/activation.hpp"
#include "nthlab/quadrature.hpp"
#include "nthlab/rng.hpp"

using namespace nthlab;

TEST_CASE("gauss1d expectations of polynomials are exact") {
    CHECK(gauss1d_expect([](double) { return 1.0; }, 1.0) == Catch::Approx(1.0).epsilon(1e-13));
    CHECK(gauss1d_expect([](double x) { return x; }, 1.0) == Catch::Approx(0.0).margin(1e-13));
    CHECK(gauss1d_expect([](double x) { return x * x; }, 1.0) == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(gauss1d_expect([](double x) { return x * x; }, 2.5) == Catch::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("gauss2d: identity pair reads off the covariance") {
    auto id = [](double x) { return x; };
    for (double rho : {-0.9, -0.3, 0.0, 0.4, 0.8}) {
        CHECK(gauss2d_expect(1.0, rho, 1.0, id, id) == Catch::Approx(rho).margin(1e-12));
    }
    // scaled marginals
    CHECK(gauss2d_expect(4.0, 1.0, 1.0, id, id) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("gauss2d: independence factorizes") {
    const Activation sp = activation_softplus();
    auto f = [&](double x) { return sp.value(x); };
    const double joint = gauss2d_expect(1.0, 0.0, 1.0, f, f);
    const double marginal = gauss1d_expect(f, 1.0);
    CHECK(joint == Catch::Approx(marginal * marginal).epsilon(1e-11));
}

TEST_CASE("gauss2d: softplus at rho=0.5 matches the Monte-Carlo oracle") {
    const Activation sp = activation_softplus();
    auto f = [&](double x) { return sp.value(x); };
    const double quad = gauss2d_expect(1.0, 0.5, 1.0, f, f);

    // frozen from a 1e7-sample run (seed 777): 0.779782383218
    CHECK(quad == Catch::Approx(0.779782383218).epsilon(5e-4));

    // live oracle, same protocol; 4-significant-digit agreement
    Rng rng(777);
    double acc = 0.0;
    const std::size_t n = 10'000'000;
    const double c = std::sqrt(0.75);
    for (std::size_t i = 0; i < n; ++i) {
        const double z1 = rng.normal(), z2 = rng.normal();
        acc += sp.value(z1) * sp.value(0.5 * z1 + c * z2);
    }
    CHECK(quad == Catch::Approx(acc / static_cast<double>(n)).epsilon(5e-4));
}

TEST_CASE("gauss2d: comonotone limit at |rho| ~ 1") {
    auto id = [](double x) { return x; };
    CHECK(gauss2d_expect(1.0, 1.0, 1.0, id, id) == Catch::Approx(1.0).epsilon(1e-12));
    CHECK(gauss2d_expect(1.0, -(1.0 - 1e-12), 1.0, id, id) == Catch::Approx(-1.0).epsilon(1e-9));
    const Activation sp = activation_softplus();
    auto f = [&](double x) { return sp.value(x); };
    const double lim = gauss2d_expect(1.0, 1.0, 1.0, f, f);
    const double sq = gauss1d_expect([&](double x) { const double s = sp.value(x); return s * s; }, 1.0);
    CHECK(lim == Catch::Approx(sq).epsilon(1e-10));
}

TEST_CASE("gauss2d: correlation clamping tolerance") {
    auto id = [](double x) { return x; };
    CHECK_NOTHROW(gauss2d_expect(1.0, 1.0 + 5e-13, 1.0, id, id));
    CHECK_THROWS_AS(gauss2d_expect(1.0, 1.0 + 1e-9, 1.0, id, id), NumericError);
    CHECK_THROWS_AS(gauss2d_expect(-1.0, 0.0, 1.0, id, id), NumericError);
}

TEST_CASE("gauss2d: degenerate zero-variance margins") {
    const Activation sp = activation_softplus();
    auto f = [&](double x) { return sp.value(x); };
    const double v = gauss2d_expect(0.0, 0.0, 1.0, f, f);
    CHECK(v == Catch::Approx(sp.value(0.0) * gauss1d_expect(f, 1.0)).epsilon(1e-11));
}

TEST_CASE("60- and 90-node grids agree") {
    const Activation sp = activation_softplus();
    auto f = [&](double x) { return sp.value(x); };
    for (double rho : {-0.7, 0.0, 0.3, 0.95}) {
        const double a = gauss2d_expect(1.3, rho, 0.8, f, f, 60);
        const double b = gauss2d_expect(1.3, rho, 0.8, f, f, 90);
        CHECK(std::abs(a - b) <= 1e-9);
    }
}
