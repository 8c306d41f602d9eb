#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "nthlab/linalg.hpp"
#include "nthlab/rng.hpp"

using namespace nthlab;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (double& x : m.data) x = scale * rng.normal();
    return m;
}

// orthogonal factor by Gram-Schmidt on a random Gaussian matrix
Matrix random_orthogonal(std::size_t n, Rng& rng) {
    Matrix q = random_matrix(n, n, rng);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t k = 0; k < j; ++k) {
            double proj = 0.0;
            for (std::size_t i = 0; i < n; ++i) proj += q(i, j) * q(i, k);
            for (std::size_t i = 0; i < n; ++i) q(i, j) -= proj * q(i, k);
        }
        double nn = 0.0;
        for (std::size_t i = 0; i < n; ++i) nn += q(i, j) * q(i, j);
        nn = std::sqrt(nn);
        for (std::size_t i = 0; i < n; ++i) q(i, j) /= nn;
    }
    return q;
}

} // namespace

TEST_CASE("matvec basics") {
    Matrix eye = Matrix::identity(3);
    Vector v{1.0, 2.0, 3.0};
    CHECK(matvec(eye, v).data == std::vector<double>{1.0, 2.0, 3.0});

    Matrix zero(3, 3);
    for (double x : matvec(zero, v).data) CHECK(x == 0.0);

    Matrix a(2, 2);
    a(0, 0) = 1; a(0, 1) = 2; a(1, 0) = 3; a(1, 1) = 4;
    Vector ones{1.0, 1.0};
    const Vector out = matvec(a, ones);
    CHECK(out[0] == 3.0);
    CHECK(out[1] == 7.0);

    CHECK_THROWS_AS(matvec(a, v), DimensionError);
}

TEST_CASE("matvec_transpose agrees with explicit transpose") {
    Rng rng(3);
    Matrix a = random_matrix(7, 5, rng);
    Vector v = gaussian_vector(7, rng);
    const Vector lhs = matvec_transpose(a, v);
    const Vector rhs = matvec(transpose(a), v);
    for (std::size_t i = 0; i < 5; ++i) CHECK(lhs[i] == Catch::Approx(rhs[i]).margin(1e-14));
}

TEST_CASE("spectral norm: identity and diagonal") {
    CHECK(spectral_norm(Matrix::identity(8)) == Catch::Approx(1.0).epsilon(1e-10));
    Matrix d(2, 2);
    d(0, 0) = 3.0;
    d(1, 1) = -5.0;
    CHECK(spectral_norm(d) == Catch::Approx(5.0).epsilon(1e-10));
    CHECK(spectral_norm(Matrix(4, 4)) == 0.0);
}

TEST_CASE("spectral norm of a Gaussian matrix stays below 3 sqrt(m)") {
    const std::size_t m = 256;
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed);
        Matrix w = gaussian_matrix(m, m, rng);
        const double s = spectral_norm(w, 1e-6, 2000);
        CHECK(s / std::sqrt(static_cast<double>(m)) <= 3.0);
        CHECK(s / std::sqrt(static_cast<double>(m)) >= 1.5);
    }
}

TEST_CASE("two-to-infinity norm") {
    CHECK(two_to_infinity_norm(Matrix::identity(6)) == 1.0);
    Matrix row(1, 2);
    row(0, 0) = 3.0;
    row(0, 1) = 4.0;
    CHECK(two_to_infinity_norm(row) == Catch::Approx(5.0));

    // sub-Gaussian max oracle: 3 sqrt(2 ln 2m) bounds the max row norm
    // deviation for standard Gaussian entries
    const std::size_t m = 1024;
    const double bound = 3.0 * std::sqrt(2.0 * std::log(2.0 * static_cast<double>(m)));
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed * 11);
        Matrix w = gaussian_matrix(m, m, rng);
        CHECK(two_to_infinity_norm(w) / std::sqrt(static_cast<double>(m)) <= bound);
    }
}

TEST_CASE("sym_eig_min: diagonal, 2x2, rank deficiency") {
    Matrix d(3, 3);
    d(0, 0) = 2.0; d(1, 1) = 5.0; d(2, 2) = 9.0;
    CHECK(sym_eig_min(d) == Catch::Approx(2.0));

    Matrix a(2, 2);
    a(0, 0) = 2.0; a(0, 1) = 1.0; a(1, 0) = 1.0; a(1, 1) = 2.0;
    // characteristic polynomial (2-l)^2 - 1 = 0 -> l in {1, 3}
    CHECK(sym_eig_min(a) == Catch::Approx(1.0).margin(1e-12));

    Rng rng(5);
    Vector v = gaussian_vector(4, rng);
    Matrix r1(4, 4);
    add_outer(r1, 1.0, v, v);
    CHECK(std::abs(sym_eig_min(r1)) < 1e-10);
}

TEST_CASE("asymmetric input to eig is rejected with the asymmetry reported") {
    Matrix a(2, 2);
    a(0, 1) = 1.0;
    CHECK_THROWS_WITH(sym_eig_min(a), Catch::Matchers::ContainsSubstring("asymmetric"));
}

TEST_CASE("eig of Q D Q^T recovers min(D)") {
    Rng rng(17);
    for (int rep = 0; rep < 5; ++rep) {
        const std::size_t n = 6;
        Matrix q = random_orthogonal(n, rng);
        Vector d = gaussian_vector(n, rng);
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                double s = 0.0;
                for (std::size_t k = 0; k < n; ++k) s += q(i, k) * d[k] * q(j, k);
                m(i, j) = s;
            }
        // symmetrize away roundoff before the strict symmetry check
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) {
                const double v = 0.5 * (m(i, j) + m(j, i));
                m(i, j) = v;
                m(j, i) = v;
            }
        double dmin = d[0];
        for (std::size_t k = 1; k < n; ++k) dmin = std::min(dmin, d[k]);
        CHECK(sym_eig_min(m) == Catch::Approx(dmin).margin(1e-10));
    }
}

TEST_CASE("norm ordering ||A||_F >= ||A||_2->2 >= ||A||_2->inf") {
    Rng rng(23);
    for (int rep = 0; rep < 50; ++rep) {
        const std::size_t r = 2 + rng.next_u64() % 6;
        const std::size_t c = 2 + rng.next_u64() % 6;
        Matrix a = random_matrix(r, c, rng, 0.5 + rng.uniform01());
        const double fro = frobenius_norm(a);
        const double spec = spectral_norm(a, 1e-10, 5000);
        const double t2i = two_to_infinity_norm(a);
        CHECK(fro >= spec - 1e-8 * fro);
        CHECK(spec >= t2i - 1e-8 * std::max(t2i, 1.0));
    }
}

TEST_CASE("spectral norm is transpose invariant") {
    Rng rng(31);
    for (int rep = 0; rep < 10; ++rep) {
        Matrix a = random_matrix(5 + rep % 3, 4 + rep % 4, rng);
        CHECK(spectral_norm(a) == Catch::Approx(spectral_norm(transpose(a))).epsilon(1e-8));
    }
}

TEST_CASE("gaussian sampling is reproducible and has the right moments") {
    {
        Rng r1(99), r2(99);
        Matrix a = gaussian_matrix(8, 8, r1);
        Matrix b = gaussian_matrix(8, 8, r2);
        CHECK(a.data == b.data);
        Rng r3(100);
        Matrix c = gaussian_matrix(8, 8, r3);
        CHECK(a.data != c.data);
    }
    {
        const std::size_t n = 1'000'000;
        Rng rng(7);
        double mean = 0.0, m2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double z = rng.normal();
            mean += z;
            m2 += z * z;
        }
        mean /= static_cast<double>(n);
        m2 /= static_cast<double>(n);
        CHECK(std::abs(mean) <= 4.0 / std::sqrt(static_cast<double>(n))); // CLT bound
        CHECK(std::abs(m2 - mean * mean - 1.0) <= 0.01);                  // moment oracle
    }
}

TEST_CASE("cholesky_2x2") {
    const Cholesky2x2 l = cholesky_2x2(4.0, 2.0, 2.0);
    CHECK(l.l11 == Catch::Approx(2.0));
    CHECK(l.l21 == Catch::Approx(1.0));
    CHECK(l.l22 == Catch::Approx(1.0));
    CHECK_THROWS_AS(cholesky_2x2(1.0, 2.0, 1.0), NumericError); // det < 0
    CHECK_THROWS_AS(cholesky_2x2(-1.0, 0.0, 1.0), NumericError);
    CHECK_NOTHROW(cholesky_2x2(1.0, 1.0, 1.0 - 1e-13)); // within tolerance
}
