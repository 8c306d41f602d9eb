#pragma once

// The finite-width ResNet: configuration, Xavier initialization, datasets
// under the unit-norm/non-parallel assumptions, and the forward map
//   x^[1] = sqrt(c_sigma/m) sigma(W^[1] x),
//   x^[l] = x^[l-1] + (c_res/(L sqrt(m))) sigma(W^[l] x^[l-1]),  2 <= l <= L,
//   f(x, theta) = a^T x^[L].

#include <cmath>
#include <iostream>
#include <vector>

#include "nthlab/activation.hpp"
#include "nthlab/errors.hpp"
#include "nthlab/linalg.hpp"
#include "nthlab/rng.hpp"

namespace nthlab {

struct NetworkConfig {
    std::size_t d = 4;   // input dimension
    std::size_t m = 64;  // width
    std::size_t L = 3;   // depth, >= 2
    double c_res = 0.5;  // residual constant in (0,1)
    Activation activation = activation_softplus();
    double c_sigma = 0.0; // stored once; see make_config
};

inline NetworkConfig make_config(std::size_t d, std::size_t m, std::size_t L,
                                 double c_res, const Activation& act) {
    if (L < 2) throw ConfigError("NetworkConfig: L must be >= 2, got " + std::to_string(L));
    if (!(c_res > 0.0 && c_res < 1.0))
        throw ConfigError("NetworkConfig: c_res must be in (0,1), got " + std::to_string(c_res));
    if (d == 0 || m == 0) throw ConfigError("NetworkConfig: d and m must be positive");
    NetworkConfig cfg;
    cfg.d = d;
    cfg.m = m;
    cfg.L = L;
    cfg.c_res = c_res;
    cfg.activation = act;
    cfg.c_sigma = compute_c_sigma(act);
    return cfg;
}

// Full parameter vector theta: W^[1] (m x d), W^[2..L] (m x m each), a (m).
struct Params {
    Matrix W1;
    std::vector<Matrix> W; // W[k] is the layer-(k+2) matrix
    Vector a;

    const Matrix& weight(std::size_t l) const { return l == 1 ? W1 : W[l - 2]; }
    Matrix& weight(std::size_t l) { return l == 1 ? W1 : W[l - 2]; }
};

// All blocks i.i.d. N(0,1), drawn in the fixed order W^[1], W^[2..L], a so
// the result is fully determined by (seed, shape).
inline Params init_params(const NetworkConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    Params p;
    p.W1 = gaussian_matrix(cfg.m, cfg.d, rng);
    p.W.reserve(cfg.L - 1);
    for (std::size_t l = 2; l <= cfg.L; ++l) p.W.push_back(gaussian_matrix(cfg.m, cfg.m, rng));
    p.a = gaussian_vector(cfg.m, rng);
    return p;
}

struct Dataset {
    std::vector<Vector> inputs; // each unit-norm, length d
    std::vector<double> labels; // |y| <= 1
    std::size_t size() const { return inputs.size(); }
};

inline void validate_dataset(const Dataset& ds) {
    const std::size_t n = ds.size();
    if (ds.labels.size() != n) throw ConfigError("dataset: inputs/labels length mismatch");
    for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(norm2(ds.inputs[i]) - 1.0) > 1e-12)
            throw ConfigError("dataset: input " + std::to_string(i) + " is not unit norm");
        if (std::abs(ds.labels[i]) > 1.0)
            throw ConfigError("dataset: |label " + std::to_string(i) + "| > 1");
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(dot(ds.inputs[i], ds.inputs[j])) >= 1.0 - 1e-9)
                throw ConfigError("dataset: inputs " + std::to_string(i) + "," +
                                  std::to_string(j) + " are (nearly) parallel");
}

// Unit vectors drawn uniformly (normalized Gaussians); candidates within
// 1e-6 of parallel to an accepted input are rejected and redrawn, keeping
// Assumption-style non-parallelism with margin. Labels uniform in [-1,1].
inline Dataset generate_dataset(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Dataset ds;
    ds.inputs.reserve(n);
    std::size_t attempts = 0;
    while (ds.inputs.size() < n) {
        if (++attempts > 1000 * n + 1000)
            throw NumericError("generate_dataset: rejection sampling stalled (n too large for d?)");
        Vector v = gaussian_vector(d, rng);
        const double nv = norm2(v);
        if (nv < 1e-12) continue;
        scale(v, 1.0 / nv);
        bool ok = true;
        for (const Vector& u : ds.inputs)
            if (std::abs(dot(u, v)) >= 1.0 - 1e-6) { ok = false; break; }
        if (ok) ds.inputs.push_back(std::move(v));
    }
    ds.labels.reserve(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels.push_back(rng.uniform_sym());
    return ds;
}

// Per-sample layer outputs and pre-activation data from one forward pass.
// x[0] is the input (length d); x[l], z[l], sprime[l] have length m for
// l = 1..L, with sprime = sigma'(z) entrywise.
struct ForwardCache {
    std::vector<Vector> x;
    std::vector<Vector> z;
    std::vector<Vector> sprime;
};

namespace detail {
inline void check_layer_finite(const Vector& v, std::size_t layer) {
    if (!all_finite(v))
        throw NumericError("forward: non-finite value at layer " + std::to_string(layer));
}
} // namespace detail

inline ForwardCache forward(const NetworkConfig& cfg, const Params& params, const Vector& input) {
    if (input.size() != cfg.d)
        throw DimensionError("forward: input length " + std::to_string(input.size()) +
                             ", expected d=" + std::to_string(cfg.d));
    if (std::abs(norm2(input) - 1.0) > 1e-9)
        std::cerr << "[nthlab] warning: forward input has norm " << norm2(input)
                  << " (expected 1)\n";

    ForwardCache cache;
    cache.x.resize(cfg.L + 1);
    cache.z.resize(cfg.L + 1);
    cache.sprime.resize(cfg.L + 1);
    cache.x[0] = input;

    const double s1 = std::sqrt(cfg.c_sigma / static_cast<double>(cfg.m));
    cache.z[1] = matvec(params.W1, input);
    cache.x[1] = Vector(cfg.m);
    cache.sprime[1] = Vector(cfg.m);
    for (std::size_t i = 0; i < cfg.m; ++i) {
        cache.x[1][i] = s1 * cfg.activation.value(cache.z[1][i]);
        cache.sprime[1][i] = cfg.activation.d1(cache.z[1][i]);
    }
    detail::check_layer_finite(cache.x[1], 1);

    const double sres = cfg.c_res / (static_cast<double>(cfg.L) * std::sqrt(static_cast<double>(cfg.m)));
    for (std::size_t l = 2; l <= cfg.L; ++l) {
        cache.z[l] = matvec(params.weight(l), cache.x[l - 1]);
        cache.x[l] = cache.x[l - 1];
        cache.sprime[l] = Vector(cfg.m);
        for (std::size_t i = 0; i < cfg.m; ++i) {
            cache.x[l][i] += sres * cfg.activation.value(cache.z[l][i]);
            cache.sprime[l][i] = cfg.activation.d1(cache.z[l][i]);
        }
        detail::check_layer_finite(cache.x[l], l);
    }
    return cache;
}

inline double network_output(const ForwardCache& cache, const Params& params) {
    return dot(params.a, cache.x.back());
}

inline double network_output(const NetworkConfig& cfg, const Params& params, const Vector& input) {
    return network_output(forward(cfg, params, input), params);
}

// Plain feedforward contrast stub: x^[l] = sqrt(c_sigma/m) sigma(W x^[l-1])
// at every layer, no skip connection. Returns the layer outputs only.
inline std::vector<Vector> forward_feedforward(const NetworkConfig& cfg, const Params& params,
                                               const Vector& input) {
    std::vector<Vector> x(cfg.L + 1);
    x[0] = input;
    const double s = std::sqrt(cfg.c_sigma / static_cast<double>(cfg.m));
    for (std::size_t l = 1; l <= cfg.L; ++l) {
        Vector z = matvec(params.weight(l), x[l - 1]);
        x[l] = Vector(cfg.m);
        for (std::size_t i = 0; i < cfg.m; ++i) x[l][i] = s * cfg.activation.value(z[i]);
        detail::check_layer_finite(x[l], l);
    }
    return x;
}

} // namespace nthlab
