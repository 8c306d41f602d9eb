#pragma once

// The experiment harness behind the nth-lab CLI: seeded sweeps over
// (m, L, seed), trajectory recording along gradient flows, and the seven
// commands. Sweep cells are embarrassingly parallel; results are stored by
// cell index and written in (m, L, seed) order, so output is independent of
// the worker count.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

#include "nthlab/dynamics.hpp"
#include "nthlab/experiment_io.hpp"
#include "nthlab/experiment_spec.hpp"
#include "nthlab/kernel.hpp"
#include "nthlab/limitgram.hpp"
#include "nthlab/model.hpp"

namespace nthlab {

// exit codes shared by CLI and tests
inline constexpr int kExitOk = 0;
inline constexpr int kExitCheckFailed = 2;
inline constexpr int kExitNumeric = 3;
inline constexpr int kExitConfig = 4;

// NTH_LAB_SEED overrides the spec's base seed; the effective value is
// echoed into spec.raw so every output records it.
inline void apply_env_overrides(ExperimentSpec& spec) {
    if (const char* env = std::getenv("NTH_LAB_SEED")) {
        spec.base_seed = std::strtoull(env, nullptr, 10);
        spec.raw["base_seed"] = spec.base_seed;
    }
}

// ---------------------------------------------------------------------------
// Parallel sweep helper
// ---------------------------------------------------------------------------

template <typename Fn>
void run_parallel(std::size_t n_items, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n_items));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n_items; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n_items) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    if (first_error) std::rethrow_exception(first_error);
}

// ---------------------------------------------------------------------------
// Small statistics helpers
// ---------------------------------------------------------------------------

inline double median_of(std::vector<double> v) { return detail::median_of(std::move(v)); }

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < x.size(); ++i) {
        lx.push_back(std::log(x[i]));
        ly.push_back(std::log(std::max(y[i], 1e-300)));
    }
    return detail::least_squares_slope(lx, ly);
}

// 95% percentile bootstrap over seeds for a log-log slope. values[mi][si]
// holds the measurement for m_list[mi] under seed si; each resample draws
// seeds with replacement and refits the slope of the per-m geometric means
// (the natural aggregator for a least-squares fit in log space; the per-seed
// drifts are heavy-tailed and the geometric mean uses every cell).
struct SlopeFit {
    double slope = 0.0;
    double ci_lo = 0.0;
    double ci_hi = 0.0;
};

inline SlopeFit bootstrap_slope(const std::vector<std::size_t>& m_list,
                                const std::vector<std::vector<double>>& values,
                                std::size_t n_boot = 1000, std::uint64_t seed = 99991) {
    const std::size_t n_m = m_list.size();
    const std::size_t n_seeds = values.at(0).size();
    std::vector<double> ms(n_m);
    for (std::size_t i = 0; i < n_m; ++i) ms[i] = static_cast<double>(m_list[i]);

    auto fit = [&](const std::vector<std::size_t>& pick) {
        std::vector<double> med(n_m);
        for (std::size_t mi = 0; mi < n_m; ++mi) {
            double acc = 0.0;
            for (std::size_t s : pick) acc += std::log(std::max(values[mi][s], 1e-300));
            med[mi] = std::exp(acc / static_cast<double>(pick.size()));
        }
        return loglog_slope(ms, med);
    };

    std::vector<std::size_t> all(n_seeds);
    for (std::size_t i = 0; i < n_seeds; ++i) all[i] = i;
    SlopeFit out;
    out.slope = fit(all);

    Rng rng(seed);
    std::vector<double> slopes;
    slopes.reserve(n_boot);
    std::vector<std::size_t> pick(n_seeds);
    for (std::size_t b = 0; b < n_boot; ++b) {
        for (std::size_t i = 0; i < n_seeds; ++i)
            pick[i] = static_cast<std::size_t>(rng.next_u64() % n_seeds);
        slopes.push_back(fit(pick));
    }
    std::sort(slopes.begin(), slopes.end());
    out.ci_lo = slopes[static_cast<std::size_t>(0.025 * static_cast<double>(n_boot - 1))];
    out.ci_hi = slopes[static_cast<std::size_t>(0.975 * static_cast<double>(n_boot - 1))];
    return out;
}

// ---------------------------------------------------------------------------
// Trajectory recording along one gradient flow
// ---------------------------------------------------------------------------

struct Trajectory {
    std::vector<double> times;
    std::vector<double> losses;
    std::vector<double> lambda_mins;
    std::vector<double> rates;            // (2/n) r^T K2 r / r^T r
    std::vector<double> kernel_drift_inf; // |K2(t) - K2(0)|_inf (full kernel)
    std::vector<double> kernel_drift_fro;
    std::vector<double> top_drift_inf;    // |G^[L+1](t) - G^[L+1](0)|_inf
    std::vector<double> param_drifts;     // max block-relative Frobenius drift
    std::vector<double> xis;
};

struct FlowRun {
    Trajectory traj;
    Params params_final;
    KernelSnapshot snap0;
    double h = 0.0;
    std::size_t steps = 0;
    bool any_loss_increase = false;
};

struct FlowOptions {
    double T = 5.0;
    double step = 0.0; // 0: auto h = 1e-3 * n / lambda_min(K2(0))
    Scheme scheme = Scheme::Rk4;
    std::size_t records = 32;
    bool with_xi = true;
    double xi_tol = 1e-4;
};

inline FlowRun run_flow(const NetworkConfig& cfg, const Dataset& ds, const Params& params0,
                        const FlowOptions& opt) {
    const std::size_t n = ds.size();
    FlowRun run;
    run.snap0 = empirical_ntk(cfg, params0, ds, 0.0);

    double h = opt.step;
    if (h <= 0.0) {
        h = 1e-3 * static_cast<double>(n) / std::max(run.snap0.lambda_min, 1e-8);
        // rk4 stability cap: the fastest kernel mode decays at 2 lambda_max/n
        // <= 2 trace/n per unit time, so keep h * that below 1
        const double cap = 0.5 * static_cast<double>(n) / std::max(run.snap0.K2.trace(), 1e-8);
        h = std::min(h, cap);
    }
    const std::size_t steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(opt.T / h - 1e-9)));
    h = opt.T / static_cast<double>(steps);
    run.h = h;
    run.steps = steps;
    const std::size_t stride = std::max<std::size_t>(1, steps / std::max<std::size_t>(1, opt.records - 1));

    Params params = params0;
    double prev_loss = 0.0;
    bool have_prev = false;

    auto record = [&](double t) {
        std::vector<ForwardCache> caches = forward_all(cfg, params, ds);
        KernelSnapshot snap = (t == 0.0)
                                  ? run.snap0
                                  : empirical_ntk_from_caches(cfg, params, caches, t);
        Vector r(n);
        double rr = 0.0;
        for (std::size_t b = 0; b < n; ++b) {
            r[b] = dot(params.a, caches[b].x[cfg.L]) - ds.labels[b];
            rr += r[b] * r[b];
        }
        const double loss = rr / (2.0 * static_cast<double>(n));
        if (!std::isfinite(loss) || loss > 1e12)
            throw NumericError("flow blow-up at t=" + std::to_string(t) +
                               ", loss=" + std::to_string(loss));
        double rate = 0.0;
        if (rr > 0.0) {
            const Vector kr = matvec(snap.K2.data, r);
            rate = 2.0 * dot(r, kr) / (static_cast<double>(n) * rr);
        }
        run.traj.times.push_back(t);
        run.traj.losses.push_back(loss);
        run.traj.lambda_mins.push_back(snap.lambda_min);
        run.traj.rates.push_back(rate);
        run.traj.kernel_drift_inf.push_back(gram_diff_inf(snap.K2, run.snap0.K2));
        run.traj.kernel_drift_fro.push_back(gram_diff_fro(snap.K2, run.snap0.K2));
        run.traj.top_drift_inf.push_back(
            gram_diff_inf(snap.per_layer[cfg.L + 1], run.snap0.per_layer[cfg.L + 1]));
        run.traj.param_drifts.push_back(param_drift(params, params0));
        run.traj.xis.push_back(opt.with_xi ? spectral_diag(cfg, params, opt.xi_tol).xi : 0.0);

        if (have_prev && loss > prev_loss + 1e-12) run.any_loss_increase = true;
        prev_loss = loss;
        have_prev = true;
    };

    record(0.0);
    for (std::size_t k = 1; k <= steps; ++k) {
        params = integrate_step(cfg, params, ds, h, opt.scheme);
        if (k % stride == 0 || k == steps) record(static_cast<double>(k) * h);
    }
    run.params_final = std::move(params);
    return run;
}

// ---------------------------------------------------------------------------
// grad-check
// ---------------------------------------------------------------------------

struct GradCorruption {
    std::string block; // "W1", "W2", ..., "a"
    double amount = 1e-3;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_block;
    std::size_t worst_index = 0;
    std::size_t worst_config = 0;
    bool pass = false;
};

namespace detail {
inline double& param_entry(Params& p, const std::string& block, std::size_t index) {
    if (block == "W1") return p.W1.data[index % p.W1.data.size()];
    if (block == "a") return p.a.data[index % p.a.size()];
    const std::size_t l = static_cast<std::size_t>(std::stoul(block.substr(1)));
    Matrix& w = p.weight(l);
    return w.data[index % w.data.size()];
}

inline double grad_entry(const GradTheta& g, const std::string& block, std::size_t index) {
    if (block == "W1") return g.gW1.data[index % g.gW1.data.size()];
    if (block == "a") return g.ga.data[index % g.ga.size()];
    const std::size_t l = static_cast<std::size_t>(std::stoul(block.substr(1)));
    const Matrix& w = g.gW[l - 2];
    return w.data[index % w.data.size()];
}
} // namespace detail

// Central finite differences (h = 1e-5) on randomly probed coordinates of
// every block, against the analytic gradients of both f and R_S. The
// optional corruption hook offsets the analytic value inside one block so
// the fault-injection test can verify the report names that block.
inline GradCheckReport run_grad_check(std::size_t probes_per_config = 200,
                                      const std::optional<GradCorruption>& corrupt = std::nullopt) {
    struct Case {
        Activation act;
        double c_res;
        std::uint64_t seed;
    };
    const std::vector<Case> cases = {
        {activation_softplus(), 0.5, 101}, {activation_softplus(), 0.9, 202},
        {activation_sigmoid(), 0.5, 303},  {activation_identity(), 0.5, 404},
        {activation_softplus(), 0.1, 505},
    };
    const double h = 1e-5;
    GradCheckReport rep;

    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
        const NetworkConfig cfg = make_config(4, 16, 3, cases[ci].c_res, cases[ci].act);
        const Dataset ds = generate_dataset(5, 4, cases[ci].seed);
        const Params params = init_params(cfg, cases[ci].seed + 1);
        Rng probe_rng(cases[ci].seed + 2);

        std::vector<std::string> blocks = {"W1", "a"};
        for (std::size_t l = 2; l <= cfg.L; ++l) blocks.push_back("W" + std::to_string(l));

        // four of five probes target f on one sample; the fifth targets R_S
        for (std::size_t p = 0; p < probes_per_config; ++p) {
            const std::string block = blocks[p % blocks.size()];
            const std::size_t index = static_cast<std::size_t>(probe_rng.next_u64() % (1u << 20));
            const bool probe_loss = (p % 5 == 4);
            const std::size_t sample = probe_rng.next_u64() % ds.size();

            double analytic;
            if (probe_loss) {
                analytic = detail::grad_entry(grad_loss(cfg, params, ds).grad, block, index);
            } else {
                const ForwardCache cache = forward(cfg, params, ds.inputs[sample]);
                analytic = detail::grad_entry(grad_theta_f(cfg, params, cache), block, index);
            }
            if (corrupt && corrupt->block == block) analytic += corrupt->amount;

            Params bumped = params;
            double& slot = detail::param_entry(bumped, block, index);
            const double saved = slot;
            slot = saved + h;
            const double f_plus = probe_loss ? loss_value(cfg, bumped, ds)
                                             : network_output(cfg, bumped, ds.inputs[sample]);
            slot = saved - h;
            const double f_minus = probe_loss ? loss_value(cfg, bumped, ds)
                                              : network_output(cfg, bumped, ds.inputs[sample]);
            const double fd = (f_plus - f_minus) / (2.0 * h);
            const double rel = std::abs(analytic - fd) / (std::abs(analytic) + 1e-12);
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_block = block;
                rep.worst_index = index;
                rep.worst_config = ci;
            }
        }
    }
    rep.pass = rep.max_rel_err <= 1e-6;
    return rep;
}

inline int cmd_grad_check(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                          const std::optional<GradCorruption>& corrupt = std::nullopt) {
    const GradCheckReport rep = run_grad_check(200, corrupt);
    json doc = provenance(spec);
    doc["max_rel_err"] = rep.max_rel_err;
    doc["worst_block"] = rep.worst_block;
    doc["worst_index"] = rep.worst_index;
    doc["worst_config"] = rep.worst_config;
    doc["pass"] = rep.pass;
    write_json(out_dir / "grad_check.json", doc);
    return rep.pass ? kExitOk : kExitCheckFailed;
}

// ---------------------------------------------------------------------------
// flow
// ---------------------------------------------------------------------------

inline FlowOptions flow_options_from_spec(const ExperimentSpec& spec) {
    FlowOptions opt;
    opt.T = spec.T;
    opt.step = spec.step;
    opt.scheme = (spec.scheme == "euler") ? Scheme::Euler : Scheme::Rk4;
    opt.records = spec.records;
    return opt;
}

inline int cmd_flow(const ExperimentSpec& spec, const std::filesystem::path& out_dir) {
    const NetworkConfig cfg = config_from_spec(spec);
    const Dataset ds = dataset_from_spec(spec);
    const Params params0 = init_params(cfg, spec.effective_seed(0));
    FlowRun run;
    try {
        run = run_flow(cfg, ds, params0, flow_options_from_spec(spec));
    } catch (const NumericError& e) {
        json dump = provenance(spec);
        dump["error"] = e.what();
        write_json(out_dir / "flow_last_state.json", dump);
        throw;
    }

    CsvWriter csv(out_dir / "flow_trajectory.csv", spec,
                  {"t", "loss", "lambda_min", "rate", "kernel_drift_inf", "param_drift_fro",
                   "xi"});
    for (std::size_t k = 0; k < run.traj.times.size(); ++k)
        csv.row({g17(run.traj.times[k]), g17(run.traj.losses[k]), g17(run.traj.lambda_mins[k]),
                 g17(run.traj.rates[k]), g17(run.traj.kernel_drift_inf[k]),
                 g17(run.traj.param_drifts[k]), g17(run.traj.xis[k])});

    // fitted exponential decay constant: -slope of ln(loss) over the records
    std::vector<double> ts, lls;
    for (std::size_t k = 0; k < run.traj.times.size(); ++k)
        if (run.traj.losses[k] > 0.0) {
            ts.push_back(run.traj.times[k]);
            lls.push_back(std::log(run.traj.losses[k]));
        }
    const double decay = (ts.size() >= 2) ? -detail::least_squares_slope(ts, lls) : 0.0;

    double lambda_hat = run.traj.lambda_mins[0];
    for (double l : run.traj.lambda_mins) lambda_hat = std::min(lambda_hat, l);

    json doc = provenance(spec);
    doc["h"] = run.h;
    doc["steps"] = run.steps;
    doc["loss_initial"] = run.traj.losses.front();
    doc["loss_final"] = run.traj.losses.back();
    doc["lambda_hat"] = lambda_hat;
    doc["decay_rate_fit"] = decay;
    doc["loss_monotone"] = !run.any_loss_increase;
    write_json(out_dir / "flow_summary.json", doc);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// drift-scan
// ---------------------------------------------------------------------------

struct DriftCell {
    std::size_t m = 0;
    std::uint64_t seed = 0;
    double top_drift = 0.0;    // sup_t |G^[L+1](t) - G^[L+1](0)|_inf
    double full_drift = 0.0;   // sup_t |K2(t) - K2(0)|_inf
    double param_drift = 0.0;  // sup_t max-block relative drift
};

struct DriftScanResult {
    std::vector<DriftCell> cells;
    SlopeFit kernel_slope;
    SlopeFit param_slope;
    bool separation = false;
};

inline DriftScanResult run_drift_scan(const ExperimentSpec& spec, std::size_t threads) {
    std::vector<std::size_t> m_list = spec.m_list;
    if (m_list.empty()) m_list = {128, 256, 512, 1024, 2048};
    if (spec.heavy) m_list.push_back(4096);
    if (m_list.size() < 4) throw ConfigError("drift-scan: need at least 4 widths in m_list");
    const Dataset ds = dataset_from_spec(spec);

    const std::size_t n_seeds = spec.seeds.size();
    std::vector<DriftCell> cells(m_list.size() * n_seeds);
    run_parallel(cells.size(), threads, [&](std::size_t idx) {
        const std::size_t mi = idx / n_seeds;
        const std::size_t si = idx % n_seeds;
        NetworkConfig cfg = config_from_spec(spec);
        cfg.m = m_list[mi];
        const Params params0 = init_params(cfg, spec.effective_seed(si));
        FlowOptions opt = flow_options_from_spec(spec);
        FlowRun run = run_flow(cfg, ds, params0, opt);
        DriftCell& cell = cells[idx];
        cell.m = m_list[mi];
        cell.seed = spec.effective_seed(si);
        for (std::size_t k = 0; k < run.traj.times.size(); ++k) {
            cell.top_drift = std::max(cell.top_drift, run.traj.top_drift_inf[k]);
            cell.full_drift = std::max(cell.full_drift, run.traj.kernel_drift_inf[k]);
            cell.param_drift = std::max(cell.param_drift, run.traj.param_drifts[k]);
        }
    });

    std::vector<std::vector<double>> kernel_vals(m_list.size(), std::vector<double>(n_seeds));
    std::vector<std::vector<double>> param_vals(m_list.size(), std::vector<double>(n_seeds));
    for (std::size_t mi = 0; mi < m_list.size(); ++mi)
        for (std::size_t si = 0; si < n_seeds; ++si) {
            kernel_vals[mi][si] = cells[mi * n_seeds + si].top_drift;
            param_vals[mi][si] = cells[mi * n_seeds + si].param_drift;
        }

    DriftScanResult out;
    out.cells = std::move(cells);
    out.kernel_slope = bootstrap_slope(m_list, kernel_vals);
    out.param_slope = bootstrap_slope(m_list, param_vals);
    out.separation = out.kernel_slope.slope < out.param_slope.slope - 0.2;
    return out;
}

inline int cmd_drift_scan(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                          std::size_t threads) {
    const DriftScanResult res = run_drift_scan(spec, threads);
    CsvWriter csv(out_dir / "drift_scan.csv", spec,
                  {"m", "seed", "kernel_drift_top_inf", "kernel_drift_full_inf",
                   "param_drift_rel"});
    for (const DriftCell& c : res.cells)
        csv.row({std::to_string(c.m), std::to_string(c.seed), g17(c.top_drift),
                 g17(c.full_drift), g17(c.param_drift)});

    json doc = provenance(spec);
    doc["kernel_slope"] = res.kernel_slope.slope;
    doc["kernel_slope_ci"] = {res.kernel_slope.ci_lo, res.kernel_slope.ci_hi};
    doc["param_slope"] = res.param_slope.slope;
    doc["param_slope_ci"] = {res.param_slope.ci_lo, res.param_slope.ci_hi};
    doc["kernel_slope_in_band"] =
        res.kernel_slope.slope >= -1.3 && res.kernel_slope.slope <= -0.7;
    doc["param_slope_in_band"] = res.param_slope.slope >= -0.65 && res.param_slope.slope <= -0.35;
    doc["separation"] = res.separation;
    write_json(out_dir / "drift_summary.json", doc);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// depth-scan
// ---------------------------------------------------------------------------

struct DepthCell {
    std::size_t L = 0;
    std::uint64_t seed = 0;
    double resnet_norm_median = 0.0;
    double stub_norm_median = 0.0;
    double lambda_min0 = 0.0;
    double xi0 = 0.0;
};

struct DepthScanResult {
    std::vector<DepthCell> cells;
    std::vector<std::size_t> L_list;
    std::vector<double> resnet_median; // per L, median over seeds
    std::vector<double> stub_median;
    std::vector<std::size_t> flagged;  // L whose median exceeds 2x the smallest-L median
    bool stub_monotone = false;
};

inline DepthScanResult run_depth_scan(const ExperimentSpec& spec, std::size_t threads) {
    std::vector<std::size_t> L_list = spec.L_list;
    if (L_list.empty()) L_list = {2, 4, 8, 16, 32};
    if (L_list.size() < 4) throw ConfigError("depth-scan: need at least 4 depths in L_list");
    const Dataset ds = dataset_from_spec(spec);
    const std::size_t n_seeds = spec.seeds.size();

    DepthScanResult out;
    out.L_list = L_list;
    out.cells.resize(L_list.size() * n_seeds);
    run_parallel(out.cells.size(), threads, [&](std::size_t idx) {
        const std::size_t li = idx / n_seeds;
        const std::size_t si = idx % n_seeds;
        const NetworkConfig cfg = make_config(spec.d, spec.m, L_list[li], spec.c_res,
                                              activation_from_name(spec.activation));
        const Params params = init_params(cfg, spec.effective_seed(si));
        DepthCell& cell = out.cells[idx];
        cell.L = L_list[li];
        cell.seed = spec.effective_seed(si);

        std::vector<double> rn, sn;
        for (const Vector& x : ds.inputs) {
            rn.push_back(norm2(forward(cfg, params, x).x[cfg.L]));
            sn.push_back(norm2(forward_feedforward(cfg, params, x)[cfg.L]));
        }
        cell.resnet_norm_median = median_of(rn);
        cell.stub_norm_median = median_of(sn);
        cell.lambda_min0 = empirical_ntk(cfg, params, ds).lambda_min;
        cell.xi0 = spectral_diag(cfg, params).xi;
    });

    for (std::size_t li = 0; li < L_list.size(); ++li) {
        std::vector<double> rn, sn;
        for (std::size_t si = 0; si < n_seeds; ++si) {
            rn.push_back(out.cells[li * n_seeds + si].resnet_norm_median);
            sn.push_back(out.cells[li * n_seeds + si].stub_norm_median);
        }
        out.resnet_median.push_back(median_of(rn));
        out.stub_median.push_back(median_of(sn));
    }
    const double base = *std::min_element(out.resnet_median.begin(), out.resnet_median.end());
    for (std::size_t li = 0; li < L_list.size(); ++li)
        if (out.resnet_median[li] > 2.0 * base) out.flagged.push_back(L_list[li]);
    out.stub_monotone = true;
    for (std::size_t li = 0; li + 1 < L_list.size(); ++li)
        if (out.stub_median[li + 1] <= out.stub_median[li]) out.stub_monotone = false;
    return out;
}

inline int cmd_depth_scan(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                          std::size_t threads) {
    const DepthScanResult res = run_depth_scan(spec, threads);
    CsvWriter csv(out_dir / "depth_scan.csv", spec,
                  {"L", "seed", "resnet_norm_median", "stub_norm_median", "lambda_min0", "xi0"});
    for (const DepthCell& c : res.cells)
        csv.row({std::to_string(c.L), std::to_string(c.seed), g17(c.resnet_norm_median),
                 g17(c.stub_norm_median), g17(c.lambda_min0), g17(c.xi0)});

    json doc = provenance(spec);
    doc["L_list"] = res.L_list;
    doc["resnet_norm_median"] = res.resnet_median;
    doc["stub_norm_median"] = res.stub_median;
    doc["flagged_L"] = res.flagged;
    doc["stub_monotone_growth"] = res.stub_monotone;
    write_json(out_dir / "depth_summary.json", doc);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// limit-gram
// ---------------------------------------------------------------------------

inline int cmd_limit_gram(const ExperimentSpec& spec, const std::filesystem::path& out_dir,
                          std::size_t threads) {
    (void)threads; // quadrature stack is cheap; concentration dominates and is seed-serial
    const NetworkConfig cfg = config_from_spec(spec);
    const Dataset ds = dataset_from_spec(spec);
    const LimitKernelStack stack =
        build_limit_stack(ds, cfg.activation, cfg.c_res, cfg.c_sigma, cfg.L);

    json doc = provenance(spec);
    doc["c_sigma"] = cfg.c_sigma;
    doc["lambda0"] = lambda0(stack);
    doc["quad_agreement_60v90"] = stack.quad_agreement;
    {
        json kt = json::array();
        for (std::size_t l = 0; l <= cfg.L; ++l) kt.push_back(gram_to_json(stack.Ktilde[l]));
        doc["Ktilde"] = kt;
        json bt = json::array();
        for (std::size_t l = 1; l <= cfg.L; ++l) bt.push_back(stack.btilde[l].data);
        doc["btilde"] = bt;
    }
    doc["K_L_plus_1"] = gram_to_json(stack.K_L1);
    doc["K_L"] = gram_to_json(stack.K_L);
    doc["lambda_min_K_L_plus_1"] = sym_eig_min(stack.K_L1.data);
    doc["lambda_min_K_L"] = sym_eig_min(stack.K_L.data);
    {
        json h = json::array();
        for (std::size_t l = 1; l <= cfg.L; ++l) h.push_back(stack.hierarchy_eigs[l]);
        doc["hierarchy_eigs"] = h;
    }
    doc["diag_band_c"] = diagonal_band_constant(cfg.activation, cfg.c_sigma, cfg.c_res);

    // Monte-Carlo Definition-3.3 estimate at l = L against the closed form
    {
        const McGram mc = mc_layer_kernel(ds, cfg, stack, cfg.L, spec.m_probe, spec.replicates,
                                          spec.effective_seed(0));
        doc["mc_layer_L"] = {{"m_probe", mc.m_probe},
                             {"replicates", mc.replicates},
                             {"estimate", gram_to_json(mc.estimate)},
                             {"stderr", gram_to_json(mc.stderr_)}};
        double worst_z = 0.0;
        for (std::size_t i = 0; i < mc.estimate.n; ++i)
            for (std::size_t j = i; j < mc.estimate.n; ++j)
                worst_z = std::max(worst_z, std::abs(mc.estimate(i, j) - stack.K_L(i, j)) /
                                                std::max(mc.stderr_(i, j), 1e-300));
        doc["mc_vs_quadrature_worst_z"] = worst_z;
    }

    // initialization concentration
    {
        std::vector<std::size_t> m_list = spec.m_list;
        if (m_list.empty()) {
            m_list = {256, 512, 1024, 2048};
            if (spec.heavy) m_list.push_back(4096);
        }
        std::vector<std::uint64_t> seeds;
        for (std::size_t i = 0; i < spec.seeds.size(); ++i) seeds.push_back(spec.effective_seed(i));
        const ConcentrationReport rep = init_concentration(ds, cfg, stack, m_list, seeds);
        json rows = json::array();
        for (const ConcentrationRow& r : rep.rows)
            rows.push_back({{"m", r.m},
                            {"seed", r.seed},
                            {"gap_G1", r.gap_G1},
                            {"gap_GL", r.gap_GL},
                            {"gap_GL1", r.gap_GL1},
                            {"lambda_min_GL1", r.lambda_min_GL1}});
        doc["init_concentration"] = {{"m_list", rep.m_list},
                                     {"rows", rows},
                                     {"median_gap_GL1", rep.median_gap_GL1},
                                     {"slope_loglog", rep.slope_loglog}};
    }
    write_json(out_dir / "limit_gram.json", doc);
    return kExitOk;
}

// ---------------------------------------------------------------------------
// nth-check
// ---------------------------------------------------------------------------

struct NthCheckPoint {
    double t = 0.0;
    double residual = 0.0;
    double drift_inf = 0.0;
    double relative = 0.0;
    double relative_half = 0.0; // with delta/2
    double shrink = 0.0;        // residual(delta) / residual(delta/2)
};

// Probes the order-2/order-3 hierarchy identity at several times along one
// flow. At each checkpoint the kernel drift is central-differenced with
// rk4 probe steps of +-delta/2 around theta(t) while G^(3) and the
// residuals are evaluated at theta(t) itself.
inline std::vector<NthCheckPoint> run_nth_check(const ExperimentSpec& spec) {
    NetworkConfig cfg = config_from_spec(spec);
    const Dataset ds = dataset_from_spec(spec);
    Params params = init_params(cfg, spec.effective_seed(0));

    std::vector<double> times = spec.check_times;
    if (times.empty())
        for (int k = 0; k < 5; ++k) times.push_back(static_cast<double>(k) * spec.T / 5.0);
    std::sort(times.begin(), times.end());

    const double base_h = (spec.step > 0.0) ? spec.step : 1e-2;
    std::vector<NthCheckPoint> points;
    double t_now = 0.0;
    for (double t_target : times) {
        // advance to the checkpoint
        if (t_target > t_now + 1e-15) {
            const double seg = t_target - t_now;
            const std::size_t steps =
                std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(seg / base_h - 1e-9)));
            const double h = seg / static_cast<double>(steps);
            for (std::size_t k = 0; k < steps; ++k)
                params = integrate_step(cfg, params, ds, h, Scheme::Rk4);
            t_now = t_target;
        }

        const std::vector<ForwardCache> caches = forward_all(cfg, params, ds);
        const G3Tensor g3 = g3_kernel(cfg, params, caches);
        std::vector<double> residuals(ds.size());
        for (std::size_t b = 0; b < ds.size(); ++b)
            residuals[b] = dot(params.a, caches[b].x[cfg.L]) - ds.labels[b];

        auto probe = [&](double delta) {
            const Params minus = integrate_step(cfg, params, ds, -delta / 2.0, Scheme::Rk4);
            const Params plus = integrate_step(cfg, params, ds, delta / 2.0, Scheme::Rk4);
            const KernelSnapshot sm = empirical_ntk(cfg, minus, ds, t_now - delta / 2.0);
            const KernelSnapshot sp = empirical_ntk(cfg, plus, ds, t_now + delta / 2.0);
            return nth_residual(cfg, sm, sp, g3, residuals, delta);
        };
        const NthResidual full = probe(spec.delta);
        const NthResidual half = probe(spec.delta / 2.0);

        NthCheckPoint pt;
        pt.t = t_now;
        pt.residual = full.residual;
        pt.drift_inf = full.drift_inf;
        pt.relative = full.relative;
        pt.relative_half = half.relative;
        pt.shrink = full.residual / std::max(half.residual, 1e-300);
        points.push_back(pt);
    }
    return points;
}

inline int cmd_nth_check(const ExperimentSpec& spec, const std::filesystem::path& out_dir) {
    const std::vector<NthCheckPoint> points = run_nth_check(spec);
    bool pass = true;
    for (const NthCheckPoint& p : points)
        if (p.relative > 5e-2 || p.shrink < 2.0) pass = false;

    json doc = provenance(spec);
    doc["delta"] = spec.delta;
    json rows = json::array();
    for (const NthCheckPoint& p : points)
        rows.push_back({{"t", p.t},
                        {"residual", p.residual},
                        {"drift_inf", p.drift_inf},
                        {"relative", p.relative},
                        {"relative_half_delta", p.relative_half},
                        {"shrink_on_halving", p.shrink}});
    doc["points"] = rows;
    doc["pass"] = pass;
    write_json(out_dir / "nth_check.json", doc);
    return pass ? kExitOk : kExitCheckFailed;
}

// ---------------------------------------------------------------------------
// kernel-regression
// ---------------------------------------------------------------------------

struct KernelRegressionCell {
    std::size_t m = 0;
    std::uint64_t seed = 0;
    double sup_gap = 0.0; // sup over records of |r_flow(t) - r_pred(t)|_inf
    double gap_at_T = 0.0;
};

inline int cmd_kernel_regression(const ExperimentSpec& spec,
                                 const std::filesystem::path& out_dir, std::size_t threads) {
    std::vector<std::size_t> m_list = spec.m_list;
    if (m_list.empty()) m_list = {128, 256, 512, 1024};
    const Dataset ds = dataset_from_spec(spec);
    const std::size_t n = ds.size();
    const std::size_t n_seeds = spec.seeds.size();

    std::vector<KernelRegressionCell> cells(m_list.size() * n_seeds);
    run_parallel(cells.size(), threads, [&](std::size_t idx) {
        const std::size_t mi = idx / n_seeds;
        const std::size_t si = idx % n_seeds;
        NetworkConfig cfg = config_from_spec(spec);
        cfg.m = m_list[mi];
        Params params = init_params(cfg, spec.effective_seed(si));
        const KernelSnapshot snap0 = empirical_ntk(cfg, params, ds);
        Vector r0(n);
        {
            const std::vector<ForwardCache> caches = forward_all(cfg, params, ds);
            for (std::size_t b = 0; b < n; ++b)
                r0[b] = dot(params.a, caches[b].x[cfg.L]) - ds.labels[b];
        }
        double h = spec.step;
        if (h <= 0.0) {
            h = 1e-3 * static_cast<double>(n) / std::max(snap0.lambda_min, 1e-8);
            const double cap = 0.5 * static_cast<double>(n) / std::max(snap0.K2.trace(), 1e-8);
            h = std::min(h, cap);
        }
        const std::size_t steps =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(spec.T / h - 1e-9)));
        h = spec.T / static_cast<double>(steps);
        const std::size_t stride =
            std::max<std::size_t>(1, steps / std::max<std::size_t>(1, spec.records - 1));

        KernelRegressionCell& cell = cells[idx];
        cell.m = m_list[mi];
        cell.seed = spec.effective_seed(si);
        for (std::size_t k = 1; k <= steps; ++k) {
            params = integrate_step(cfg, params, ds, h, Scheme::Rk4);
            if (k % stride != 0 && k != steps) continue;
            const double t = static_cast<double>(k) * h;
            const std::vector<ForwardCache> caches = forward_all(cfg, params, ds);
            const Vector pred = kernel_regression_predict(snap0.K2, r0, t, n);
            double gap = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const double rf = dot(params.a, caches[b].x[cfg.L]) - ds.labels[b];
                gap = std::max(gap, std::abs(rf - pred[b]));
            }
            cell.sup_gap = std::max(cell.sup_gap, gap);
            if (k == steps) cell.gap_at_T = gap;
        }
    });

    CsvWriter csv(out_dir / "kernel_regression.csv", spec,
                  {"m", "seed", "sup_gap", "gap_at_T"});
    for (const KernelRegressionCell& c : cells)
        csv.row({std::to_string(c.m), std::to_string(c.seed), g17(c.sup_gap), g17(c.gap_at_T)});

    std::vector<double> med;
    for (std::size_t mi = 0; mi < m_list.size(); ++mi) {
        std::vector<double> grp;
        for (std::size_t si = 0; si < n_seeds; ++si) grp.push_back(cells[mi * n_seeds + si].sup_gap);
        med.push_back(median_of(grp));
    }
    std::vector<double> ms(m_list.begin(), m_list.end());
    const double slope = loglog_slope(ms, med);

    json doc = provenance(spec);
    doc["m_list"] = m_list;
    doc["median_sup_gap"] = med;
    doc["slope_loglog"] = slope;
    doc["gap_shrinks_with_m"] = slope < 0.0;
    write_json(out_dir / "kernel_regression_summary.json", doc);
    return kExitOk;
}

} // namespace nthlab
