#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "sdesens/estimators.hpp"
#include "sdesens/extrapolation.hpp"
#include "sdesens/integrate.hpp"
#include "sdesens/models.hpp"
#include "sdesens/stats.hpp"

namespace sdesens {

/// Thrown by mc_run when more than 1% of paths blow up for an estimator
/// where blow-up is not the object of study.
struct BlowupRateExceeded : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Thrown by lambda_star_estimate when the oscillation envelope collapses
/// to zero or leaves too few points above the Monte Carlo noise floor.
struct DegenerateEnvelope : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Magnitude cap for standard-PS values in blow-up studies; the study's
/// purpose is demonstrating divergence, not surviving it.
inline constexpr double kClampMagnitude = 1e12;

namespace detail {

/// Run fn(begin, end, chunk_index) over [0, n) in fixed chunks.
/// Results keyed by chunk_index can be merged in canonical order
/// afterwards, which makes the outcome independent of the worker count.
template <class Fn>
void run_chunked(std::size_t n, std::size_t chunk_size, unsigned workers, Fn&& fn) {
    const std::size_t n_chunks = (n + chunk_size - 1) / chunk_size;
    if (workers <= 1 || n_chunks <= 1) {
        for (std::size_t c = 0; c < n_chunks; ++c)
            fn(c * chunk_size, std::min(n, (c + 1) * chunk_size), c);
        return;
    }
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= n_chunks) return;
            fn(c * chunk_size, std::min(n, (c + 1) * chunk_size), c);
        }
    };
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
}

}  // namespace detail

/// Everything a study run needs, in one bag; mirrors the CLI flags and the
/// JSON config-file keys one to one.
struct ExperimentConfig {
    std::string model = "lorenz";
    double theta = 28.0;
    double sigma = 6.0;
    std::vector<double> x0{-2.4, -3.7, 14.98};
    double kappa = 1.0;
    double mu = 0.0;
    std::string estimator = "isps-theta";
    std::uint64_t seed = 1;
    std::vector<double> t_grid{2, 4, 6, 8, 10, 12, 14, 16, 18, 20};
    std::vector<double> sigma_grid{1, 2, 4, 8};
    std::size_t paths = 100'000;
    std::string scheme = "uniform";
    double h = 1.0 / 128.0;
    double delta = 1.0 / 512.0;
    double T = 10.0;
    double spring = 10.0;
    double fd_epsilon = 0.0;  // 0: default rule 1% of the parameter, floor 1e-4
    std::string fd_target = "theta";
    double eps = 0.01;
    double h0 = 1.0 / 64.0;
    int max_levels = 24;
    std::size_t n_init = 1000;
    int rr_order = 2;
    double t_max = 50.0;
    std::size_t window = 10;
    double grid_dt = 0.25;
    std::string out_dir = ".";

    void validate() const {
        if (t_grid.empty() || sigma_grid.empty())
            throw std::invalid_argument("config: grids must be non-empty");
        for (double t : t_grid)
            if (t <= 0.0) throw std::invalid_argument("config: T grid must be positive");
        for (double s : sigma_grid)
            if (s <= 0.0)
                throw std::invalid_argument("config: sigma grid must be positive");
    }
};

struct McRunResult {
    MCStats stats;
    std::uint64_t total_steps = 0;
    std::size_t blowups = 0;
    std::size_t clamped = 0;
};

/// Evaluate n_paths per-path estimator samples with path indices 0..n-1 and
/// merge the statistics in canonical order; the result is bit-identical for
/// a fixed seed no matter how many workers execute the chunks.
///
/// Paths that throw NonFiniteState are counted, not masked. For StandardPS
/// the count (and the +-1e12 value clamp count) is part of the output; for
/// every other kind a blow-up rate above 1% aborts the run.
template <DriftModel M>
McRunResult mc_run(const M& model, const ModelParams<M::dim>& params,
                   EstimatorKind kind, double T, const StepPolicy& policy,
                   std::size_t n_paths, std::uint64_t seed, double spring = 0.0,
                   std::optional<Vec<M::dim>> direction = std::nullopt,
                   unsigned workers = 1) {
    if (n_paths < 2) throw std::invalid_argument("mc_run: need n_paths >= 2");
    const Vec<M::dim> dir = direction.value_or(
        kind == EstimatorKind::IsPsX0 ? ones_vec<M::dim>() : Vec<M::dim>{});

    constexpr std::size_t kChunk = 2048;
    const std::size_t n_chunks = (n_paths + kChunk - 1) / kChunk;
    std::vector<McRunResult> parts(n_chunks);

    detail::run_chunked(n_paths, kChunk, workers,
                        [&](std::size_t begin, std::size_t end, std::size_t c) {
                            auto& part = parts[c];
                            for (std::size_t i = begin; i < end; ++i) {
                                NoiseStream stream(seed, i);
                                try {
                                    auto s = sample_estimator(model, params, kind, T,
                                                              policy, stream, spring,
                                                              dir);
                                    part.total_steps += s.cost;
                                    if (kind == EstimatorKind::StandardPS &&
                                        std::abs(s.value) > kClampMagnitude) {
                                        s.value = std::copysign(kClampMagnitude, s.value);
                                        ++part.clamped;
                                    }
                                    // assembly products can overflow even when
                                    // every state component is still finite
                                    if (!std::isfinite(s.value)) throw NonFiniteState(T);
                                    part.stats.add(s.value);
                                } catch (const NonFiniteState&) {
                                    ++part.blowups;
                                }
                            }
                        });

    McRunResult out;
    for (const auto& part : parts) {
        out.stats.merge(part.stats);
        out.total_steps += part.total_steps;
        out.blowups += part.blowups;
        out.clamped += part.clamped;
    }
    if (kind != EstimatorKind::StandardPS &&
        static_cast<double>(out.blowups) > 0.01 * static_cast<double>(n_paths))
        throw BlowupRateExceeded("mc_run: " + std::to_string(out.blowups) + " of " +
                                 std::to_string(n_paths) + " paths blew up");
    return out;
}

struct VarianceRow {
    double T = 0.0;
    double mean = 0.0;
    double variance = 0.0;
    double stderr_mean = 0.0;
    std::size_t n = 0;
    std::size_t blowups = 0;
};

struct VarianceStudy {
    std::vector<VarianceRow> rows;
    FitResult fit;  // StandardPS: log variance on T; otherwise log-log on T
};

/// Variance growth of an estimator across a horizon grid, with the fitted
/// growth law. StandardPS fits log V on T (exponential regime); the
/// bounded-variation estimators fit log V on log T (power law).
template <DriftModel M>
VarianceStudy variance_vs_T_study(const M& model, const ModelParams<M::dim>& params,
                                  EstimatorKind kind, const std::vector<double>& t_grid,
                                  const StepPolicy& policy, std::size_t n_paths,
                                  std::uint64_t seed, double spring = 0.0,
                                  unsigned workers = 1) {
    if (t_grid.size() < 4)
        throw std::invalid_argument("variance_vs_T_study: need >= 4 grid points");
    VarianceStudy study;
    std::vector<double> ts, vs;
    for (const double T : t_grid) {
        const auto r =
            mc_run(model, params, kind, T, policy, n_paths, seed, spring, {}, workers);
        study.rows.push_back({T, r.stats.mean(), r.stats.variance(),
                              r.stats.std_error(), r.stats.count(), r.blowups});
        ts.push_back(T);
        vs.push_back(r.stats.variance());
    }
    study.fit = fit_loglinear(ts, vs,
                              kind == EstimatorKind::StandardPS ? FitTransform::LogLin
                                                                : FitTransform::LogLog);
    return study;
}

struct SnapshotCurve {
    std::vector<MCStats> points;
    std::size_t blowups = 0;
};

/// Mean curve of a state functional on a uniform time grid, one statistics
/// accumulator per grid point, single pass over the paths. A path is
/// committed only if it stays finite to t_max; diverged paths are counted
/// and dropped whole (never partially), with the usual 1% failure budget.
template <DriftModel M, class StateFn>
SnapshotCurve snapshot_curve(const M& model, const ModelParams<M::dim>& params,
                             double t_max, double h, double grid_dt,
                             std::size_t n_paths, std::uint64_t seed,
                             StateFn&& state_fn, unsigned workers = 1) {
    constexpr std::size_t N = M::dim;
    const auto steps_per_snap = static_cast<std::size_t>(std::llround(grid_dt / h));
    if (steps_per_snap == 0 ||
        std::abs(static_cast<double>(steps_per_snap) * h - grid_dt) > 1e-12)
        throw std::invalid_argument("snapshot_curve: grid_dt must be a multiple of h");
    const auto n_snaps = static_cast<std::size_t>(std::floor(t_max / grid_dt + 1e-9));

    constexpr std::size_t kChunk = 512;
    const std::size_t n_chunks = (n_paths + kChunk - 1) / kChunk;
    struct Part {
        std::vector<MCStats> acc;
        std::size_t blowups = 0;
    };
    std::vector<Part> parts(n_chunks);
    for (auto& p : parts) p.acc.resize(n_snaps + 1);

    detail::run_chunked(
        n_paths, kChunk, workers, [&](std::size_t begin, std::size_t end, std::size_t c) {
            auto& part = parts[c];
            std::vector<double> path_vals(n_snaps + 1);
            for (std::size_t i = begin; i < end; ++i) {
                NoiseStream stream(seed, i);
                Vec<N> x = params.x0;
                path_vals[0] = state_fn(x);
                bool ok = true;
                for (std::size_t g = 1; g <= n_snaps && ok; ++g) {
                    for (std::size_t s = 0; s < steps_per_snap; ++s) {
                        const Vec<N> dW = std::sqrt(h) * stream.gaussian_vec<N>();
                        x = em_step(x, h, dW, model, params);
                    }
                    ok = all_finite(x);
                    if (ok) path_vals[g] = state_fn(x);
                }
                if (ok)
                    for (std::size_t g = 0; g <= n_snaps; ++g) part.acc[g].add(path_vals[g]);
                else
                    ++part.blowups;
            }
        });

    SnapshotCurve out;
    out.points.resize(n_snaps + 1);
    for (const auto& part : parts) {
        for (std::size_t g = 0; g <= n_snaps; ++g) out.points[g].merge(part.acc[g]);
        out.blowups += part.blowups;
    }
    if (static_cast<double>(out.blowups) > 0.01 * static_cast<double>(n_paths))
        throw BlowupRateExceeded("snapshot_curve: blow-up rate above 1%");
    return out;
}

/// Trailing-window oscillation envelope (max - min)/2 of a mean curve and
/// the least-squares slope of its logarithm against time. Points where the
/// envelope falls below `noise_floor` (per-point, optional) are excluded:
/// past that the envelope measures Monte Carlo noise, not decay.
inline FitResult envelope_log_fit(const std::vector<double>& times,
                                  const std::vector<double>& values, std::size_t window,
                                  const std::vector<double>& noise_floor = {},
                                  std::vector<double>* envelope_out = nullptr,
                                  std::vector<double>* env_times_out = nullptr) {
    if (window < 3) throw std::invalid_argument("envelope_log_fit: window must be >= 3");
    if (times.size() != values.size() || times.size() < window)
        throw std::invalid_argument("envelope_log_fit: series shorter than window");
    std::vector<double> ts, es;
    for (std::size_t i = window - 1; i < values.size(); ++i) {
        double lo = values[i - window + 1], hi = lo;
        for (std::size_t j = i - window + 2; j <= i; ++j) {
            lo = std::min(lo, values[j]);
            hi = std::max(hi, values[j]);
        }
        const double env = 0.5 * (hi - lo);
        if (envelope_out) envelope_out->push_back(env);
        if (env_times_out) env_times_out->push_back(times[i]);
        if (!noise_floor.empty() && env <= noise_floor[i]) break;
        if (env <= 0.0)
            throw DegenerateEnvelope("envelope hit zero; increase the path count");
        ts.push_back(times[i]);
        es.push_back(env);
    }
    if (ts.size() < 3)
        throw DegenerateEnvelope("fewer than 3 envelope points above the noise floor");
    return fit_loglinear(ts, es, FitTransform::LogLin);
}

struct LambdaStarResult {
    double lambda_star = 0.0;
    FitResult fit;
    std::vector<double> times, means, envelope, env_times;
};

/// Equilibration-rate estimate: simulate the mean observable curve, form
/// the trailing-window envelope, and read the exponential decay rate off a
/// log-linear fit. The noise floor is 5x the per-point standard error.
template <DriftModel M>
LambdaStarResult lambda_star_estimate(const M& model, const ModelParams<M::dim>& params,
                                      double t_max, std::size_t n_paths,
                                      std::size_t window, double grid_dt = 0.25,
                                      double h = 1.0 / 64.0, std::uint64_t seed = 1,
                                      unsigned workers = 1) {
    if (window < 3) throw std::invalid_argument("lambda_star_estimate: window >= 3");
    const auto curve = snapshot_curve(
        model, params, t_max, h, grid_dt, n_paths, seed,
        [&](const Vec<M::dim>& x) { return model.observable(x); }, workers);

    LambdaStarResult r;
    std::vector<double> floors;
    for (std::size_t g = 0; g < curve.points.size(); ++g) {
        r.times.push_back(grid_dt * static_cast<double>(g));
        r.means.push_back(curve.points[g].mean());
        floors.push_back(5.0 * curve.points[g].std_error());
    }
    r.fit = envelope_log_fit(r.times, r.means, window, floors, &r.envelope,
                             &r.env_times);
    r.lambda_star = -r.fit.slope;
    return r;
}

struct WeakSigmaRow {
    double sigma = 0.0;
    double T = 0.0;
    double estimate = 0.0;
    double stderr_mean = 0.0;
    double weak_error = 0.0;
};

struct WeakSigmaStudy {
    std::vector<WeakSigmaRow> rows;
    FitResult fit;  // log-log weak error on sigma
    double ode_ref = 0.0;
};

/// Weak convergence of the volatility-sigma approximation toward the
/// deterministic reference: per sigma, estimate the observable mean (or a
/// sensitivity, when `kind` is set) at the sigma-dependent horizon and
/// compare against the ODE value.
template <DriftModel M>
WeakSigmaStudy weak_convergence_study(const M& model, const ModelParams<M::dim>& params,
                                      const std::vector<double>& sigma_grid,
                                      double ode_ref, std::size_t n_paths, double h,
                                      std::uint64_t seed,
                                      std::optional<EstimatorKind> kind = std::nullopt,
                                      double spring = 0.0, double t_max = 500.0,
                                      unsigned workers = 1) {
    if (sigma_grid.empty())
        throw std::invalid_argument("weak_convergence_study: empty sigma grid");
    WeakSigmaStudy study;
    study.ode_ref = ode_ref;
    std::vector<double> ss, es;
    for (const double sigma : sigma_grid) {
        if (sigma <= 0.0)
            throw std::invalid_argument("weak_convergence_study: sigma must be > 0");
        ModelParams<M::dim> p = params;
        p.sigma = sigma;
        const double T = horizon_for_sigma(sigma, 2.0, 15.0, t_max);
        const StepPolicy policy = StepPolicy::uniform(h);
        MCStats stats;
        if (kind) {
            stats = mc_run(model, p, *kind, T, policy, n_paths, seed, spring, {}, workers)
                        .stats;
        } else {
            constexpr std::size_t kChunk = 2048;
            const std::size_t n_chunks = (n_paths + kChunk - 1) / kChunk;
            std::vector<MCStats> parts(n_chunks);
            detail::run_chunked(n_paths, kChunk, workers,
                                [&](std::size_t begin, std::size_t end, std::size_t c) {
                                    for (std::size_t i = begin; i < end; ++i) {
                                        NoiseStream stream(seed, i);
                                        parts[c].add(model.observable(
                                            simulate_path(model, p, T, policy, stream)
                                                .x));
                                    }
                                });
            for (const auto& part : parts) stats.merge(part);
        }
        const double err = std::abs(stats.mean() - ode_ref);
        study.rows.push_back({sigma, T, stats.mean(), stats.std_error(), err});
        ss.push_back(sigma);
        es.push_back(err);
    }
    study.fit = fit_loglinear(ss, es, FitTransform::LogLog);
    return study;
}

}  // namespace sdesens
