#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "sdesens/models.hpp"
#include "sdesens/noise.hpp"
#include "sdesens/vec.hpp"

namespace sdesens {

/// Thrown when a path state leaves the finite range. For the standard
/// pathwise estimator at large horizons this is an expected outcome, not a
/// bug; callers count it.
struct NonFiniteState : std::runtime_error {
    explicit NonFiniteState(double time)
        : std::runtime_error("non-finite state at t=" + std::to_string(time)),
          t(time) {}
    double t;
};

enum class StepMode { Uniform, Adaptive };

/// Timestep policy. Uniform mode takes steps of exactly h (final step
/// truncated to land on T). Adaptive mode bounds the per-step drift
/// increment by delta via h(x) = clamp(delta / max(1, ||f||), h_min, h_max)
/// with h_min = delta * 2^-10 and h_max = delta.
struct StepPolicy {
    StepMode mode = StepMode::Uniform;
    double h = 1.0 / 128.0;
    double delta = 1.0 / 512.0;

    double h_min() const { return delta * 0x1.0p-10; }
    double h_max() const { return delta; }

    static StepPolicy uniform(double step) {
        StepPolicy p;
        p.mode = StepMode::Uniform;
        p.h = step;
        return p;
    }

    static StepPolicy adaptive(double delta) {
        StepPolicy p;
        p.mode = StepMode::Adaptive;
        p.delta = delta;
        return p;
    }
};

/// One Euler-Maruyama step x + f(theta; x) h + sigma dW.
template <DriftModel M>
Vec<M::dim> em_step(const Vec<M::dim>& x, double h, const Vec<M::dim>& dW,
                    const M& model, const ModelParams<M::dim>& params) {
    Vec<M::dim> r = model.drift(x, params.theta);
    for (std::size_t i = 0; i < M::dim; ++i) r[i] = x[i] + r[i] * h + params.sigma * dW[i];
    return r;
}

template <DriftModel M>
double adaptive_step_size(const Vec<M::dim>& x, const M& model,
                          const ModelParams<M::dim>& params, const StepPolicy& policy) {
    const double fn = norm(model.drift(x, params.theta));
    return std::clamp(policy.delta / std::max(1.0, fn), policy.h_min(), policy.h_max());
}

/// Which per-path functional is being accumulated. IsPs* kinds carry the
/// importance-sampling spring S in the variation recursion and the running
/// Ito integral (S/sigma)<v, dW>.
enum class EstimatorKind { StandardPS, Malliavin, IsPsTheta, IsPsSigma, IsPsX0 };

/// Joint state of one simulated path: solution x, variation v, the running
/// Ito-integral accumulator, and the log Radon-Nikodym weight (0 for
/// single-path estimators). steps counts timesteps for cost reporting.
template <std::size_t N>
struct AugmentedPathState {
    double t = 0.0;
    Vec<N> x{};
    Vec<N> v{};
    double ito_acc = 0.0;
    double log_rn = 0.0;
    std::uint64_t steps = 0;
};

namespace detail {

/// Per-step variation and accumulator update at an explicit left-point
/// state y (Ito convention; runs before the state itself advances). Shared
/// by single-path simulation and the MLMC level estimators, where dW is a
/// reconstructed measure-consistent increment.
template <DriftModel M>
void advance_variation_at(Vec<M::dim>& v, double& ito_acc, const Vec<M::dim>& y,
                          EstimatorKind kind, double h, const Vec<M::dim>& dW,
                          const M& model, const ModelParams<M::dim>& params,
                          double spring) {
    constexpr std::size_t N = M::dim;
    switch (kind) {
        case EstimatorKind::StandardPS: {
            const Vec<N> g = model.drift_dtheta(y, params.theta);
            const Vec<N> jv = mat_vec(model.drift_jac(y, params.theta), v);
            for (std::size_t i = 0; i < N; ++i) v[i] += (g[i] + jv[i]) * h;
            break;
        }
        case EstimatorKind::Malliavin: {
            const Vec<N> g = model.drift_dtheta(y, params.theta);
            ito_acc += dot(g, dW) / params.sigma;
            break;
        }
        case EstimatorKind::IsPsTheta: {
            ito_acc += (spring / params.sigma) * dot(v, dW);
            const Vec<N> g = model.drift_dtheta(y, params.theta);
            const Vec<N> jv = mat_vec(model.drift_jac(y, params.theta), v);
            for (std::size_t i = 0; i < N; ++i)
                v[i] += (g[i] + jv[i] - spring * v[i]) * h;
            break;
        }
        case EstimatorKind::IsPsSigma: {
            ito_acc += (spring / params.sigma) * dot(v, dW);
            const Vec<N> jv = mat_vec(model.drift_jac(y, params.theta), v);
            for (std::size_t i = 0; i < N; ++i)
                v[i] += (jv[i] - spring * v[i]) * h + dW[i];
            break;
        }
        case EstimatorKind::IsPsX0: {
            ito_acc += (spring / params.sigma) * dot(v, dW);
            const Vec<N> jv = mat_vec(model.drift_jac(y, params.theta), v);
            for (std::size_t i = 0; i < N; ++i)
                v[i] += (jv[i] - spring * v[i]) * h;
            break;
        }
    }
}

template <DriftModel M>
void advance_variation(AugmentedPathState<M::dim>& s, EstimatorKind kind, double h,
                       const Vec<M::dim>& dW, const M& model,
                       const ModelParams<M::dim>& params, double spring) {
    advance_variation_at(s.v, s.ito_acc, s.x, kind, h, dW, model, params, spring);
}

template <std::size_t N>
void check_finite(const AugmentedPathState<N>& s) {
    if (!all_finite(s.x) || !all_finite(s.v) || !std::isfinite(s.ito_acc) ||
        !std::isfinite(s.log_rn))
        throw NonFiniteState(s.t);
}

}  // namespace detail

/// Result of a plain state-only simulation.
template <std::size_t N>
struct PathEnd {
    Vec<N> x{};
    std::uint64_t steps = 0;
};

/// Advance state, variation, and accumulators jointly from t = 0 to t = T.
/// The state uses Euler-Maruyama, the variation explicit Euler on the same
/// step sequence; accumulators use left-point values. v0 seeds the
/// variation (zero for theta- and sigma-sensitivities, the perturbation
/// direction for x0).
///
/// Throws NonFiniteState on numerical blow-up, checked every step.
template <DriftModel M>
AugmentedPathState<M::dim> simulate_augmented(const M& model,
                                              const ModelParams<M::dim>& params,
                                              EstimatorKind kind, double T,
                                              const StepPolicy& policy,
                                              NoiseStream& stream, double spring = 0.0,
                                              const Vec<M::dim>& v0 = {}) {
    constexpr std::size_t N = M::dim;
    AugmentedPathState<N> s;
    s.x = params.x0;
    s.v = v0;

    if (policy.mode == StepMode::Uniform) {
        const auto n_steps =
            static_cast<std::uint64_t>(std::ceil(T / policy.h - 1e-12));
        const double h_last =
            std::max(T - policy.h * static_cast<double>(n_steps - 1), 0.0);
        for (std::uint64_t n = 0; n < n_steps; ++n) {
            const double h = (n + 1 < n_steps) ? policy.h : h_last;
            const double sqrt_h = std::sqrt(h);
            const Vec<N> dW = sqrt_h * stream.gaussian_vec<N>();
            detail::advance_variation(s, kind, h, dW, model, params, spring);
            s.x = em_step(s.x, h, dW, model, params);
            s.t = (n + 1 < n_steps) ? policy.h * static_cast<double>(n + 1) : T;
            ++s.steps;
            detail::check_finite(s);
        }
    } else {
        while (true) {
            const double rem = T - s.t;
            if (rem <= 0.0) break;
            const double h =
                std::min(adaptive_step_size(s.x, model, params, policy), rem);
            if (s.t + h == s.t) break;  // step below fp resolution of t
            const double sqrt_h = std::sqrt(h);
            const Vec<N> dW = sqrt_h * stream.gaussian_vec<N>();
            detail::advance_variation(s, kind, h, dW, model, params, spring);
            s.x = em_step(s.x, h, dW, model, params);
            s.t += h;
            ++s.steps;
            detail::check_finite(s);
        }
        s.t = T;
    }
    return s;
}

/// State-only Euler-Maruyama simulation (no variation, no accumulators).
/// Consumes the stream exactly like simulate_augmented with the same
/// policy, so paired runs stay on common random numbers.
template <DriftModel M>
PathEnd<M::dim> simulate_path(const M& model, const ModelParams<M::dim>& params,
                              double T, const StepPolicy& policy,
                              NoiseStream& stream) {
    constexpr std::size_t N = M::dim;
    PathEnd<N> r;
    r.x = params.x0;
    double t = 0.0;
    if (policy.mode == StepMode::Uniform) {
        const auto n_steps =
            static_cast<std::uint64_t>(std::ceil(T / policy.h - 1e-12));
        const double h_last =
            std::max(T - policy.h * static_cast<double>(n_steps - 1), 0.0);
        for (std::uint64_t n = 0; n < n_steps; ++n) {
            const double h = (n + 1 < n_steps) ? policy.h : h_last;
            const Vec<N> dW = std::sqrt(h) * stream.gaussian_vec<N>();
            r.x = em_step(r.x, h, dW, model, params);
            ++r.steps;
            if (!all_finite(r.x)) throw NonFiniteState(policy.h * static_cast<double>(n));
        }
    } else {
        while (true) {
            const double rem = T - t;
            if (rem <= 0.0) break;
            const double h =
                std::min(adaptive_step_size(r.x, model, params, policy), rem);
            if (t + h == t) break;
            const Vec<N> dW = std::sqrt(h) * stream.gaussian_vec<N>();
            r.x = em_step(r.x, h, dW, model, params);
            t += h;
            ++r.steps;
            if (!all_finite(r.x)) throw NonFiniteState(t);
        }
    }
    return r;
}

}  // namespace sdesens
