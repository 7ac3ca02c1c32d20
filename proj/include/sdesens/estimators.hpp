#pragma once

#include <cstdint>
#include <stdexcept>
#include <utility>

#include "sdesens/integrate.hpp"
#include "sdesens/models.hpp"
#include "sdesens/noise.hpp"
#include "sdesens/stats.hpp"

namespace sdesens {

/// One path's estimator value and the number of timesteps it consumed.
struct EstimatorSample {
    double value = 0.0;
    std::uint64_t cost = 0;
};

namespace detail {

inline void require_sigma(const double sigma) {
    if (sigma <= 0.0)
        throw std::invalid_argument("estimator requires sigma > 0");
}

inline void require_spring(const double spring) {
    if (spring <= 0.0)
        throw std::invalid_argument("importance-sampling estimator requires spring S > 0");
}

/// Assemble <grad phi(X_T), v_T> + phi(X_T) * ito_acc from a finished path.
template <DriftModel M>
double is_ps_value(const M& model, const AugmentedPathState<M::dim>& s) {
    return dot(model.observable_grad(s.x), s.v) + model.observable(s.x) * s.ito_acc;
}

}  // namespace detail

/// Standard pathwise estimator <grad phi(X_T), x_T> with the plain
/// variation recursion x' = gamma(X) + J(X) x. Blows up exponentially on
/// chaotic models at large T; NonFiniteState is the expected failure mode
/// there and is propagated, not masked.
template <DriftModel M>
EstimatorSample standard_ps_path(const M& model, const ModelParams<M::dim>& params,
                                 double T, const StepPolicy& policy,
                                 NoiseStream& stream) {
    const auto s =
        simulate_augmented(model, params, EstimatorKind::StandardPS, T, policy, stream);
    return {dot(model.observable_grad(s.x), s.v), s.steps};
}

/// Malliavin weight estimator phi(X_T) * sum_n <gamma(X_tn)/sigma, dW_n>.
template <DriftModel M>
EstimatorSample malliavin_path(const M& model, const ModelParams<M::dim>& params,
                               double T, const StepPolicy& policy,
                               NoiseStream& stream) {
    detail::require_sigma(params.sigma);
    const auto s =
        simulate_augmented(model, params, EstimatorKind::Malliavin, T, policy, stream);
    return {model.observable(s.x) * s.ito_acc, s.steps};
}

/// Importance-sampling pathwise estimator for the drift parameter:
///   <grad phi(Y_T), y_T> + phi(Y_T) * sum_n (S/sigma) <y_tn, dW_n>,
/// where y' = gamma(Y) + (J(Y) - S I) y. The spring S keeps the variation
/// ergodic; Y itself follows the unmodified dynamics.
template <DriftModel M>
EstimatorSample is_ps_theta_path(const M& model, const ModelParams<M::dim>& params,
                                 double T, const StepPolicy& policy,
                                 NoiseStream& stream, double spring) {
    detail::require_sigma(params.sigma);
    detail::require_spring(spring);
    const auto s = simulate_augmented(model, params, EstimatorKind::IsPsTheta, T,
                                      policy, stream, spring);
    return {detail::is_ps_value(model, s), s.steps};
}

/// Volatility sensitivity: the variation z' = (J(Y) - S I) z + dW is itself
/// noise-driven, z0 = 0.
template <DriftModel M>
EstimatorSample is_ps_sigma_path(const M& model, const ModelParams<M::dim>& params,
                                 double T, const StepPolicy& policy,
                                 NoiseStream& stream, double spring) {
    detail::require_sigma(params.sigma);
    detail::require_spring(spring);
    const auto s = simulate_augmented(model, params, EstimatorKind::IsPsSigma, T,
                                      policy, stream, spring);
    return {detail::is_ps_value(model, s), s.steps};
}

/// Initial-condition sensitivity along `direction`: deterministic variation
/// z' = (J(Y) - S I) z with z0 = direction (no source term).
template <DriftModel M>
EstimatorSample is_ps_x0_path(const M& model, const ModelParams<M::dim>& params,
                              double T, const StepPolicy& policy, NoiseStream& stream,
                              double spring, const Vec<M::dim>& direction) {
    detail::require_sigma(params.sigma);
    detail::require_spring(spring);
    const auto s = simulate_augmented(model, params, EstimatorKind::IsPsX0, T, policy,
                                      stream, spring, direction);
    return {detail::is_ps_value(model, s), s.steps};
}

/// Dispatch one path of any estimator kind. `direction` seeds the
/// variation for IsPsX0 and is ignored otherwise.
template <DriftModel M>
EstimatorSample sample_estimator(const M& model, const ModelParams<M::dim>& params,
                                 EstimatorKind kind, double T,
                                 const StepPolicy& policy, NoiseStream& stream,
                                 double spring, const Vec<M::dim>& direction) {
    switch (kind) {
        case EstimatorKind::StandardPS:
            return standard_ps_path(model, params, T, policy, stream);
        case EstimatorKind::Malliavin:
            return malliavin_path(model, params, T, policy, stream);
        case EstimatorKind::IsPsTheta:
            return is_ps_theta_path(model, params, T, policy, stream, spring);
        case EstimatorKind::IsPsSigma:
            return is_ps_sigma_path(model, params, T, policy, stream, spring);
        case EstimatorKind::IsPsX0:
            return is_ps_x0_path(model, params, T, policy, stream, spring, direction);
    }
    throw std::logic_error("unreachable estimator kind");
}

enum class FdTarget { Theta, Sigma, X0 };

/// Central finite difference with common random numbers: paired
/// simulations at parameter +/- epsilon/2 reuse the identical noise
/// stream. Returns the mean of the per-path differences and its standard
/// error. Biased O(epsilon^2) but cheap; serves as the cross-check oracle
/// for the unbiased estimators.
template <DriftModel M>
std::pair<double, double> fd_sensitivity(const M& model,
                                         const ModelParams<M::dim>& params, double T,
                                         const StepPolicy& policy,
                                         std::uint64_t master_seed, double epsilon,
                                         std::size_t n_paths, FdTarget target) {
    if (epsilon <= 0.0) throw std::invalid_argument("fd_sensitivity: epsilon must be > 0");
    if (n_paths < 2) throw std::invalid_argument("fd_sensitivity: need n_paths >= 2");

    ModelParams<M::dim> up = params, dn = params;
    switch (target) {
        case FdTarget::Theta:
            up.theta += 0.5 * epsilon;
            dn.theta -= 0.5 * epsilon;
            break;
        case FdTarget::Sigma:
            up.sigma += 0.5 * epsilon;
            dn.sigma -= 0.5 * epsilon;
            break;
        case FdTarget::X0:
            for (std::size_t i = 0; i < M::dim; ++i) {
                up.x0[i] += 0.5 * epsilon;
                dn.x0[i] -= 0.5 * epsilon;
            }
            break;
    }

    MCStats diffs;
    std::size_t blowups = 0;
    for (std::size_t i = 0; i < n_paths; ++i) {
        NoiseStream stream_up(master_seed, i);
        NoiseStream stream_dn(master_seed, i);
        try {
            const auto su = simulate_path(model, up, T, policy, stream_up);
            const auto sd = simulate_path(model, dn, T, policy, stream_dn);
            diffs.add((model.observable(su.x) - model.observable(sd.x)) / epsilon);
        } catch (const NonFiniteState&) {
            ++blowups;  // drop the pair; rate guarded below
        }
    }
    if (static_cast<double>(blowups) > 0.01 * static_cast<double>(n_paths))
        throw NonFiniteState(T);
    return {diffs.mean(), diffs.std_error()};
}

/// Default finite-difference bump: 1% of the parameter magnitude with a
/// 1e-4 floor.
inline double fd_default_epsilon(double parameter) {
    return std::max(0.01 * std::abs(parameter), 1e-4);
}

}  // namespace sdesens
