#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "sdesens/estimators.hpp"
#include "sdesens/integrate.hpp"
#include "sdesens/models.hpp"
#include "sdesens/noise.hpp"
#include "sdesens/stats.hpp"

namespace sdesens {

/// Closed-form extrapolation weights w_k = (-1)^{R-k} k^R / (k! (R-k)!),
/// k = 1..R. They satisfy sum w_k = 1 and sum w_k k^{-j} = 0 for
/// j = 1..R-1, which cancels the first R-1 volatility bias terms.
inline std::vector<double> rr_weights(int order) {
    if (order < 1 || order > 8)
        throw std::invalid_argument("rr_weights: order must be in [1, 8]");
    std::vector<double> w(static_cast<std::size_t>(order));
    for (int k = 1; k <= order; ++k) {
        double kfact = 1.0, rkfact = 1.0;
        for (int i = 2; i <= k; ++i) kfact *= i;
        for (int i = 2; i <= order - k; ++i) rkfact *= i;
        const double sign = ((order - k) % 2 == 0) ? 1.0 : -1.0;
        w[static_cast<std::size_t>(k - 1)] =
            sign * std::pow(static_cast<double>(k), order) / (kfact * rkfact);
    }
    return w;
}

/// Extrapolation ladder: order R, weights, and the volatility ladder
/// sigma_k = base * R / k (decreasing, last entry = base). The run at
/// sigma_k pairs with weight w_k.
struct RRScheme {
    int order = 1;
    double base_sigma = 0.0;
    std::vector<double> weights;
    std::vector<double> sigmas;

    static RRScheme make(int order, double base_sigma) {
        if (base_sigma <= 0.0)
            throw std::invalid_argument("RRScheme: base_sigma must be > 0");
        RRScheme s;
        s.order = order;
        s.base_sigma = base_sigma;
        s.weights = rr_weights(order);
        for (int k = 1; k <= order; ++k)
            s.sigmas.push_back(base_sigma * static_cast<double>(order) /
                               static_cast<double>(k));
        return s;
    }
};

/// Core combiner: per path index, evaluates `path_value(sigma_k, stream)`
/// for every rung of the ladder on the IDENTICAL noise stream (reset
/// between rungs) and averages the weighted combinations. Sharing the
/// driving noise across the ladder is what keeps the combination's
/// variance down.
template <class PathValueFn>
std::pair<double, double> rr_combine(const RRScheme& scheme, std::size_t n_paths,
                                     std::uint64_t master_seed,
                                     PathValueFn&& path_value) {
    MCStats stats;
    std::size_t blowups = 0;
    for (std::size_t i = 0; i < n_paths; ++i) {
        NoiseStream stream(master_seed, i);
        double combo = 0.0;
        try {
            for (std::size_t k = 0; k < scheme.sigmas.size(); ++k) {
                stream.reset();
                combo += scheme.weights[k] * path_value(scheme.sigmas[k], stream);
            }
            if (!std::isfinite(combo)) throw NonFiniteState(0.0);
            stats.add(combo);
        } catch (const NonFiniteState&) {
            ++blowups;  // drop the whole ladder for this path; rate guarded below
        }
    }
    if (static_cast<double>(blowups) > 0.01 * static_cast<double>(n_paths))
        throw NonFiniteState(0.0);
    return {stats.mean(), stats.std_error()};
}

/// Extrapolated estimate of the plain value E[phi(X_T)].
template <DriftModel M>
std::pair<double, double> rr_estimate_value(const M& model,
                                            const ModelParams<M::dim>& params_base,
                                            int order, double T,
                                            const StepPolicy& policy,
                                            std::size_t n_paths,
                                            std::uint64_t master_seed) {
    const auto scheme = RRScheme::make(order, params_base.sigma);
    return rr_combine(scheme, n_paths, master_seed,
                      [&](double sigma, NoiseStream& stream) {
                          ModelParams<M::dim> p = params_base;
                          p.sigma = sigma;
                          return model.observable(
                              simulate_path(model, p, T, policy, stream).x);
                      });
}

/// Extrapolated sensitivity estimate for any single-path estimator kind.
template <DriftModel M>
std::pair<double, double> rr_estimate_sensitivity(
    const M& model, const ModelParams<M::dim>& params_base, EstimatorKind kind,
    int order, double T, const StepPolicy& policy, std::size_t n_paths,
    std::uint64_t master_seed, double spring) {
    const auto scheme = RRScheme::make(order, params_base.sigma);
    const Vec<M::dim> v0 =
        (kind == EstimatorKind::IsPsX0) ? ones_vec<M::dim>() : Vec<M::dim>{};
    return rr_combine(
        scheme, n_paths, master_seed, [&](double sigma, NoiseStream& stream) {
            ModelParams<M::dim> p = params_base;
            p.sigma = sigma;
            switch (kind) {
                case EstimatorKind::StandardPS:
                    return standard_ps_path(model, p, T, policy, stream).value;
                case EstimatorKind::Malliavin:
                    return malliavin_path(model, p, T, policy, stream).value;
                case EstimatorKind::IsPsTheta:
                    return is_ps_theta_path(model, p, T, policy, stream, spring).value;
                case EstimatorKind::IsPsSigma:
                    return is_ps_sigma_path(model, p, T, policy, stream, spring).value;
                case EstimatorKind::IsPsX0:
                    return is_ps_x0_path(model, p, T, policy, stream, spring, v0).value;
            }
            throw std::logic_error("unreachable estimator kind");
        });
}

/// Horizon rule for small-volatility runs: the equilibration rate scales
/// like sigma^2, so T(sigma) = T_ref (sigma_ref / sigma)^2, capped.
inline double horizon_for_sigma(double sigma, double t_ref = 2.0,
                                double sigma_ref = 15.0, double t_max = 500.0) {
    return std::min(t_ref * (sigma_ref / sigma) * (sigma_ref / sigma), t_max);
}

/// Long-run time average of the observable along the deterministic flow
/// (sigma ignored), via classical RK4 with the first `t_burn` units
/// discarded. Serves as the ODE ground truth for the weak-convergence
/// studies.
template <DriftModel M>
double ode_reference(const M& model, double theta, double T, double h,
                     const Vec<M::dim>& x0, double t_burn = 10.0) {
    constexpr std::size_t N = M::dim;
    Vec<N> x = x0;
    const auto n_steps = static_cast<std::uint64_t>(std::ceil(T / h - 1e-12));
    double acc = 0.0, time_acc = 0.0, t = 0.0;
    for (std::uint64_t n = 0; n < n_steps; ++n) {
        const double hn = (n + 1 < n_steps)
                              ? h
                              : std::max(T - h * static_cast<double>(n_steps - 1), 0.0);
        if (t >= t_burn) {
            acc += model.observable(x) * hn;
            time_acc += hn;
        }
        const Vec<N> k1 = model.drift(x, theta);
        const Vec<N> k2 = model.drift(x + (0.5 * hn) * k1, theta);
        const Vec<N> k3 = model.drift(x + (0.5 * hn) * k2, theta);
        const Vec<N> k4 = model.drift(x + hn * k3, theta);
        x += (hn / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += hn;
        if (!all_finite(x)) throw NonFiniteState(t);
    }
    if (time_acc <= 0.0)
        throw std::invalid_argument("ode_reference: T must exceed the burn-in");
    return acc / time_acc;
}

/// Central finite difference of ode_reference in theta.
template <DriftModel M>
double ode_sensitivity_fd(const M& model, double theta, double T, double h,
                          const Vec<M::dim>& x0, double d_theta = 0.5,
                          double t_burn = 10.0) {
    const double up = ode_reference(model, theta + 0.5 * d_theta, T, h, x0, t_burn);
    const double dn = ode_reference(model, theta - 0.5 * d_theta, T, h, x0, t_burn);
    return (up - dn) / d_theta;
}

}  // namespace sdesens
