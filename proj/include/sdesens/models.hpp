#pragma once

#include <cmath>
#include <concepts>
#include <cstddef>
#include <stdexcept>

#include "sdesens/vec.hpp"

namespace sdesens {

/// Run parameters shared by every simulation: the drift parameter theta,
/// the additive volatility sigma, and the initial state.
///
/// sigma = 0 is permitted only for deterministic reference runs; every
/// estimator requires sigma > 0.
template <std::size_t N>
struct ModelParams {
    double theta = 0.0;
    double sigma = 0.0;
    Vec<N> x0{};
};

/// A model bundles the drift f(theta; x), its state Jacobian df/dx, the
/// perturbation direction gamma(x) = df/dtheta, and a scalar observable
/// phi with gradient. The observable must have polynomial growth; that is
/// a caller contract, not a runtime check.
template <class M>
concept DriftModel = requires(const M& m, const Vec<M::dim>& x, double theta) {
    { M::dim } -> std::convertible_to<std::size_t>;
    { m.drift(x, theta) } -> std::same_as<Vec<M::dim>>;
    { m.drift_jac(x, theta) } -> std::same_as<Mat<M::dim>>;
    { m.drift_dtheta(x, theta) } -> std::same_as<Vec<M::dim>>;
    { m.observable(x) } -> std::convertible_to<double>;
    { m.observable_grad(x) } -> std::same_as<Vec<M::dim>>;
};

/// Stochastic Lorenz system with the classical coefficients 10 and 8/3;
/// theta plays the rho role. Observable is the third coordinate.
struct LorenzModel {
    static constexpr std::size_t dim = 3;

    Vec<3> drift(const Vec<3>& x, double theta) const {
        return {10.0 * (x[1] - x[0]),
                x[0] * (theta - x[2]) - x[1],
                x[0] * x[1] - (8.0 / 3.0) * x[2]};
    }

    Mat<3> drift_jac(const Vec<3>& x, double theta) const {
        return {{{-10.0, 10.0, 0.0},
                 {theta - x[2], -1.0, -x[0]},
                 {x[1], x[0], -8.0 / 3.0}}};
    }

    Vec<3> drift_dtheta(const Vec<3>& x, double /*theta*/) const {
        return {0.0, x[0], 0.0};
    }

    double observable(const Vec<3>& x) const { return x[2]; }

    Vec<3> observable_grad(const Vec<3>& /*x*/) const { return {0.0, 0.0, 1.0}; }
};

/// One-dimensional Ornstein-Uhlenbeck test model
///     dX = kappa (mu + theta - X) dt + sigma dW.
///
/// theta shifts the reversion level, so the theta-sensitivity at theta = 0
/// is the mu-sensitivity and gamma(x) = kappa is constant. The model is
/// the closed-form oracle for every estimator:
///     E[X_T]            = (mu + theta) + (x0 - mu - theta) e^{-kappa T}
///     dE[X_T]/dmu       = 1 - e^{-kappa T}
///     dE[X_T]/dx0       = e^{-kappa T}
///     dE[X_T]/dsigma    = 0
class OuModel {
public:
    static constexpr std::size_t dim = 1;

    OuModel(double kappa, double mu) : kappa_(kappa), mu_(mu) {
        if (kappa <= 0.0)
            throw std::invalid_argument("OuModel: kappa must be > 0 (mean reversion)");
    }

    double kappa() const { return kappa_; }
    double mu() const { return mu_; }

    Vec<1> drift(const Vec<1>& x, double theta) const {
        return {kappa_ * (mu_ + theta - x[0])};
    }

    Mat<1> drift_jac(const Vec<1>& /*x*/, double /*theta*/) const {
        return {{{-kappa_}}};
    }

    Vec<1> drift_dtheta(const Vec<1>& /*x*/, double /*theta*/) const {
        return {kappa_};
    }

    double observable(const Vec<1>& x) const { return x[0]; }

    Vec<1> observable_grad(const Vec<1>& /*x*/) const { return {1.0}; }

    double mean_at(const ModelParams<1>& p, double T) const {
        const double level = mu_ + p.theta;
        return level + (p.x0[0] - level) * std::exp(-kappa_ * T);
    }

    double dmean_dmu(double T) const { return 1.0 - std::exp(-kappa_ * T); }
    double dmean_dx0(double T) const { return std::exp(-kappa_ * T); }
    static double dmean_dsigma() { return 0.0; }

private:
    double kappa_;
    double mu_;
};

}  // namespace sdesens
