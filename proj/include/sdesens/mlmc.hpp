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

struct UnsupportedKind : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct MaxLevelsExceeded : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Fine and coarse paths advanced under the simulation measure with a
/// contracting spring between them, plus the per-path log Radon-Nikodym
/// weights and estimator accumulators. Each accumulator is fed with its own
/// path's reconstructed measure-consistent increments.
template <std::size_t N>
struct CoupledLevelState {
    double t = 0.0;
    Vec<N> y_fine{};
    Vec<N> y_coarse{};
    Vec<N> v_fine{};
    Vec<N> v_coarse{};
    double log_rn_fine = 0.0;
    double log_rn_coarse = 0.0;
    double ito_fine = 0.0;
    double ito_coarse = 0.0;
    std::uint64_t steps = 0;
};

struct LevelResult {
    int level = 0;
    std::size_t n_samples = 0;
    double mean = 0.0;
    double variance = 0.0;
    double cost_per_sample = 0.0;
};

struct MlmcConfig {
    double target_rmse = 0.01;
    double h0 = 1.0 / 64.0;
    double spring = 10.0;
    int max_levels = 24;
    std::size_t n_init = 1000;
    std::uint64_t seed = 0;
    /// When false the coupling spring and RN weights are switched off and
    /// the level estimator degenerates to the classical shared-noise MLMC
    /// difference (used to demonstrate why the change of measure is needed
    /// on chaotic models).
    bool change_of_measure = true;
};

struct MlmcReport {
    double estimate = 0.0;
    double total_cost = 0.0;
    double alpha = 0.0;  // weak rate,   |E[Y_l]|    ~ 2^{-alpha l}
    double beta = 0.0;   // strong rate, V[Y_l]      ~ 2^{-beta  l}
    std::vector<LevelResult> levels;
};

/// One-step Girsanov increment of the log RN weight d(self measure)/dP for
/// a path whose simulated drift carries the spring shift S(other - self).
/// Exact for the Gaussian one-step transition of the Euler scheme:
///   log_rn += (S/sigma) <self - other, dW> - (S^2 / 2 sigma^2) ||self - other||^2 h.
inline double rn_weight_update_scalar(double log_rn, double spring_term_dot_dW,
                                      double diff_sq, double h, double S,
                                      double sigma) {
    return log_rn + (S / sigma) * spring_term_dot_dW -
           0.5 * (S * S) / (sigma * sigma) * diff_sq * h;
}

template <std::size_t N>
double rn_weight_update(double log_rn, const Vec<N>& self_y, const Vec<N>& other_y,
                        const Vec<N>& dW, double h, double S, double sigma) {
    if (sigma <= 0.0) throw std::invalid_argument("rn_weight_update: sigma must be > 0");
    const Vec<N> diff = self_y - other_y;
    return rn_weight_update_scalar(log_rn, dot(diff, dW), dot(diff, diff), h, S, sigma);
}

/// Reconstruct the increment of the Brownian motion under the self path's
/// own measure from the simulated increment:
///   dW_self = dW_P + (S/sigma)(other - self) h.
/// Estimator Ito accumulators must consume these, not dW_P.
template <std::size_t N>
Vec<N> reconstruct_q_increment(const Vec<N>& dW_p, const Vec<N>& self_y,
                               const Vec<N>& other_y, double h, double S,
                               double sigma) {
    if (sigma <= 0.0)
        throw std::invalid_argument("reconstruct_q_increment: sigma must be > 0");
    Vec<N> r = dW_p;
    const double c = (S / sigma) * h;
    for (std::size_t i = 0; i < N; ++i) r[i] += c * (other_y[i] - self_y[i]);
    return r;
}

/// Everything a level estimator needs from one coarse step: the
/// reconstructed increments for the two fine substeps and the coarse step,
/// the left-endpoint states they apply at, and the simulated coarse
/// increment itself (always the sum of the two fine increments).
template <std::size_t N>
struct CoupledStepIncrements {
    Vec<N> q_fine1{}, q_fine2{}, q_coarse{};
    Vec<N> y_fine_left1{}, y_fine_left2{}, y_coarse_left{};
    Vec<N> dW_coarse{};
    double h_fine = 0.0, h_coarse = 0.0;
};

/// Advance the coupled pair over one coarse step of size h_c. The fine path
/// takes two half steps with increments dW1, dW2 (each of variance h_c/2);
/// the coarse path takes one step with dW1 + dW2.
///
/// One shared spring displacement delta0 = y_coarse - y_fine, frozen at the
/// start of the coarse step, drives both fine substeps (+S delta0) and the
/// coarse step (-S delta0). Freezing the displacement at the coarse grid is
/// what keeps every Girsanov integrand at the strong-error scale O(h); a
/// displacement against a mid-step state would pick up the unshared
/// half-step noise and inflate the weight variance by orders of magnitude.
/// The RN weights accumulate the exact one-step Girsanov factors of the
/// realized shifts.
template <DriftModel M>
CoupledStepIncrements<M::dim> coupled_step(CoupledLevelState<M::dim>& s, double h_c,
                                           const Vec<M::dim>& dW1,
                                           const Vec<M::dim>& dW2, const M& model,
                                           const ModelParams<M::dim>& params,
                                           double S) {
    constexpr std::size_t N = M::dim;
    const double h_f = 0.5 * h_c;
    const double sigma = params.sigma;
    const Vec<N> yf0 = s.y_fine;
    const Vec<N> yc0 = s.y_coarse;

    CoupledStepIncrements<N> inc;
    inc.h_fine = h_f;
    inc.h_coarse = h_c;
    inc.y_fine_left1 = yf0;
    inc.y_coarse_left = yc0;

    // fine substep 1
    inc.q_fine1 = reconstruct_q_increment(dW1, yf0, yc0, h_f, S, sigma);
    s.log_rn_fine = rn_weight_update(s.log_rn_fine, yf0, yc0, dW1, h_f, S, sigma);
    Vec<N> yf1 = model.drift(yf0, params.theta);
    for (std::size_t i = 0; i < N; ++i)
        yf1[i] = yf0[i] + (yf1[i] + S * (yc0[i] - yf0[i])) * h_f + sigma * dW1[i];

    // fine substep 2: drift at yf1, spring displacement still (yc0 - yf0)
    inc.y_fine_left2 = yf1;
    inc.q_fine2 = reconstruct_q_increment(dW2, yf0, yc0, h_f, S, sigma);
    s.log_rn_fine = rn_weight_update(s.log_rn_fine, yf0, yc0, dW2, h_f, S, sigma);
    Vec<N> yf2 = model.drift(yf1, params.theta);
    for (std::size_t i = 0; i < N; ++i)
        yf2[i] = yf1[i] + (yf2[i] + S * (yc0[i] - yf0[i])) * h_f + sigma * dW2[i];

    // coarse step, fine partner frozen at yf0
    const Vec<N> dWc = dW1 + dW2;
    inc.dW_coarse = dWc;
    inc.q_coarse = reconstruct_q_increment(dWc, yc0, yf0, h_c, S, sigma);
    s.log_rn_coarse = rn_weight_update(s.log_rn_coarse, yc0, yf0, dWc, h_c, S, sigma);
    Vec<N> yc1 = model.drift(yc0, params.theta);
    for (std::size_t i = 0; i < N; ++i)
        yc1[i] = yc0[i] + (yc1[i] + S * (yf0[i] - yc0[i])) * h_c + sigma * dWc[i];

    s.y_fine = yf2;
    s.y_coarse = yc1;
    s.t += h_c;
    s.steps += 3;

    if (!all_finite(s.y_fine) || !all_finite(s.y_coarse) ||
        !std::isfinite(s.log_rn_fine) || !std::isfinite(s.log_rn_coarse))
        throw NonFiniteState(s.t);
    return inc;
}

namespace detail {

template <DriftModel M>
double assemble_estimator_value(const M& model, EstimatorKind kind, const Vec<M::dim>& y,
                                const Vec<M::dim>& v, double ito_acc) {
    if (kind == EstimatorKind::Malliavin) return model.observable(y) * ito_acc;
    return dot(model.observable_grad(y), v) + model.observable(y) * ito_acc;
}

}  // namespace detail

/// One multilevel sample. Level 0 is the plain single-path estimator at
/// step h0 (RN weight 1); level l >= 1 is
///   phi~(fine) exp(log_rn_fine) - phi~(coarse) exp(log_rn_coarse)
/// with steps h0 2^-l and h0 2^-(l-1), where phi~ is the full estimator
/// functional evaluated with each path's reconstructed increments.
template <DriftModel M>
std::pair<double, std::uint64_t> level_sample(int level, const M& model,
                                              const ModelParams<M::dim>& params,
                                              EstimatorKind kind, double T,
                                              const MlmcConfig& cfg,
                                              NoiseStream& stream) {
    constexpr std::size_t N = M::dim;
    if (kind == EstimatorKind::StandardPS)
        throw UnsupportedKind("StandardPS is not multileveled");
    const Vec<N> v0 = (kind == EstimatorKind::IsPsX0) ? ones_vec<N>() : Vec<N>{};

    if (level == 0) {
        const auto s = sample_estimator(model, params, kind, T,
                                        StepPolicy::uniform(cfg.h0), stream,
                                        cfg.spring, v0);
        return {s.value, s.cost};
    }

    const double h_f = cfg.h0 * std::pow(2.0, -level);
    const double h_c = 2.0 * h_f;
    const double s_couple = cfg.change_of_measure ? cfg.spring : 0.0;
    const auto n_coarse = static_cast<std::uint64_t>(std::ceil(T / h_c - 1e-12));
    const double hc_last =
        std::max(T - h_c * static_cast<double>(n_coarse - 1), 0.0);

    CoupledLevelState<N> st;
    st.y_fine = st.y_coarse = params.x0;
    st.v_fine = st.v_coarse = v0;

    for (std::uint64_t n = 0; n < n_coarse; ++n) {
        const double hc_n = (n + 1 < n_coarse) ? h_c : hc_last;
        const double sq = std::sqrt(0.5 * hc_n);
        const Vec<N> dW1 = sq * stream.gaussian_vec<N>();
        const Vec<N> dW2 = sq * stream.gaussian_vec<N>();
        const auto inc = coupled_step(st, hc_n, dW1, dW2, model, params, s_couple);
        detail::advance_variation_at(st.v_fine, st.ito_fine, inc.y_fine_left1, kind,
                                     inc.h_fine, inc.q_fine1, model, params,
                                     cfg.spring);
        detail::advance_variation_at(st.v_fine, st.ito_fine, inc.y_fine_left2, kind,
                                     inc.h_fine, inc.q_fine2, model, params,
                                     cfg.spring);
        detail::advance_variation_at(st.v_coarse, st.ito_coarse, inc.y_coarse_left,
                                     kind, inc.h_coarse, inc.q_coarse, model, params,
                                     cfg.spring);
        if (!all_finite(st.v_fine) || !all_finite(st.v_coarse) ||
            !std::isfinite(st.ito_fine) || !std::isfinite(st.ito_coarse))
            throw NonFiniteState(st.t);
    }

    const double vf =
        detail::assemble_estimator_value(model, kind, st.y_fine, st.v_fine, st.ito_fine);
    const double vc = detail::assemble_estimator_value(model, kind, st.y_coarse,
                                                       st.v_coarse, st.ito_coarse);
    const double value =
        vf * std::exp(st.log_rn_fine) - vc * std::exp(st.log_rn_coarse);
    if (!std::isfinite(value)) throw NonFiniteState(T);
    return {value, st.steps};
}

/// Standard MLMC driver: warm-up samples per level, optimal sample
/// allocation N_l ~ sqrt(V_l / C_l) against the eps^2/2 variance budget,
/// and the usual weak-rate bias test |mean_L| / (2^alpha - 1) <= eps/sqrt(2)
/// for deciding whether to add levels.
template <DriftModel M>
MlmcReport mlmc_driver(const M& model, const ModelParams<M::dim>& params,
                       EstimatorKind kind, double T, const MlmcConfig& cfg) {
    if (cfg.target_rmse <= 0.0)
        throw std::invalid_argument("mlmc_driver: target_rmse must be > 0");
    if (cfg.h0 <= 0.0) throw std::invalid_argument("mlmc_driver: h0 must be > 0");
    if (cfg.max_levels < 1 || cfg.max_levels > 24)
        throw std::invalid_argument("mlmc_driver: max_levels must be in [1, 24]");

    const double eps = cfg.target_rmse;
    int L = std::min(2, cfg.max_levels - 1);
    std::vector<MCStats> stats(static_cast<std::size_t>(L) + 1);
    std::vector<double> cost_sum(static_cast<std::size_t>(L) + 1, 0.0);
    double total_cost = 0.0;

    auto ensure_samples = [&](int level, std::size_t n_target) {
        auto& st = stats[static_cast<std::size_t>(level)];
        const std::uint64_t level_seed =
            sdesens::detail::splitmix64(sdesens::detail::splitmix64(cfg.seed) ^
                                        static_cast<std::uint64_t>(level));
        for (std::size_t i = st.count(); i < n_target; ++i) {
            NoiseStream stream(level_seed, i);
            const auto [value, steps] =
                level_sample(level, model, params, kind, T, cfg, stream);
            st.add(value);
            cost_sum[static_cast<std::size_t>(level)] += static_cast<double>(steps);
            total_cost += static_cast<double>(steps);
        }
    };

    auto weak_rate = [&]() {
        std::vector<double> ls, ms;
        for (int l = 1; l <= L; ++l) {
            const double m = std::abs(stats[static_cast<std::size_t>(l)].mean());
            if (m > 0.0) {
                ls.push_back(static_cast<double>(l));
                ms.push_back(std::log2(m));
            }
        }
        if (ls.size() < 2) return 1.0;
        return std::max(0.5, -fit_loglinear(ls, ms, FitTransform::LinLin).slope);
    };

    bool converged = false;
    while (!converged) {
        for (int l = 0; l <= L; ++l) ensure_samples(l, cfg.n_init);

        // fixed-point allocation: variance estimates sharpen as samples
        // arrive, so re-solve until no level wants materially more
        for (int round = 0; round < 16; ++round) {
            double sum_vc = 0.0;
            std::vector<double> v(static_cast<std::size_t>(L) + 1),
                c(static_cast<std::size_t>(L) + 1);
            for (int l = 0; l <= L; ++l) {
                const auto& st = stats[static_cast<std::size_t>(l)];
                v[static_cast<std::size_t>(l)] = st.variance();
                c[static_cast<std::size_t>(l)] =
                    cost_sum[static_cast<std::size_t>(l)] /
                    static_cast<double>(st.count());
                sum_vc += std::sqrt(v[static_cast<std::size_t>(l)] *
                                    c[static_cast<std::size_t>(l)]);
            }
            bool grew = false;
            for (int l = 0; l <= L; ++l) {
                const double opt = 2.0 / (eps * eps) *
                                   std::sqrt(v[static_cast<std::size_t>(l)] /
                                             c[static_cast<std::size_t>(l)]) *
                                   sum_vc;
                const auto want = static_cast<std::size_t>(std::ceil(opt));
                const auto have = stats[static_cast<std::size_t>(l)].count();
                if (want > have + have / 100) {
                    ensure_samples(l, want);
                    grew = true;
                }
            }
            if (!grew) break;
        }

        const double alpha = weak_rate();
        const double bias = std::abs(stats[static_cast<std::size_t>(L)].mean()) /
                            (std::pow(2.0, alpha) - 1.0);
        if (L >= 1 && bias <= eps / std::sqrt(2.0)) {
            converged = true;
        } else if (L + 1 >= cfg.max_levels) {
            throw MaxLevelsExceeded("mlmc_driver: bias test failed at max_levels");
        } else {
            ++L;
            stats.emplace_back();
            cost_sum.push_back(0.0);
        }
    }

    MlmcReport report;
    for (int l = 0; l <= L; ++l) {
        const auto& st = stats[static_cast<std::size_t>(l)];
        report.estimate += st.mean();
        report.levels.push_back({l, st.count(), st.mean(), st.variance(),
                                 cost_sum[static_cast<std::size_t>(l)] /
                                     static_cast<double>(st.count())});
    }
    report.total_cost = total_cost;
    report.alpha = weak_rate();
    {
        std::vector<double> ls, vs;
        for (int l = 1; l <= L; ++l) {
            const double vl = stats[static_cast<std::size_t>(l)].variance();
            if (vl > 0.0) {
                ls.push_back(static_cast<double>(l));
                vs.push_back(std::log2(vl));
            }
        }
        report.beta = ls.size() >= 2
                          ? -fit_loglinear(ls, vs, FitTransform::LinLin).slope
                          : 0.0;
    }
    return report;
}

}  // namespace sdesens
