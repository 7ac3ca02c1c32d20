#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "sdesens/mlmc.hpp"
#include "test_support.hpp"

using namespace sdesens;
using namespace sdesens_test;

TEST_CASE("rn_weight_update leaves the weight alone in degenerate cases") {
    const Vec<3> y{1.0, -2.0, 0.5};
    const Vec<3> dW{0.3, 0.1, -0.2};
    SECTION("identical paths") {
        REQUIRE(rn_weight_update(1.7, y, y, dW, 0.01, 10.0, 6.0) == 1.7);
    }
    SECTION("spring off") {
        const Vec<3> other{0.0, 1.0, 2.0};
        REQUIRE(rn_weight_update(1.7, y, other, dW, 0.01, 0.0, 6.0) == 1.7);
    }
    SECTION("sigma zero rejected") {
        REQUIRE_THROWS_AS(rn_weight_update(0.0, y, y, dW, 0.01, 10.0, 0.0),
                          std::invalid_argument);
    }
}

TEST_CASE("reconstruct_q_increment degenerate cases") {
    const Vec<3> dW{0.3, 0.1, -0.2};
    const Vec<3> a{1.0, 2.0, 3.0}, b{0.0, -1.0, 5.0};
    REQUIRE(reconstruct_q_increment(dW, a, a, 0.01, 10.0, 6.0) == dW);
    REQUIRE(reconstruct_q_increment(dW, a, b, 0.01, 0.0, 6.0) == dW);
    const auto q = reconstruct_q_increment(dW, a, b, 0.01, 10.0, 6.0);
    for (std::size_t i = 0; i < 3; ++i)
        REQUIRE(q[i] == Catch::Approx(dW[i] + (10.0 / 6.0) * (b[i] - a[i]) * 0.01));
}

TEST_CASE("one-step change of measure is exact for the Euler transition") {
    // One Euler step with a spring shift s = S (other - self) h on top of
    // drift f: the weighted mean E[(y0 + f h + s + sigma dW) * exp(log_rn)]
    // must equal the unshifted mean y0 + f h. Gaussian integration by parts
    // gives the closed form  c0 + sigma * alpha * h  for the weighted mean,
    // so correctness pins the sign of the Girsanov increment.
    const double y0 = 0.4, other = 1.3, f = -0.7, sigma = 1.6, S = 3.0, h = 0.25;
    MCStats weighted;
    for (std::size_t i = 0; i < 400'000; ++i) {
        NoiseStream s(4242, i);
        const double dw = std::sqrt(h) * s.gaussian();
        const double y1 = y0 + f * h + S * (other - y0) * h + sigma * dw;
        const double log_rn =
            rn_weight_update<1>(0.0, {y0}, {other}, {dw}, h, S, sigma);
        weighted.add(y1 * std::exp(log_rn));
    }
    const double plain_mean = y0 + f * h;
    REQUIRE(std::abs(weighted.mean() - plain_mean) < 4.0 * weighted.std_error());
    // and the closed form agrees: c0 + sigma*alpha*h with alpha = (S/sigma)(self-other)
    const double c0 = y0 + f * h + S * (other - y0) * h;
    const double alpha = (S / sigma) * (y0 - other);
    REQUIRE(c0 + sigma * alpha * h == Catch::Approx(plain_mean));
}

TEST_CASE("coupled_step consistency") {
    const LorenzModel m;
    SECTION("no noise, no drift: pair stays glued, weights stay zero") {
        const FlatModel flat;
        const ModelParams<1> p{0.0, 1.0, {0.7}};
        CoupledLevelState<1> s;
        s.y_fine = s.y_coarse = p.x0;
        const Vec<1> zero{};
        for (int n = 0; n < 16; ++n) {
            const auto inc = coupled_step(s, 1.0 / 64.0, zero, zero, flat, p, 10.0);
            REQUIRE(inc.q_coarse == zero);
        }
        REQUIRE(s.y_fine == p.x0);
        REQUIRE(s.y_coarse == p.x0);
        REQUIRE(s.log_rn_fine == 0.0);
        REQUIRE(s.log_rn_coarse == 0.0);
    }
    SECTION("coarse increment is the sum of the fine increments, exactly") {
        CoupledLevelState<3> s;
        s.y_fine = kLorenzParams.x0;
        s.y_coarse = kLorenzParams.x0 + Vec<3>{0.01, -0.02, 0.005};
        NoiseStream rng(17, 4);
        const auto dW1 = rng.gaussian_vec<3>();
        const auto dW2 = rng.gaussian_vec<3>();
        // with the spring off the reconstructed coarse increment IS the
        // simulated coarse increment
        const auto inc = coupled_step(s, 1.0 / 64.0, dW1, dW2, m, kLorenzParams, 0.0);
        REQUIRE(inc.q_coarse == dW1 + dW2);
    }
    SECTION("weights cancel pairwise in expectation (fine side)") {
        // RN mean-one along a genuine coupled lorenz run
        MCStats rn;
        const double h0 = 1.0 / 64.0;
        for (std::size_t i = 0; i < 20'000; ++i) {
            NoiseStream st(900, i);
            CoupledLevelState<3> s;
            s.y_fine = s.y_coarse = kLorenzParams.x0;
            const double hf = h0 / 4.0, hc = h0 / 2.0;
            const auto nc = static_cast<std::uint64_t>(std::ceil(5.0 / hc - 1e-12));
            for (std::uint64_t n = 0; n < nc; ++n) {
                const auto dW1 = std::sqrt(hf) * st.gaussian_vec<3>();
                const auto dW2 = std::sqrt(hf) * st.gaussian_vec<3>();
                coupled_step(s, hc, dW1, dW2, m, kLorenzParams, 10.0);
            }
            rn.add(std::exp(s.log_rn_fine));
        }
        REQUIRE(std::abs(rn.mean() - 1.0) < 4.0 * rn.std_error());
    }
}

TEST_CASE("level 0 sample reduces to the single-path estimator exactly") {
    const LorenzModel m;
    MlmcConfig cfg;
    cfg.h0 = 1.0 / 64.0;
    cfg.spring = 10.0;
    NoiseStream s1(41, 6), s2(41, 6);
    const auto [value, cost] =
        level_sample(0, m, kLorenzParams, EstimatorKind::IsPsTheta, 3.0, cfg, s1);
    const auto single =
        is_ps_theta_path(m, kLorenzParams, 3.0, StepPolicy::uniform(cfg.h0), s2, 10.0);
    REQUIRE(value == single.value);
    REQUIRE(cost == single.cost);
}

TEST_CASE("standard pathwise kind is not multileveled") {
    const LorenzModel m;
    MlmcConfig cfg;
    NoiseStream s(1, 0);
    REQUIRE_THROWS_AS(
        level_sample(1, m, kLorenzParams, EstimatorKind::StandardPS, 1.0, cfg, s),
        UnsupportedKind);
}

TEST_CASE("degenerate coupling matches a hand-rolled classical level difference") {
    // change_of_measure off: shared noise, uncoupled drift, RN = 1
    const OuModel m(1.0, 0.0);
    MlmcConfig cfg;
    cfg.h0 = 1.0 / 8.0;
    cfg.spring = 1.0;
    cfg.change_of_measure = false;
    const int level = 2;
    const double T = 1.0;

    NoiseStream s1(77, 8);
    const auto [value, cost] =
        level_sample(level, m, kOuParams, EstimatorKind::Malliavin, T, cfg, s1);

    // manual classical difference with the same draw order
    NoiseStream s2(77, 8);
    const double hf = cfg.h0 * std::pow(2.0, -level), hc = 2.0 * hf;
    const auto nc = static_cast<std::uint64_t>(std::ceil(T / hc - 1e-12));
    double xf = kOuParams.x0[0], xc = kOuParams.x0[0], accf = 0.0, accc = 0.0;
    for (std::uint64_t n = 0; n < nc; ++n) {
        const double d1 = std::sqrt(hf) * s2.gaussian();
        const double d2 = std::sqrt(hf) * s2.gaussian();
        accf += (m.drift_dtheta({xf}, 0.0)[0] / kOuParams.sigma) * d1;
        xf += m.drift({xf}, 0.0)[0] * hf + kOuParams.sigma * d1;
        accf += (m.drift_dtheta({xf}, 0.0)[0] / kOuParams.sigma) * d2;
        xf += m.drift({xf}, 0.0)[0] * hf + kOuParams.sigma * d2;
        accc += (m.drift_dtheta({xc}, 0.0)[0] / kOuParams.sigma) * (d1 + d2);
        xc += m.drift({xc}, 0.0)[0] * hc + kOuParams.sigma * (d1 + d2);
    }
    const double manual = m.observable({xf}) * accf - m.observable({xc}) * accc;
    REQUIRE(value == Catch::Approx(manual).epsilon(1e-12));
}

TEST_CASE("telescoped level means match a fine single-level run (ou)") {
    const OuModel m(1.0, 0.0);
    MlmcConfig cfg;
    cfg.h0 = 1.0 / 16.0;
    cfg.spring = 1.0;
    const double T = 1.0;
    const std::size_t n = 20'000;

    double sum = 0.0, var_of_sum = 0.0;
    for (int l = 0; l <= 3; ++l) {
        MCStats st;
        for (std::size_t i = 0; i < n; ++i) {
            NoiseStream s(3000 + static_cast<std::uint64_t>(l), i);
            st.add(level_sample(l, m, kOuParams, EstimatorKind::Malliavin, T, cfg, s).first);
        }
        sum += st.mean();
        var_of_sum += st.variance() / static_cast<double>(n);
    }
    MCStats fine;
    for (std::size_t i = 0; i < n; ++i) {
        NoiseStream s(3999, i);
        fine.add(malliavin_path(m, kOuParams, T, StepPolicy::uniform(cfg.h0 / 8.0), s).value);
    }
    const double se =
        std::sqrt(var_of_sum + fine.variance() / static_cast<double>(n));
    REQUIRE(std::abs(sum - fine.mean()) < 3.0 * se);
}

TEST_CASE("ou level variances decay at second order") {
    const OuModel m(1.0, 0.0);
    MlmcConfig cfg;
    cfg.h0 = 1.0 / 8.0;
    cfg.spring = 1.0;
    std::vector<double> ls, vs;
    for (int l = 1; l <= 4; ++l) {
        MCStats st;
        for (std::size_t i = 0; i < 20'000; ++i) {
            NoiseStream s(500 + static_cast<std::uint64_t>(l), i);
            st.add(level_sample(l, m, kOuParams, EstimatorKind::Malliavin, 1.0, cfg, s).first);
        }
        ls.push_back(l);
        vs.push_back(std::log2(st.variance()));
    }
    const double slope = fit_loglinear(ls, vs, FitTransform::LinLin).slope;
    REQUIRE(slope > -2.6);
    REQUIRE(slope < -1.4);
}

TEST_CASE("mlmc driver hits the analytic ou sensitivity") {
    const OuModel m(1.0, 0.0);
    MlmcConfig cfg;
    cfg.target_rmse = 0.01;
    cfg.h0 = 1.0 / 16.0;
    cfg.spring = 1.0;
    cfg.seed = 99;
    const auto report = mlmc_driver(m, kOuParams, EstimatorKind::Malliavin, 1.0, cfg);
    REQUIRE(std::abs(report.estimate - m.dmean_dmu(1.0)) < 3.0 * cfg.target_rmse);
    REQUIRE(report.levels.size() >= 2);
    REQUIRE(report.total_cost > 0.0);
}

TEST_CASE("mlmc driver throws when the level budget cannot meet the bias test") {
    const OuModel m(1.0, 0.0);
    MlmcConfig cfg;
    cfg.target_rmse = 0.02;  // variance budget is cheap; bias cannot be assessed
    cfg.h0 = 0.5;
    cfg.spring = 1.0;
    cfg.max_levels = 1;  // level 0 only: no level-1 mean, bias test must fail
    REQUIRE_THROWS_AS(mlmc_driver(m, kOuParams, EstimatorKind::Malliavin, 1.0, cfg),
                      MaxLevelsExceeded);
}
