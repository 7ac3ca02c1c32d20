#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "sdesens/estimators.hpp"
#include "sdesens/integrate.hpp"
#include "sdesens/models.hpp"
#include "sdesens/stats.hpp"
#include "test_support.hpp"

using namespace sdesens;
using namespace sdesens_test;

TEST_CASE("em_step") {
    SECTION("pure noise step") {
        const FlatModel m;
        const ModelParams<1> p{0.0, 1.0, {2.0}};
        const auto x = em_step<FlatModel>({2.0}, 0.3, {0.5}, m, p);
        REQUIRE(x[0] == 2.5);
    }
    SECTION("ou drift step without noise") {
        const OuModel m(1.0, 0.0);
        const ModelParams<1> p{0.0, 0.0, {1.0}};
        const auto x = em_step<OuModel>({1.0}, 0.5, {0.0}, m, p);
        REQUIRE(x[0] == Catch::Approx(1.0 + (-1.0) * 0.5));
    }
    SECTION("lorenz step at reference point") {
        const LorenzModel m;
        const ModelParams<3> p{28.0, 6.0, {-2.4, -3.7, 14.98}};
        const auto x = em_step<LorenzModel>({-2.4, -3.7, 14.98}, 0.01, {0, 0, 0}, m, p);
        REQUIRE(x[0] == Catch::Approx(-2.4 + 0.01 * -13.0));
        REQUIRE(x[1] == Catch::Approx(-3.7 + 0.01 * -27.548));
        REQUIRE(x[2] == Catch::Approx(14.98 + 0.01 * (-2.4 * -3.7 - (8.0 / 3.0) * 14.98)));
    }
}

TEST_CASE("adaptive_step_size clamps") {
    const StepPolicy pol = StepPolicy::adaptive(std::pow(2.0, -9));
    SECTION("zero drift returns the cap delta") {
        const FlatModel m;
        REQUIRE(adaptive_step_size<FlatModel>({0.0}, m, {0.0, 1.0, {0.0}}, pol) ==
                pol.h_max());
    }
    SECTION("moderate drift returns delta over the norm") {
        // OU with kappa=4, x=-1, level 0: |f| = 4
        const OuModel m(4.0, 0.0);
        REQUIRE(adaptive_step_size<OuModel>({-1.0}, m, {0.0, 1.0, {0.0}}, pol) ==
                Catch::Approx(std::pow(2.0, -11)));
    }
    SECTION("huge drift hits the floor") {
        const OuModel m(1.0, 0.0);
        const Vec<1> x{-std::pow(2.0, 20)};
        REQUIRE(adaptive_step_size(x, m, {0.0, 1.0, {0.0}}, pol) ==
                Catch::Approx(std::pow(2.0, -19)));
    }
}

TEST_CASE("uniform stepping takes exactly ceil(T/h) steps") {
    const OuModel m(1.0, 0.0);
    const ModelParams<1> p{0.0, 0.5, {1.0}};
    struct Case {
        double T, h;
        std::uint64_t steps;
    };
    for (const auto& c : std::vector<Case>{{1.0, 1.0 / 128.0, 128},
                                           {1.0, 0.3, 4},
                                           {0.25, 0.25, 1},
                                           {2.5, 1.0 / 3.0, 8}}) {
        NoiseStream s(1, 0);
        const auto end = simulate_path(m, p, c.T, StepPolicy::uniform(c.h), s);
        REQUIRE(end.steps == c.steps);
    }
}

TEST_CASE("reproducibility: identical seeds give bit-identical terminal states") {
    const LorenzModel m;
    const ModelParams<3> p = kLorenzParams;
    for (const auto pol : {StepPolicy::uniform(1.0 / 128.0),
                           StepPolicy::adaptive(std::pow(2.0, -9))}) {
        NoiseStream s1(77, 3), s2(77, 3);
        const auto a = simulate_augmented(m, p, EstimatorKind::IsPsTheta, 2.0, pol, s1, 10.0);
        const auto b = simulate_augmented(m, p, EstimatorKind::IsPsTheta, 2.0, pol, s2, 10.0);
        REQUIRE(a.x == b.x);
        REQUIRE(a.v == b.v);
        REQUIRE(a.ito_acc == b.ito_acc);
        REQUIRE(a.steps == b.steps);
    }
}

TEST_CASE("adaptive steps stay within [h_min, h_max] and cover [0, T]") {
    const LorenzModel m;
    const StepPolicy pol = StepPolicy::adaptive(std::pow(2.0, -9));
    ModelParams<3> p = kLorenzParams;
    NoiseStream s(5, 11);
    const auto end = simulate_augmented(m, p, EstimatorKind::Malliavin, 0.5, pol, s);
    REQUIRE(end.t == 0.5);
    // every step is at most h_max, so at least T/h_max steps happened
    REQUIRE(end.steps >= static_cast<std::uint64_t>(0.5 / pol.h_max()));
}

TEST_CASE("zero-gamma model: variation and accumulator stay zero") {
    const ZeroGammaLorenz m;
    const ModelParams<3> p = kLorenzParams;
    NoiseStream s(9, 2);
    const auto end =
        simulate_augmented(m, p, EstimatorKind::StandardPS, 2.0, StepPolicy::uniform(1.0 / 128.0), s);
    REQUIRE(end.v == Vec<3>{0, 0, 0});
    REQUIRE(end.ito_acc == 0.0);
}

TEST_CASE("spring at zero reduces the IS variation to the standard one") {
    const LorenzModel m;
    const ModelParams<3> p = kLorenzParams;
    NoiseStream s1(123, 7), s2(123, 7);
    const auto pol = StepPolicy::uniform(1.0 / 128.0);
    const auto std_ps = simulate_augmented(m, p, EstimatorKind::StandardPS, 4.0, pol, s1);
    const auto is_ps = simulate_augmented(m, p, EstimatorKind::IsPsTheta, 4.0, pol, s2, 0.0);
    REQUIRE(std_ps.x == is_ps.x);
    REQUIRE(std_ps.v == is_ps.v);
    REQUIRE(is_ps.ito_acc == 0.0);
}

TEST_CASE("explosive dynamics raise NonFiniteState with a finite time") {
    const ExplosiveModel m;
    const ModelParams<1> p{0.0, 1.0, {5.0}};
    NoiseStream s(4, 0);
    try {
        simulate_augmented(m, p, EstimatorKind::StandardPS, 10.0, StepPolicy::uniform(0.25), s);
        FAIL("expected NonFiniteState");
    } catch (const NonFiniteState& e) {
        REQUIRE(std::isfinite(e.t));
        REQUIRE(e.t > 0.0);
    }
}

namespace {

/// Zero drift with a state-dependent weight gamma(x) = x, so the running
/// integral sum genuinely depends on the evaluation point within each step.
struct GammaXModel {
    static constexpr std::size_t dim = 1;
    Vec<1> drift(const Vec<1>&, double) const { return {0.0}; }
    Mat<1> drift_jac(const Vec<1>&, double) const { return {{{0.0}}}; }
    Vec<1> drift_dtheta(const Vec<1>& x, double) const { return {x[0]}; }
    double observable(const Vec<1>& x) const { return x[0]; }
    Vec<1> observable_grad(const Vec<1>&) const { return {1.0}; }
};

}  // namespace

TEST_CASE("ito accumulator refines at first order in mean-square") {
    // The running integral sum uses the left endpoint of each step. Driving
    // the per-step kernel with the same Brownian path at resolution h and
    // h/2, the mean-square gap between the two resolutions shrinks
    // proportionally to h.
    const GammaXModel m;
    const ModelParams<1> p{0.0, 0.5, {1.0}};
    const double T = 1.0;

    auto gap_var = [&](double h_coarse, std::uint64_t seed) {
        MCStats gap;
        const auto n_f = static_cast<std::size_t>(T / (0.5 * h_coarse));
        for (std::size_t i = 0; i < 4000; ++i) {
            NoiseStream s(seed, i);
            std::vector<double> dw(n_f);
            for (auto& d : dw) d = std::sqrt(0.5 * h_coarse) * s.gaussian();
            Vec<1> vf{}, vc{};
            double accf = 0.0, accc = 0.0;
            Vec<1> xf = p.x0, xc = p.x0;
            for (std::size_t n = 0; n < n_f; ++n) {
                sdesens::detail::advance_variation_at(vf, accf, xf,
                                                      EstimatorKind::Malliavin,
                                                      0.5 * h_coarse, {dw[n]}, m, p, 0.0);
                xf = em_step(xf, 0.5 * h_coarse, {dw[n]}, m, p);
            }
            for (std::size_t n = 0; n + 1 < n_f; n += 2) {
                const Vec<1> d{dw[n] + dw[n + 1]};
                sdesens::detail::advance_variation_at(vc, accc, xc,
                                                      EstimatorKind::Malliavin,
                                                      h_coarse, d, m, p, 0.0);
                xc = em_step(xc, h_coarse, d, m, p);
            }
            gap.add(accf - accc);
        }
        return gap.variance();
    };

    const double v_h = gap_var(1.0 / 32.0, 21);
    const double v_h2 = gap_var(1.0 / 64.0, 22);
    REQUIRE(v_h / v_h2 == Catch::Approx(2.0).margin(0.8));
}
