// Command-line driver: Monte Carlo sensitivity runs, variance and
// convergence studies, multilevel estimation, and extrapolation on the
// bundled models. Emits a JSON summary per run plus study-specific CSVs.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "sdesens/sdesens.hpp"

using json = nlohmann::ordered_json;
using namespace sdesens;

namespace {

std::string fmt17(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

EstimatorKind parse_kind(const std::string& name) {
    if (name == "standard") return EstimatorKind::StandardPS;
    if (name == "malliavin") return EstimatorKind::Malliavin;
    if (name == "isps-theta") return EstimatorKind::IsPsTheta;
    if (name == "isps-sigma") return EstimatorKind::IsPsSigma;
    if (name == "isps-x0") return EstimatorKind::IsPsX0;
    throw CLI::ValidationError("unknown estimator '" + name + "'");
}

StepPolicy make_policy(const ExperimentConfig& cfg) {
    return cfg.scheme == "adaptive" ? StepPolicy::adaptive(cfg.delta)
                                    : StepPolicy::uniform(cfg.h);
}

json params_json(const ExperimentConfig& cfg) {
    json p;
    p["model"] = cfg.model;
    p["theta"] = cfg.theta;
    p["sigma"] = cfg.sigma;
    p["x0"] = cfg.x0;
    if (cfg.model == "ou") {
        p["kappa"] = cfg.kappa;
        p["mu"] = cfg.mu;
    }
    p["estimator"] = cfg.estimator;
    p["scheme"] = cfg.scheme;
    p["h"] = cfg.h;
    p["delta"] = cfg.delta;
    p["T"] = cfg.T;
    p["paths"] = cfg.paths;
    p["spring"] = cfg.spring;
    return p;
}

void write_summary(const ExperimentConfig& cfg, const std::string& command,
                   double estimate, double stderr_mean,
                   const std::optional<FitResult>& fit, double total_cost_steps) {
    json s;
    s["command"] = command;
    s["params"] = params_json(cfg);
    s["estimate"] = estimate;
    s["stderr"] = stderr_mean;
    if (fit) {
        s["fit"] = {{"slope", fit->slope},
                    {"intercept", fit->intercept},
                    {"r2", fit->r_squared}};
    } else {
        s["fit"] = nullptr;
    }
    s["total_cost_steps"] = total_cost_steps;
    s["seed"] = cfg.seed;

    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream out(cfg.out_dir + "/summary.json");
    out << s.dump(2) << "\n";
    std::cout << s.dump(2) << "\n";
}

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path);
    out << header << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i)
            out << (i ? "," : "") << fmt17(row[i]);
        out << "\n";
    }
}

/// Plain Monte Carlo of E[phi(X_T)].
template <DriftModel M>
McRunResult run_plain_value(const M& model, const ModelParams<M::dim>& p, double T,
                            const StepPolicy& pol, std::size_t n, std::uint64_t seed) {
    McRunResult r;
    for (std::size_t i = 0; i < n; ++i) {
        NoiseStream s(seed, i);
        try {
            const auto end = simulate_path(model, p, T, pol, s);
            r.stats.add(model.observable(end.x));
            r.total_steps += end.steps;
        } catch (const NonFiniteState&) {
            ++r.blowups;
        }
    }
    if (static_cast<double>(r.blowups) > 0.01 * static_cast<double>(n))
        throw BlowupRateExceeded("simulate: blow-up rate above 1%");
    return r;
}

template <DriftModel M>
int run_command(const std::string& command, const M& model,
                const ModelParams<M::dim>& params, const ExperimentConfig& cfg) {
    const StepPolicy pol = make_policy(cfg);
    std::filesystem::create_directories(cfg.out_dir);

    if (command == "simulate") {
        const auto r = run_plain_value(model, params, cfg.T, pol, cfg.paths, cfg.seed);
        write_summary(cfg, command, r.stats.mean(), r.stats.std_error(), std::nullopt,
                      static_cast<double>(r.total_steps));
        return 0;
    }

    if (command == "sens") {
        json s;
        s["command"] = command;
        s["params"] = params_json(cfg);
        if (cfg.estimator == "fd") {
            FdTarget target = FdTarget::Theta;
            double base_param = params.theta;
            if (cfg.fd_target == "sigma") {
                target = FdTarget::Sigma;
                base_param = params.sigma;
            } else if (cfg.fd_target == "x0") {
                target = FdTarget::X0;
                base_param = params.x0[0];
            } else if (cfg.fd_target != "theta") {
                throw std::invalid_argument("--fd-target must be theta|sigma|x0");
            }
            const double eps =
                cfg.fd_epsilon > 0.0 ? cfg.fd_epsilon : fd_default_epsilon(base_param);
            const auto [est, se] = fd_sensitivity(model, params, cfg.T, pol, cfg.seed,
                                                  eps, cfg.paths, target);
            s["estimate"] = est;
            s["stderr"] = se;
            s["variance"] = se * se * static_cast<double>(cfg.paths);
            s["n"] = cfg.paths;
        } else {
            const auto kind = parse_kind(cfg.estimator);
            const auto r = mc_run(model, params, kind, cfg.T, pol, cfg.paths, cfg.seed,
                                  cfg.spring);
            s["estimate"] = r.stats.mean();
            s["stderr"] = r.stats.std_error();
            s["variance"] = r.stats.variance();
            s["n"] = r.stats.count();
            s["blowups"] = r.blowups;
            s["cost"] = r.total_steps;
            s["total_cost_steps"] = r.total_steps;
        }
        s["T"] = cfg.T;
        s["h"] = cfg.h;
        s["fit"] = nullptr;
        s["seed"] = cfg.seed;
        std::ofstream out(cfg.out_dir + "/summary.json");
        out << s.dump(2) << "\n";
        std::cout << s.dump(2) << "\n";
        return 0;
    }

    if (command == "variance-study") {
        const auto kind = parse_kind(cfg.estimator);
        const auto study = variance_vs_T_study(model, params, kind, cfg.t_grid, pol,
                                               cfg.paths, cfg.seed, cfg.spring);
        std::vector<std::vector<double>> rows;
        double cost = 0.0;
        for (const auto& row : study.rows) {
            rows.push_back({row.T, row.mean, row.variance, row.stderr_mean,
                            static_cast<double>(row.n),
                            static_cast<double>(row.blowups)});
        }
        write_csv(cfg.out_dir + "/variance_study.csv", "T,mean,variance,stderr,n,blowups",
                  rows);
        const auto& last = study.rows.back();
        write_summary(cfg, command, last.mean, last.stderr_mean, study.fit, cost);
        return 0;
    }

    if (command == "lambda-star") {
        const auto r = lambda_star_estimate(model, params, cfg.t_max, cfg.paths,
                                            cfg.window, cfg.grid_dt, cfg.h, cfg.seed);
        // envelope entries start at the first full trailing window
        std::vector<std::vector<double>> rows;
        const std::size_t env_start = cfg.window - 1;
        for (std::size_t i = 0; i < r.times.size(); ++i) {
            const std::size_t j = i - env_start;
            const double env =
                (i >= env_start && j < r.envelope.size()) ? r.envelope[j] : 0.0;
            rows.push_back({r.times[i], r.means[i], env});
        }
        write_csv(cfg.out_dir + "/lambda_star.csv", "t,mean,envelope", rows);
        write_summary(cfg, command, r.lambda_star, 0.0, r.fit, 0.0);
        return 0;
    }

    if (command == "weak-sigma") {
        const double ode_ref =
            ode_reference(model, params.theta, 20'000.0, 0.005, params.x0, 10.0);
        std::optional<EstimatorKind> kind;
        if (cfg.estimator != "value") kind = parse_kind(cfg.estimator);
        const auto study = weak_convergence_study(model, params, cfg.sigma_grid, ode_ref,
                                                  cfg.paths, cfg.h, cfg.seed, kind,
                                                  cfg.spring);
        std::vector<std::vector<double>> rows;
        for (const auto& row : study.rows)
            rows.push_back({row.sigma, row.T, row.estimate, row.stderr_mean,
                            row.weak_error});
        write_csv(cfg.out_dir + "/weak_sigma.csv", "sigma,T,estimate,stderr,weak_error",
                  rows);
        write_summary(cfg, command, study.rows.back().estimate,
                      study.rows.back().stderr_mean, study.fit, 0.0);
        return 0;
    }

    if (command == "mlmc") {
        MlmcConfig mc;
        mc.target_rmse = cfg.eps;
        mc.h0 = cfg.h0;
        mc.spring = cfg.spring;
        mc.max_levels = cfg.max_levels;
        mc.n_init = cfg.n_init;
        mc.seed = cfg.seed;
        const auto report =
            mlmc_driver(model, params, parse_kind(cfg.estimator), cfg.T, mc);
        std::vector<std::vector<double>> rows;
        for (const auto& lvl : report.levels)
            rows.push_back({static_cast<double>(lvl.level),
                            static_cast<double>(lvl.n_samples), lvl.mean, lvl.variance,
                            lvl.cost_per_sample});
        write_csv(cfg.out_dir + "/mlmc_levels.csv", "level,N,mean,variance,cost", rows);

        json s;
        s["command"] = command;
        s["params"] = params_json(cfg);
        s["estimate"] = report.estimate;
        s["stderr"] = cfg.eps;
        s["fit"] = nullptr;
        s["alpha"] = report.alpha;
        s["beta"] = report.beta;
        s["total_cost"] = report.total_cost;
        s["total_cost_steps"] = report.total_cost;
        s["seed"] = cfg.seed;
        std::ofstream out(cfg.out_dir + "/summary.json");
        out << s.dump(2) << "\n";
        std::cout << s.dump(2) << "\n";
        return 0;
    }

    if (command == "rr") {
        std::pair<double, double> result;
        const double T =
            cfg.T > 0.0 ? cfg.T : horizon_for_sigma(params.sigma, 2.0, 15.0, cfg.t_max);
        if (cfg.estimator == "value") {
            result = rr_estimate_value(model, params, cfg.rr_order, T, pol, cfg.paths,
                                       cfg.seed);
        } else {
            result = rr_estimate_sensitivity(model, params, parse_kind(cfg.estimator),
                                             cfg.rr_order, T, pol, cfg.paths, cfg.seed,
                                             cfg.spring);
        }
        const auto scheme = RRScheme::make(cfg.rr_order, params.sigma);
        std::vector<std::vector<double>> rows;
        for (std::size_t k = 0; k < scheme.sigmas.size(); ++k)
            rows.push_back({scheme.sigmas[k], scheme.weights[k]});
        write_csv(cfg.out_dir + "/rr_ladder.csv", "sigma,weight", rows);

        json s;
        s["command"] = command;
        s["params"] = params_json(cfg);
        s["estimate"] = result.first;
        s["stderr"] = result.second;
        s["fit"] = nullptr;
        s["order"] = cfg.rr_order;
        s["sigmas"] = scheme.sigmas;
        s["total_cost_steps"] =
            static_cast<double>(cfg.paths) * static_cast<double>(cfg.rr_order) * T / cfg.h;
        s["seed"] = cfg.seed;
        std::filesystem::create_directories(cfg.out_dir);
        std::ofstream out(cfg.out_dir + "/summary.json");
        out << s.dump(2) << "\n";
        std::cout << s.dump(2) << "\n";
        return 0;
    }

    std::cerr << "unknown command " << command << "\n";
    return 1;
}

void apply_config_file(ExperimentConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw CLI::ValidationError("cannot open config file " + path);
    json j;
    in >> j;
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) field = j[key].template get<std::decay_t<decltype(field)>>();
    };
    get("model", cfg.model);
    get("theta", cfg.theta);
    get("sigma", cfg.sigma);
    get("x0", cfg.x0);
    get("kappa", cfg.kappa);
    get("mu", cfg.mu);
    get("estimator", cfg.estimator);
    get("seed", cfg.seed);
    get("T_grid", cfg.t_grid);
    get("sigma_grid", cfg.sigma_grid);
    get("paths", cfg.paths);
    get("scheme", cfg.scheme);
    get("h", cfg.h);
    get("delta", cfg.delta);
    get("T", cfg.T);
    get("spring", cfg.spring);
    get("fd_epsilon", cfg.fd_epsilon);
    get("eps", cfg.eps);
    get("h0", cfg.h0);
    get("max_levels", cfg.max_levels);
    get("n_init", cfg.n_init);
    get("rr_order", cfg.rr_order);
    get("t_max", cfg.t_max);
    get("window", cfg.window);
    get("grid_dt", cfg.grid_dt);
    get("out_dir", cfg.out_dir);
}

}  // namespace

int main(int argc, char** argv) {
    ExperimentConfig cfg;
    std::string config_path;

    // config file provides defaults; explicit flags override it
    for (int i = 1; i + 1 < argc; ++i)
        if (std::string(argv[i]) == "--config") config_path = argv[i + 1];
    if (!config_path.empty()) {
        try {
            apply_config_file(cfg, config_path);
        } catch (const std::exception& e) {
            std::cerr << "error: " << e.what() << "\n";
            return 1;
        }
    }

    CLI::App app{"sensitivity estimation for chaotic stochastic systems"};
    app.require_subcommand(1);
    app.set_help_flag("--help", "print help");  // long-only; --h is a step size

    auto add_common = [&](CLI::App* sub) {
        sub->set_help_flag("--help", "print help");
        sub->add_option("--config", config_path, "JSON config file (defaults)");
        sub->add_option("--seed", cfg.seed, "master seed");
        sub->add_option("--paths", cfg.paths, "number of Monte Carlo paths");
        sub->add_option("--out", cfg.out_dir, "output directory");
        sub->add_option("--model", cfg.model, "model name: lorenz | ou");
        sub->add_option("--theta", cfg.theta, "drift parameter");
        sub->add_option("--sigma", cfg.sigma, "volatility");
        sub->add_option("--x0", cfg.x0, "initial state components")->delimiter(',');
        sub->add_option("--kappa", cfg.kappa, "ou reversion rate");
        sub->add_option("--mu", cfg.mu, "ou reversion level");
        sub->add_option("--scheme", cfg.scheme, "uniform | adaptive");
        sub->add_option("--h", cfg.h, "uniform step size");
        sub->add_option("--delta", cfg.delta, "adaptive step scale");
        sub->add_option("--T", cfg.T, "time horizon");
        sub->add_option("--spring", cfg.spring, "spring coefficient S");
        sub->add_option("--estimator", cfg.estimator,
                        "standard | malliavin | isps-theta | isps-sigma | isps-x0 | fd "
                        "| value");
    };

    auto* sim = app.add_subcommand("simulate", "estimate E[phi(X_T)]");
    add_common(sim);
    auto* sens = app.add_subcommand("sens", "single-horizon sensitivity estimate");
    add_common(sens);
    sens->add_option("--fd-eps", cfg.fd_epsilon, "finite-difference bump");
    sens->add_option("--fd-target", cfg.fd_target, "fd target: theta | sigma | x0");
    auto* vstudy = app.add_subcommand("variance-study", "estimator variance vs horizon");
    add_common(vstudy);
    vstudy->add_option("--T-grid", cfg.t_grid, "horizon grid")->delimiter(',');
    auto* lstar = app.add_subcommand("lambda-star", "equilibration-rate estimate");
    add_common(lstar);
    lstar->add_option("--T-max", cfg.t_max, "curve horizon");
    lstar->add_option("--window", cfg.window, "envelope window (grid points)");
    lstar->add_option("--grid-dt", cfg.grid_dt, "snapshot spacing");
    auto* wsig = app.add_subcommand("weak-sigma", "weak error vs sigma study");
    add_common(wsig);
    wsig->add_option("--sigmas", cfg.sigma_grid, "sigma grid")->delimiter(',');
    auto* mlmc = app.add_subcommand("mlmc", "multilevel driver");
    add_common(mlmc);
    mlmc->add_option("--eps", cfg.eps, "target rmse");
    mlmc->add_option("--h0", cfg.h0, "level-0 step");
    mlmc->add_option("--max-levels", cfg.max_levels, "level budget");
    mlmc->add_option("--n-init", cfg.n_init, "warm-up samples per level");
    auto* rr = app.add_subcommand("rr", "extrapolation in volatility");
    add_common(rr);
    rr->add_option("--order", cfg.rr_order, "extrapolation order R");

    // `rr --T auto` derives the horizon from the base volatility
    std::vector<std::string> args(argv + 1, argv + argc);
    for (std::size_t i = 0; i + 1 < args.size(); ++i)
        if (args[i] == "--T" && args[i + 1] == "auto") args[i + 1] = "0";
    std::vector<const char*> cargs{argv[0]};
    for (const auto& a : args) cargs.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        cfg.validate();
        const std::string command = app.get_subcommands().front()->get_name();

        if (cfg.model == "lorenz") {
            if (cfg.x0.size() != 3)
                throw std::invalid_argument("lorenz needs a 3-component x0");
            const LorenzModel model;
            const ModelParams<3> p{cfg.theta, cfg.sigma,
                                   {cfg.x0[0], cfg.x0[1], cfg.x0[2]}};
            return run_command(command, model, p, cfg);
        }
        if (cfg.model == "ou") {
            if (cfg.x0.size() != 1) throw std::invalid_argument("ou needs a scalar x0");
            const OuModel model(cfg.kappa, cfg.mu);
            const ModelParams<1> p{cfg.theta, cfg.sigma, {cfg.x0[0]}};
            return run_command(command, model, p, cfg);
        }
        throw std::invalid_argument("unknown model '" + cfg.model + "'");
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
