// caquant: simulate, estimate and evaluate contrast-agent concentration maps.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "caq/eval.hpp"
#include "caq/kernels.hpp"
#include "caq/oracle_checks.hpp"
#include "caq/volume_io.hpp"

namespace {

using nlohmann::json;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    int threads = 0;
};

void add_common(CLI::App* app, Common& c, bool out_required) {
    app->add_option("--config", c.config, "JSON configuration file");
    app->add_option("--seed", c.seed, "Master seed (overrides the config)");
    auto* out = app->add_option("--out", c.out, "Output directory");
    if (out_required) {
        out->required();
    }
    app->add_option("--threads", c.threads, "OpenMP threads (0 = runtime default)")->check(CLI::NonNegativeNumber);
}

json read_json(const std::string& path) {
    if (path.empty()) {
        return json::object();
    }
    std::ifstream in(path);
    if (!in) {
        throw caq::ConfigError("cannot open config " + path);
    }
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw caq::ConfigError("config " + path + ": " + e.what());
    }
}

void apply_threads(int n) {
    if (n > 0) {
        caq::kernels::set_threads(n);
    }
}

caq::ExperimentConfig experiment_config(const Common& c) {
    const json j = read_json(c.config);
    auto cfg = caq::ExperimentConfig::from_json(j);
    if (j.contains("threads") && c.threads == 0) {
        apply_threads(j.at("threads").get<int>());
    }
    if (c.seed) {
        cfg.seed = *c.seed;
    }
    if (!c.out.empty()) {
        cfg.output_dir = c.out;
    }
    return cfg;
}

void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
}

int run_simulate(const Common& c, std::size_t sim_index) {
    const auto cfg = experiment_config(c);
    cfg.dims.validate();
    cfg.noise.validate();
    const caq::Phantom phantom = caq::build_phantom(cfg.phantom_spec());
    const caq::PhaseOperator psi(caq::build_dipole_kernel(cfg.dims, cfg.psi0));
    const auto data = caq::simulate_dataset(phantom, psi, cfg.noise, caq::mix_seed(cfg.seed, sim_index));
    bool ok = true;
    for (std::size_t t = 0; t < data.time.size(); ++t) {
        ok = ok && data.magnitude[t].all_finite() && data.phase[t].all_finite();
    }
    caq::write_dataset(c.out, data, cfg);
    std::printf("simulated %zu time points on %zux%zux%zu (rSNR %g, seed %llu) -> %s\n", data.time.size(),
                cfg.dims.nx, cfg.dims.ny, cfg.dims.nz, cfg.noise.rsnr, static_cast<unsigned long long>(data.seed),
                c.out.c_str());
    if (!ok) {
        std::fprintf(stderr, "assertion failed: non-finite simulated values\n");
    }
    return ok ? 0 : 1;
}

struct EstimateArgs {
    std::string input;
    std::string method = "mle";
    std::optional<double> tau;
    std::optional<double> lambda;
    std::string lambda_source;
    double cg_tol = 1e-8;
    int time_index = -1;
};

int run_estimate(const Common& c, const EstimateArgs& a) {
    const caq::LoadedDataset loaded = caq::load_dataset(a.input);
    const auto& data = loaded.data;
    caq::ExperimentConfig cfg = loaded.config;
    if (!c.config.empty()) {
        json merged = cfg.to_json();
        merged.update(read_json(c.config));
        cfg = caq::ExperimentConfig::from_json(merged);
    }
    const caq::Method method = caq::method_from_name(a.method);
    if (a.tau) {
        cfg.map_tau = *a.tau;
    }
    if (a.lambda) {
        cfg.map_lambda = *a.lambda;
    }
    if (!a.lambda_source.empty()) {
        cfg.lambda_series = caq::load_lambda_series(a.lambda_source);
    }
    cfg.cg.tolerance = a.cg_tol;
    cfg.cg.validate();

    const caq::GridDims dims = data.tissue.dims();
    const caq::PhaseOperator psi(caq::build_dipole_kernel(dims, cfg.psi0));
    std::optional<caq::SmallImageContext> ctx;
    if (caq::is_bhm(method)) {
        ctx.emplace(psi, data.tissue);
    }
    const caq::GraphPtr open = caq::build_graph(dims);
    const caq::GraphPtr restricted = caq::build_graph(dims, &data.tissue, true);

    std::filesystem::create_directories(c.out);
    json summary;
    summary["method"] = caq::method_name(method);
    summary["input"] = a.input;
    summary["cg_tolerance"] = cfg.cg.tolerance;
    summary["time_points"] = json::array();
    bool ok = true;
    for (std::size_t t = 0; t < data.time.size(); ++t) {
        if (a.time_index >= 0 && static_cast<std::size_t>(a.time_index) != t) {
            continue;
        }
        const auto noise = caq::ObservationNoise::from_model(data.magnitude[t], data.noise, cfg.sigma_mode, &data.truth[t]);
        json tp;
        tp["index"] = t;
        tp["time_s"] = data.time[t];
        caq::Volume chat;
        if (caq::is_bhm(method)) {
            const caq::PriorChoice choice = method == caq::Method::bhm_leroux  ? caq::PriorChoice::leroux
                                            : method == caq::Method::bhm_besag ? caq::PriorChoice::besag
                                                                               : caq::PriorChoice::besag_tissue;
            auto s = caq::estimate_small_image(*ctx, data, t, choice, cfg.hyper, cfg.hyper_options, cfg.sigma_mode);
            double wsum = 0.0;
            for (double w : s.weights) {
                ok = ok && w >= 0.0;
                wsum += w;
            }
            ok = ok && std::abs(wsum - 1.0) <= 1e-12;
            tp["lambda_hat"] = s.lambda_hat;
            tp["tau_hat"] = s.tau_hat;
            tp["grid_points_evaluated"] = s.evaluated;
            tp["tau_grid"] = s.tau_grid;
            tp["lambda_grid"] = s.lambda_grid;
            tp["weights"] = s.weights;
            chat = caq::Volume(dims, std::move(s.mean));
        } else {
            caq::Estimate e;
            switch (method) {
                case caq::Method::mle: e = caq::mle_estimate(data.magnitude[t], data.phase[t], noise, psi, cfg.cg); break;
                case caq::Method::map_besag:
                    e = caq::map_estimate(data.magnitude[t], data.phase[t], noise, psi,
                                          caq::besag_precision({open, cfg.map_tau}), cfg.cg);
                    break;
                case caq::Method::map_besag_tissue:
                    e = caq::map_estimate(data.magnitude[t], data.phase[t], noise, psi,
                                          caq::besag_precision({restricted, cfg.map_tau}), cfg.cg);
                    break;
                default: {
                    const double lam = cfg.lambda_series.empty() ? cfg.map_lambda : cfg.lambda_series.at(t);
                    e = caq::map_estimate(data.magnitude[t], data.phase[t], noise, psi,
                                          caq::leroux_precision({open, cfg.map_tau, lam}), cfg.cg);
                    tp["lambda"] = lam;
                }
            }
            if (method != caq::Method::mle) {
                tp["tau"] = cfg.map_tau;
            }
            tp["cg_iterations"] = e.iterations;
            tp["relative_residual"] = e.relative_residual;
            ok = ok && e.relative_residual <= cfg.cg.tolerance;
            chat = std::move(e.c);
        }
        ok = ok && chat.all_finite();
        std::size_t negative = 0;
        for (double v : chat.values()) {
            negative += v < 0.0 ? 1 : 0;
        }
        tp["negative_voxels"] = negative;
        char name[32];
        std::snprintf(name, sizeof(name), "chat_t%02zu.cavol", t);
        caq::write_volume(std::filesystem::path(c.out) / name, chat);
        tp["file"] = name;
        summary["time_points"].push_back(tp);
    }
    write_json(std::filesystem::path(c.out) / "estimate.json", summary);
    std::printf("%s: %zu time points -> %s\n", caq::method_name(method).c_str(), summary["time_points"].size(),
                c.out.c_str());
    if (!ok) {
        std::fprintf(stderr, "assertion failed: non-finite estimate, unconverged solve or bad weights\n");
    }
    return ok ? 0 : 1;
}

bool table_finite(const caq::RmseTable& t) {
    for (const auto& r : t.rows) {
        if (!std::isfinite(r.rmse)) {
            return false;
        }
    }
    return true;
}

void print_peak_summary(const caq::ExperimentResult& r, const std::string& tissue) {
    const std::size_t peak = caq::peak_index(r.vessel_truth_mean);
    const auto methods = r.table.methods();
    std::printf("  %s rMSE at peak (t = %g s) and tail:\n", tissue.c_str(), r.time[peak]);
    const auto base = r.table.series(methods.front(), tissue);
    for (const auto& m : methods) {
        const auto s = r.table.series(m, tissue);
        const auto cmp = caq::compare_series(base, s, peak);
        std::printf("    %-18s peak %.4f (%+.1f%% vs %s)  tail %.4f\n", m.c_str(), s[peak], -cmp.peak_decrease_pct,
                    methods.front().c_str(), (s[s.size() - 1] + s[s.size() - 2] + s[s.size() - 3]) / 3.0);
    }
}

int run_evaluate(const Common& c) {
    const auto cfg = experiment_config(c);
    const auto result = caq::run_experiment(cfg);
    std::printf("evaluated %zu simulations on %zux%zux%zu (config %s)\n", cfg.simulations, cfg.dims.nx, cfg.dims.ny,
                cfg.dims.nz, result.table.config_hash.c_str());
    print_peak_summary(result, "vessel");
    for (const auto& [name, m] : result.summary.at("methods").items()) {
        if (m.contains("lambda_spearman_vs_vessel")) {
            std::printf("  %s: Spearman(lambda, vessel) = %.3f\n", name.c_str(),
                        m.at("lambda_spearman_vs_vessel").get<double>());
        }
    }
    if (!c.out.empty()) {
        std::printf("  wrote %s/rmse.csv\n", c.out.c_str());
    }
    const bool ok = table_finite(result.table);
    if (!ok) {
        std::fprintf(stderr, "assertion failed: non-finite rMSE\n");
    }
    return ok ? 0 : 1;
}

int run_sweep_cmd(const Common& c) {
    const json j = read_json(c.config);
    auto cfg = caq::SweepConfig::from_json(j);
    if (c.seed) {
        cfg.small.seed = *c.seed;
        cfg.large.seed = *c.seed;
    }
    cfg.output_dir = c.out;
    const auto r = caq::run_sweep(cfg);
    std::printf("small image, rSNR %g:\n", cfg.rsnr_high);
    print_peak_summary(r.small_high, "vessel");
    std::printf("small image, rSNR %g:\n", cfg.rsnr_low);
    print_peak_summary(r.small_low, "vessel");
    for (const auto* large : {&r.large_high, &r.large_low}) {
        std::printf("large image, rSNR %g:\n", large == &r.large_high ? cfg.rsnr_high : cfg.rsnr_low);
        for (const char* tissue : {"vessel", "tumor_rim", "white_matter"}) {
            print_peak_summary(*large, tissue);
        }
    }
    const bool ok = table_finite(r.small_high.table) && table_finite(r.small_low.table) &&
                    table_finite(r.large_high.table) && table_finite(r.large_low.table);
    if (!ok) {
        std::fprintf(stderr, "assertion failed: non-finite rMSE\n");
    }
    return ok ? 0 : 1;
}

int run_oracle(const Common& c) {
    const auto results = caq::run_oracle_checks(c.seed.value_or(20240611));
    bool ok = true;
    json report = json::array();
    for (const auto& r : results) {
        std::printf("[%s] %s: %s (%.2f s)\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(), r.seconds);
        ok = ok && r.passed;
        report.push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}, {"seconds", r.seconds}});
    }
    if (!c.out.empty()) {
        std::filesystem::create_directories(c.out);
        write_json(std::filesystem::path(c.out) / "oracle_checks.json", report);
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Contrast-agent concentration estimation from magnitude and phase"};
    app.require_subcommand(1);

    Common sim_c, est_c, eval_c, sweep_c, oracle_c;
    std::size_t sim_index = 0;
    EstimateArgs est;

    auto* simulate = app.add_subcommand("simulate", "Simulate one noisy 4D dataset from the phantom");
    add_common(simulate, sim_c, true);
    simulate->add_option("--simulation", sim_index, "Simulation index (selects the substream)");

    auto* estimate = app.add_subcommand("estimate", "Estimate concentration maps from a simulated dataset");
    add_common(estimate, est_c, true);
    estimate->add_option("--input", est.input, "Dataset manifest.json written by simulate")->required();
    estimate->add_option("--method", est.method, "mle | map-besag | map-besag-tissue | map-leroux | bhm-exact")
        ->check(CLI::IsMember({"mle", "map-besag", "map-besag-tissue", "map-leroux", "bhm-exact", "bhm-leroux",
                               "bhm-besag", "bhm-besag-tissue"}));
    estimate->add_option("--tau", est.tau, "Prior precision for MAP methods");
    estimate->add_option("--lambda", est.lambda, "Spatial dependence for map-leroux");
    estimate->add_option("--lambda-source", est.lambda_source, "summary.json of a small-image run");
    estimate->add_option("--cg-tol", est.cg_tol, "CG relative residual tolerance");
    estimate->add_option("--time", est.time_index, "Single time index (default: all)");

    auto* evaluate = app.add_subcommand("evaluate", "Run a Monte Carlo rMSE experiment");
    add_common(evaluate, eval_c, false);

    auto* sweep = app.add_subcommand("sweep", "Small-image and large-image experiments at two noise levels");
    add_common(sweep, sweep_c, true);

    auto* oracle = app.add_subcommand("oracle-check", "Run the dense-oracle equivalence and property suites");
    add_common(oracle, oracle_c, false);

    CLI11_PARSE(app, argc, argv);

    try {
        if (simulate->parsed()) {
            apply_threads(sim_c.threads);
            return run_simulate(sim_c, sim_index);
        }
        if (estimate->parsed()) {
            apply_threads(est_c.threads);
            return run_estimate(est_c, est);
        }
        if (evaluate->parsed()) {
            apply_threads(eval_c.threads);
            return run_evaluate(eval_c);
        }
        if (sweep->parsed()) {
            apply_threads(sweep_c.threads);
            return run_sweep_cmd(sweep_c);
        }
        apply_threads(oracle_c.threads);
        return run_oracle(oracle_c);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
