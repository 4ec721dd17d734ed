// Acceptance suite: one PASS/FAIL line per criterion, exit 0 only if all pass.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "caq/eval.hpp"
#include "caq/oracle_checks.hpp"

using namespace caq;

namespace {

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    int id = 0;
    bool passed = false;
    std::string detail;
};

std::vector<Outcome> outcomes;

void report(int id, bool passed, const std::string& detail) {
    outcomes.push_back({id, passed, detail});
    std::printf("[%s] criterion %d: %s\n", passed ? "PASS" : "FAIL", id, detail.c_str());
    std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

// Runs a check group; every check must pass and the group must fit its time budget.
void check_group(int id, const char* what, std::vector<CheckResult> (*fn)(std::uint64_t), std::uint64_t seed,
                 double budget_s) {
    const auto t0 = Clock::now();
    const auto results = fn(seed);
    const double secs = since(t0);
    bool ok = secs < budget_s;
    std::string failed;
    for (const auto& r : results) {
        if (!r.passed) {
            ok = false;
            failed += " " + r.name + " (" + r.detail + ")";
        }
    }
    std::string detail = std::string(what) + ", " + std::to_string(results.size()) + " checks in " +
                         fmt("%.1f s", secs) + fmt(" (budget %.0f s)", budget_s);
    if (!failed.empty()) {
        detail += "; failed:" + failed;
    }
    report(id, ok, detail);
}

std::vector<CheckResult> estimator_checks(std::uint64_t seed) {
    return estimator_oracle_checks(seed, 20);
}

double at(const std::vector<double>& v, std::size_t i) {
    return v.at(i);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance suite"};
    std::string out = "acceptance_runs";
    std::uint64_t seed = 2024;
    app.add_option("--out", out, "directory for experiment outputs");
    app.add_option("--seed", seed, "base seed");
    CLI11_PARSE(app, argc, argv);

    check_group(1, "MAP vs dense posterior <= 1e-6, MLE vs dense normal equations <= 1e-8 on 20 6^3 instances",
                estimator_checks, seed, 30.0);
    check_group(2, "FFT Psi vs dense Psi <= 1e-10 on all grids up to 4^3, adjoint, null space", operator_checks,
                seed + 1, 5.0);
    check_group(7, "property suites", property_checks, seed + 2, 120.0);

    SweepConfig sweep = SweepConfig::standard();
    sweep.small.seed = seed;
    sweep.large.seed = seed;
    sweep.output_dir = std::filesystem::path(out) / "sweep";

    // The sweep runs small and large parts back to back; time them separately.
    const auto t_small = Clock::now();
    ExperimentConfig small = sweep.small;
    small.noise.rsnr = sweep.rsnr_high;
    small.output_dir = sweep.output_dir / "small_high";
    const ExperimentResult small_high = run_experiment(small);
    const double small_secs = since(t_small);

    {
        const auto& tab = small_high.table;
        const std::size_t peak = peak_index(small_high.vessel_truth_mean);
        const auto mle = tab.series("mle", "vessel");
        const auto leroux = tab.series("bhm-leroux", "vessel");
        const auto besag = tab.series("bhm-besag", "vessel");
        const auto cl = compare_series(mle, leroux, peak);
        const double r_leroux = at(leroux, peak) / at(mle, peak);
        const double r_besag = at(besag, peak) / at(mle, peak);
        const double r_tail = 1.0 - cl.tail_decrease_pct / 100.0;
        const bool ok = r_leroux <= 0.80 && r_besag <= 0.90 && r_tail <= 0.90 && small_secs < 1800.0;
        std::string d = "10^3, rSNR 5, 30 sims, vessel rMSE ratios vs MLE at peak t=" +
                        fmt("%g s", small_high.time[peak]) + ": Leroux BHM " + fmt("%.3f", r_leroux) +
                        " (<= 0.80), Besag " + fmt("%.3f", r_besag) + " (<= 0.90), Leroux tail " +
                        fmt("%.3f", r_tail) + " (<= 0.90); " + fmt("%.0f s", small_secs) + " (budget 1800 s)";
        report(3, ok, d);

        const double rho = small_high.summary.at("methods").at("bhm-leroux").at("lambda_spearman_vs_vessel").get<double>();
        report(4, rho < -0.3, "Spearman(lambda-hat series, vessel truth) = " + fmt("%.3f", rho) + " (< -0.3)");
    }

    const auto t_large = Clock::now();
    small.noise.rsnr = sweep.rsnr_low;
    small.methods = {Method::mle, Method::bhm_leroux};
    small.output_dir = sweep.output_dir / "small_low";
    const ExperimentResult small_low = run_experiment(small);

    auto lambda_of = [](const ExperimentResult& r) {
        return r.summary.at("methods").at("bhm-leroux").at("lambda_mean_series").get<std::vector<double>>();
    };
    ExperimentConfig large = sweep.large;
    large.noise.rsnr = sweep.rsnr_high;
    large.map_tau = sweep.tau_high;
    large.lambda_series = lambda_of(small_high);
    large.output_dir = sweep.output_dir / "large_high";
    const ExperimentResult large_high = run_experiment(large);
    large.noise.rsnr = sweep.rsnr_low;
    large.map_tau = sweep.tau_low;
    large.lambda_series = lambda_of(small_low);
    large.output_dir = sweep.output_dir / "large_low";
    const ExperimentResult large_low = run_experiment(large);
    const double large_secs = since(t_large);

    {
        const std::size_t peak = peak_index(large_high.vessel_truth_mean);
        bool ok = large_secs < 7200.0;
        std::string d = "64^3, 10 sims, peak t=" + fmt("%g s", large_high.time[peak]) + ", MAP-Leroux/MLE:";
        for (const char* tissue : {"vessel", "tumor_rim", "white_matter"}) {
            const auto mle = large_high.table.series("mle", tissue);
            const auto map = large_high.table.series("map-leroux", tissue);
            const double ratio = at(map, peak) / at(mle, peak);
            ok = ok && ratio <= 1.0;
            d += std::string(" ") + tissue + " " + fmt("%.3f", ratio);
            const auto low = large_low.table.series("map-leroux", tissue);
            std::size_t violations = 0;
            for (std::size_t t = 0; t < map.size(); ++t) {
                violations += low.at(t) > map.at(t) ? 0 : 1;
            }
            ok = ok && violations == 0;
            if (violations > 0) {
                d += " (rSNR 1 not above rSNR 5 at " + std::to_string(violations) + " points)";
            }
        }
        d += "; rSNR 1 > rSNR 5 pointwise checked; " + fmt("%.0f s", large_secs) + " (budget 7200 s)";
        report(5, ok, d);
    }

    {
        RecoveryConfig rc;
        rc.seed = seed;
        const auto r = run_self_recovery(rc);
        const bool ok = std::abs(r.lambda_mean - rc.lambda) <= 0.15 && r.tau_mean <= 2.0 * rc.tau &&
                        r.tau_mean >= 0.5 * rc.tau;
        report(6, ok, "Leroux prior data (lambda 0.9, tau 1, 10^3, 20 replicates): mean lambda-hat " +
                          fmt("%.3f", r.lambda_mean) + " (+-0.15), mean tau-hat " + fmt("%.3f", r.tau_mean) +
                          " (factor 2)");
    }

    std::sort(outcomes.begin(), outcomes.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
    std::printf("summary:\n");
    int failed = 0;
    for (const auto& o : outcomes) {
        std::printf("  criterion %d %s\n", o.id, o.passed ? "PASS" : "FAIL");
        failed += o.passed ? 0 : 1;
    }
    std::printf("%zu criteria, %d failed\n", outcomes.size(), failed);
    return failed == 0 ? 0 : 1;
}
