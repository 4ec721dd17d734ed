#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "caq/bayes.hpp"
#include "caq/estimators.hpp"
#include "caq/phantom.hpp"

namespace caq {

enum class Method {
    mle,
    map_besag,
    map_besag_tissue,
    map_leroux,
    bhm_leroux,
    bhm_besag,
    bhm_besag_tissue,
};

std::string method_name(Method m);
std::string sigma_mode_name(SigmaMode m);
SigmaMode parse_sigma_mode(const std::string& name);
/// Accepts the names produced by method_name; "bhm-exact" means bhm-leroux.
Method method_from_name(const std::string& name);
bool is_bhm(Method m);

struct ExperimentConfig {
    GridDims dims{10, 10, 10, 1.0};
    double psi0 = 1.0;
    NoiseModel noise;
    std::size_t simulations = 30;
    std::vector<Method> methods{Method::mle};
    std::uint64_t seed = 2024;
    std::uint64_t phantom_seed = 1;
    double gain_jitter = 0.05;
    // Overrides of the standard phantom: "regions" (replaces the list), "curves"
    // (per-tissue [gain, rate], null rate = identity) and "aif" (per-field).
    nlohmann::json phantom = nlohmann::json::object();
    HyperPriorSpec hyper = HyperPriorSpec::standard();
    HyperOptions hyper_options{GridStrategy::mode_walk, 25.0, false};
    double map_tau = 0.1;
    double map_lambda = 0.9;
    std::vector<double> lambda_series;  // per time point, overrides map_lambda for map-leroux
    std::string lambda_source;          // summary.json of a small-image run providing lambda_series
    CGOptions cg;
    SigmaMode sigma_mode = SigmaMode::plugin;
    std::filesystem::path output_dir;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static ExperimentConfig from_json(const nlohmann::json& j);
    /// FNV-1a of the canonical JSON without the output directory.
    [[nodiscard]] std::string hash() const;
    [[nodiscard]] PhantomSpec phantom_spec() const;
};

struct RmseRow {
    std::string method;
    std::string tissue;
    std::size_t time_index = 0;
    double time_s = 0.0;
    double rmse = 0.0;
};

struct RmseTable {
    std::vector<RmseRow> rows;
    std::string config_hash;
    std::uint64_t seed = 0;

    [[nodiscard]] std::vector<double> series(const std::string& method, const std::string& tissue) const;
    [[nodiscard]] std::vector<std::string> methods() const;
    /// `method,tissue,time_s,rmse` with a header row.
    [[nodiscard]] std::string to_csv() const;
};

/// Per time point: sqrt(mean over simulations x class voxels of (estimate - truth)^2).
/// estimates[s][t] and truth[s][t] are aligned over simulations s and time t.
std::vector<double> rmse_by_tissue(const std::vector<std::vector<Volume>>& estimates,
                                   const std::vector<std::vector<Volume>>& truth, const TissueMap& tissue,
                                   Tissue cls);

struct MethodComparison {
    std::string baseline;
    std::string candidate;
    std::string tissue;
    double peak_decrease_pct = 0.0;  // 100 (1 - cand/base) at the peak time point
    double tail_decrease_pct = 0.0;  // same on the mean of the last three time points
    double mean_difference = 0.0;    // mean over time of (base - cand)
};

MethodComparison compare_series(const std::vector<double>& baseline, const std::vector<double>& candidate,
                                std::size_t peak_index);
/// Every ordered pair (earlier method as baseline) found across the tables for `tissue`.
/// Tables must share a configuration hash.
std::vector<MethodComparison> compare_methods(const std::vector<RmseTable>& tables, const std::string& tissue,
                                              std::size_t peak_index);

/// Index of the time point with the largest mean true vessel concentration.
std::size_t peak_index(const std::vector<double>& vessel_truth_mean);

double spearman(const std::vector<double>& a, const std::vector<double>& b);

struct LambdaReport {
    std::vector<double> mean_lambda;
    double spearman_vs_vessel = 0.0;
    std::string csv;  // time_s,lambda_mean,vessel_truth_mean
};

LambdaReport lambda_series_report(const std::vector<std::vector<double>>& lambda_hat,
                                  const std::vector<double>& vessel_truth_mean, const TimeGrid& time);

struct ExperimentResult {
    RmseTable table;
    std::vector<double> vessel_truth_mean;
    TimeGrid time;
    std::map<std::string, std::vector<std::vector<double>>> lambda_hat;  // method -> [sim][t]
    std::map<std::string, std::vector<std::vector<double>>> tau_hat;
    std::map<std::string, std::size_t> cg_iterations;  // method -> total
    nlohmann::json summary;
};

/// simulate -> estimate (each method) -> rMSE. Writes rmse.csv, lambda_<method>.csv,
/// summary.json and manifest.json when output_dir is set.
ExperimentResult run_experiment(const ExperimentConfig& config);

/// Small-image runs at two noise levels, then large-image MAP-Leroux runs that reuse
/// the small-image lambda series, with tau fixed per noise level.
struct SweepConfig {
    ExperimentConfig small;
    ExperimentConfig large;
    double rsnr_high = 5.0;
    double rsnr_low = 1.0;
    double tau_high = 0.1;
    double tau_low = 0.01;
    std::filesystem::path output_dir;

    void validate() const;
    [[nodiscard]] nlohmann::json to_json() const;
    static SweepConfig from_json(const nlohmann::json& j);
    static SweepConfig standard();
};

struct SweepResult {
    ExperimentResult small_high;
    ExperimentResult small_low;
    ExperimentResult large_high;
    ExperimentResult large_low;
};

SweepResult run_sweep(const SweepConfig& config);

/// Fits the Leroux BHM to data drawn from the Leroux prior itself, pushed through the
/// observation model, to see whether tau and lambda come back.
struct RecoveryConfig {
    GridDims dims{10, 10, 10, 1.0};
    double tau = 1.0;
    double lambda = 0.9;
    double psi0 = 1.0;
    NoiseModel noise;
    std::size_t replicates = 20;
    std::uint64_t seed = 7;
    // The per-voxel plug-in reuses c_m's own noise in its weights, which biases
    // lambda down on a zero-mean field; the pooled variance does not.
    SigmaMode sigma_mode = SigmaMode::pooled;
    HyperPriorSpec hyper = HyperPriorSpec::standard();
    HyperOptions hyper_options{GridStrategy::mode_walk, 25.0, false};

    void validate() const;
};

struct RecoveryResult {
    std::vector<double> tau_hat;
    std::vector<double> lambda_hat;
    double tau_mean = 0.0;
    double lambda_mean = 0.0;
};

RecoveryResult run_self_recovery(const RecoveryConfig& config);

/// Reads lambda_series for map-leroux from a summary.json written by run_experiment.
std::vector<double> load_lambda_series(const std::filesystem::path& summary_path);

// Dataset files for the CLI: tissue.catis, {truth,magnitude,phase}_tNN.cavol, manifest.json.
void write_dataset(const std::filesystem::path& dir, const SimulatedDataset& data, const ExperimentConfig& config);
struct LoadedDataset {
    SimulatedDataset data;
    ExperimentConfig config;
};
LoadedDataset load_dataset(const std::filesystem::path& manifest_path);

std::string format_number(double v);

}  // namespace caq
