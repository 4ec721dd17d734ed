#include "caq/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "caq/kernels.hpp"
#include "caq/volume_io.hpp"

namespace caq {
namespace {

using nlohmann::json;

constexpr std::size_t kLabelCount = 256;

const std::vector<std::pair<Method, std::string>>& method_names() {
    static const std::vector<std::pair<Method, std::string>> names = {
        {Method::mle, "mle"},
        {Method::map_besag, "map-besag"},
        {Method::map_besag_tissue, "map-besag-tissue"},
        {Method::map_leroux, "map-leroux"},
        {Method::bhm_leroux, "bhm-leroux"},
        {Method::bhm_besag, "bhm-besag"},
        {Method::bhm_besag_tissue, "bhm-besag-tissue"},
    };
    return names;
}

std::string grid_strategy_name(GridStrategy s) { return s == GridStrategy::exhaustive ? "exhaustive" : "mode-walk"; }

GridStrategy grid_strategy_from_name(const std::string& s) {
    if (s == "exhaustive") return GridStrategy::exhaustive;
    if (s == "mode-walk") return GridStrategy::mode_walk;
    throw ConfigError("unknown grid strategy '" + s + "'");
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) {
            ++j;
        }
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            r[order[k]] = avg;
        }
        i = j + 1;
    }
    return r;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out << text;
}

std::string time_tag(std::size_t t) {
    char buf[8];
    std::snprintf(buf, sizeof(buf), "t%02zu", t);
    return buf;
}

}  // namespace

std::string format_number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return {buf, res.ptr};
}

std::string method_name(Method m) {
    for (const auto& [method, name] : method_names()) {
        if (method == m) {
            return name;
        }
    }
    throw ConfigError("unknown method");
}

Method method_from_name(const std::string& name) {
    if (name == "bhm-exact") {
        return Method::bhm_leroux;
    }
    for (const auto& [method, n] : method_names()) {
        if (n == name) {
            return method;
        }
    }
    throw ConfigError("unknown method '" + name + "'");
}

std::string sigma_mode_name(SigmaMode m) {
    switch (m) {
        case SigmaMode::plugin: return "plugin";
        case SigmaMode::truth: return "truth";
        case SigmaMode::pooled: return "pooled";
    }
    throw ConfigError("unknown sigma mode");
}

SigmaMode parse_sigma_mode(const std::string& name) {
    if (name == "plugin") {
        return SigmaMode::plugin;
    }
    if (name == "truth") {
        return SigmaMode::truth;
    }
    if (name == "pooled") {
        return SigmaMode::pooled;
    }
    throw ConfigError("sigma_mode must be 'plugin', 'pooled' or 'truth'");
}

bool is_bhm(Method m) {
    return m == Method::bhm_leroux || m == Method::bhm_besag || m == Method::bhm_besag_tissue;
}

void ExperimentConfig::validate() const {
    dims.validate();
    noise.validate();
    cg.validate();
    hyper.validate();
    if (simulations < 1) {
        throw ConfigError("experiment needs at least one simulation");
    }
    if (methods.empty()) {
        throw ConfigError("experiment needs at least one method");
    }
    if (!(map_tau > 0.0) || !(map_lambda > 0.0 && map_lambda < 1.0)) {
        throw ConfigError("map_tau must be positive and map_lambda in (0, 1)");
    }
    if (!lambda_series.empty() && lambda_series.size() != TimeGrid::kCount) {
        throw ConfigError("lambda_series needs one value per time point");
    }
    for (double l : lambda_series) {
        if (!(l > 0.0 && l < 1.0)) {
            throw ConfigError("lambda_series values must lie in (0, 1)");
        }
    }
    if (std::any_of(methods.begin(), methods.end(), is_bhm) && dims.size() > kMaxDenseVoxels) {
        throw ConfigError("exact BHM methods are limited to grids of at most " + std::to_string(kMaxDenseVoxels) +
                          " voxels");
    }
}

json ExperimentConfig::to_json() const {
    json j;
    j["dims"] = {dims.nx, dims.ny, dims.nz};
    j["voxel_mm"] = dims.voxel_mm;
    j["psi0"] = psi0;
    j["rsnr"] = noise.rsnr;
    j["sigma_m_base"] = noise.sigma_m_base;
    j["sigma_phi_base"] = noise.sigma_phi_base;
    j["xi_variance"] = noise.xi_variance;
    j["simulations"] = simulations;
    std::vector<std::string> names;
    for (Method m : methods) {
        names.push_back(method_name(m));
    }
    j["methods"] = names;
    j["seed"] = seed;
    j["phantom_seed"] = phantom_seed;
    j["gain_jitter"] = gain_jitter;
    if (!phantom.empty()) {
        j["phantom"] = phantom;
    }
    j["tau_grid"] = hyper.tau_grid;
    j["lambda_grid"] = hyper.lambda_grid;
    j["log_tau_prior"] = {hyper.log_tau_shape, hyper.log_tau_rate};
    j["logit_lambda_prior"] = {hyper.lambda_a, hyper.lambda_b};
    j["grid_strategy"] = grid_strategy_name(hyper_options.strategy);
    j["log_drop"] = hyper_options.log_drop;
    j["map_tau"] = map_tau;
    j["map_lambda"] = map_lambda;
    j["lambda_series"] = lambda_series;
    j["lambda_source"] = lambda_source;
    j["cg_tolerance"] = cg.tolerance;
    j["cg_max_iterations"] = cg.max_iterations;
    j["cg_precondition"] = cg.precondition;
    j["sigma_mode"] = sigma_mode_name(sigma_mode);
    if (!output_dir.empty()) {
        j["output_dir"] = output_dir.string();
    }
    return j;
}

ExperimentConfig ExperimentConfig::from_json(const json& j) {
    ExperimentConfig c;
    try {
        if (j.contains("dims")) {
            const auto d = j.at("dims").get<std::vector<std::size_t>>();
            if (d.size() != 3) {
                throw ConfigError("dims must have three entries");
            }
            c.dims.nx = d[0];
            c.dims.ny = d[1];
            c.dims.nz = d[2];
        }
        c.dims.voxel_mm = j.value("voxel_mm", c.dims.voxel_mm);
        c.psi0 = j.value("psi0", c.psi0);
        c.noise.rsnr = j.value("rsnr", c.noise.rsnr);
        c.noise.sigma_m_base = j.value("sigma_m_base", c.noise.sigma_m_base);
        c.noise.sigma_phi_base = j.value("sigma_phi_base", c.noise.sigma_phi_base);
        c.noise.xi_variance = j.value("xi_variance", c.noise.xi_variance);
        c.simulations = j.value("simulations", c.simulations);
        if (j.contains("methods")) {
            c.methods.clear();
            for (const auto& name : j.at("methods").get<std::vector<std::string>>()) {
                c.methods.push_back(method_from_name(name));
            }
        }
        c.seed = j.value("seed", c.seed);
        c.phantom_seed = j.value("phantom_seed", c.phantom_seed);
        c.gain_jitter = j.value("gain_jitter", c.gain_jitter);
        if (j.contains("phantom")) {
            c.phantom = j.at("phantom");
            (void)c.phantom_spec();  // reject malformed overrides early
        }
        c.hyper.tau_grid = j.value("tau_grid", c.hyper.tau_grid);
        c.hyper.lambda_grid = j.value("lambda_grid", c.hyper.lambda_grid);
        if (j.contains("log_tau_prior")) {
            const auto p = j.at("log_tau_prior").get<std::vector<double>>();
            c.hyper.log_tau_shape = p.at(0);
            c.hyper.log_tau_rate = p.at(1);
        }
        if (j.contains("logit_lambda_prior")) {
            const auto p = j.at("logit_lambda_prior").get<std::vector<double>>();
            c.hyper.lambda_a = p.at(0);
            c.hyper.lambda_b = p.at(1);
        }
        c.hyper_options.strategy =
            grid_strategy_from_name(j.value("grid_strategy", grid_strategy_name(c.hyper_options.strategy)));
        c.hyper_options.log_drop = j.value("log_drop", c.hyper_options.log_drop);
        c.map_tau = j.value("map_tau", c.map_tau);
        c.map_lambda = j.value("map_lambda", c.map_lambda);
        c.lambda_series = j.value("lambda_series", c.lambda_series);
        c.lambda_source = j.value("lambda_source", c.lambda_source);
        c.cg.tolerance = j.value("cg_tolerance", c.cg.tolerance);
        c.cg.max_iterations = j.value("cg_max_iterations", c.cg.max_iterations);
        c.cg.precondition = j.value("cg_precondition", c.cg.precondition);
        const std::string sigma = j.value("sigma_mode", std::string("plugin"));
        c.sigma_mode = parse_sigma_mode(sigma);
        if (j.contains("output_dir")) {
            c.output_dir = j.at("output_dir").get<std::string>();
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("experiment config: ") + e.what());
    }
    return c;
}

std::string ExperimentConfig::hash() const {
    json j = to_json();
    j.erase("output_dir");
    const std::string text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return hex64(h);
}

PhantomSpec ExperimentConfig::phantom_spec() const {
    PhantomSpec spec = PhantomSpec::standard(dims, phantom_seed);
    spec.gain_jitter = gain_jitter;
    if (phantom.empty()) {
        return spec;
    }
    try {
        if (phantom.contains("regions")) {
            spec.regions.clear();
            for (const auto& r : phantom.at("regions")) {
                Region region;
                region.tissue = tissue_from_name(r.at("tissue").get<std::string>());
                const std::string shape = r.value("shape", std::string("ellipsoid"));
                if (shape == "ellipsoid") {
                    region.shape = Shape::ellipsoid;
                } else if (shape == "cylinder_x") {
                    region.shape = Shape::cylinder_x;
                } else if (shape == "cylinder_y") {
                    region.shape = Shape::cylinder_y;
                } else if (shape == "cylinder_z") {
                    region.shape = Shape::cylinder_z;
                } else {
                    throw ConfigError("unknown region shape '" + shape + "'");
                }
                region.center = r.at("center").get<std::array<double, 3>>();
                region.radii = r.at("radii").get<std::array<double, 3>>();
                spec.regions.push_back(region);
            }
        }
        if (phantom.contains("curves")) {
            for (const auto& [name, v] : phantom.at("curves").items()) {
                CurveParams cp;
                cp.gain = v.at(0).get<double>();
                cp.rate_per_s = v.at(1).is_null() ? std::numeric_limits<double>::infinity() : v.at(1).get<double>();
                spec.curves[tissue_from_name(name)] = cp;
            }
        }
        if (phantom.contains("aif")) {
            const auto& a = phantom.at("aif");
            spec.aif.amplitude = a.value("amplitude", spec.aif.amplitude);
            spec.aif.arrival_s = a.value("arrival_s", spec.aif.arrival_s);
            spec.aif.time_to_peak_s = a.value("time_to_peak_s", spec.aif.time_to_peak_s);
            spec.aif.shape = a.value("shape", spec.aif.shape);
            spec.aif.plateau_mM = a.value("plateau_mM", spec.aif.plateau_mM);
            spec.aif.plateau_rise_s = a.value("plateau_rise_s", spec.aif.plateau_rise_s);
            spec.aif.plateau_washout_per_s = a.value("plateau_washout_per_s", spec.aif.plateau_washout_per_s);
        }
        spec.delay_jitter_s = phantom.value("delay_jitter_s", spec.delay_jitter_s);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("phantom override: ") + e.what());
    }
    return spec;
}

std::vector<double> RmseTable::series(const std::string& method, const std::string& tissue) const {
    std::vector<std::pair<std::size_t, double>> found;
    for (const auto& r : rows) {
        if (r.method == method && r.tissue == tissue) {
            found.emplace_back(r.time_index, r.rmse);
        }
    }
    if (found.empty()) {
        throw ConfigError("no rMSE series for " + method + "/" + tissue);
    }
    std::sort(found.begin(), found.end());
    std::vector<double> out;
    for (const auto& [t, v] : found) {
        out.push_back(v);
    }
    return out;
}

std::vector<std::string> RmseTable::methods() const {
    std::vector<std::string> out;
    for (const auto& r : rows) {
        if (std::find(out.begin(), out.end(), r.method) == out.end()) {
            out.push_back(r.method);
        }
    }
    return out;
}

std::string RmseTable::to_csv() const {
    std::string out = "method,tissue,time_s,rmse\n";
    for (const auto& r : rows) {
        out += r.method + ',' + r.tissue + ',' + format_number(r.time_s) + ',' + format_number(r.rmse) + '\n';
    }
    return out;
}

std::vector<double> rmse_by_tissue(const std::vector<std::vector<Volume>>& estimates,
                                   const std::vector<std::vector<Volume>>& truth, const TissueMap& tissue,
                                   Tissue cls) {
    if (estimates.size() != truth.size() || estimates.empty()) {
        throw ConfigError("rmse: estimates and truth must cover the same simulations");
    }
    const auto code = static_cast<std::uint8_t>(cls);
    if (tissue.count(code) == 0) {
        throw ConfigError("rmse: tissue class '" + tissue_name(cls) + "' has no voxels");
    }
    const std::size_t nt = truth.front().size();
    std::vector<double> sse(nt, 0.0);
    std::vector<std::size_t> count(nt, 0);
    for (std::size_t s = 0; s < truth.size(); ++s) {
        if (estimates[s].size() != nt || truth[s].size() != nt) {
            throw ConfigError("rmse: every simulation needs the same number of time points");
        }
        for (std::size_t t = 0; t < nt; ++t) {
            if (!(estimates[s][t].dims() == tissue.dims()) || !(truth[s][t].dims() == tissue.dims())) {
                throw ConfigError("rmse: volume dims do not match tissue map");
            }
            const auto sums = kernels::class_error_sums(estimates[s][t].values(), truth[s][t].values(),
                                                        tissue.labels(), code + 1u);
            sse[t] += sums.squared_error[code];
            count[t] += sums.count[code];
        }
    }
    std::vector<double> out(nt);
    for (std::size_t t = 0; t < nt; ++t) {
        out[t] = std::sqrt(sse[t] / static_cast<double>(count[t]));
    }
    return out;
}

MethodComparison compare_series(const std::vector<double>& baseline, const std::vector<double>& candidate,
                                std::size_t peak) {
    if (baseline.size() != candidate.size() || baseline.size() < 3 || peak >= baseline.size()) {
        throw ConfigError("compare: series must align, have at least three points and contain the peak");
    }
    auto decrease = [](double base, double cand) { return base == 0.0 ? 0.0 : 100.0 * (1.0 - cand / base); };
    MethodComparison c;
    c.peak_decrease_pct = decrease(baseline[peak], candidate[peak]);
    const std::size_t n = baseline.size();
    const double base_tail = (baseline[n - 1] + baseline[n - 2] + baseline[n - 3]) / 3.0;
    const double cand_tail = (candidate[n - 1] + candidate[n - 2] + candidate[n - 3]) / 3.0;
    c.tail_decrease_pct = decrease(base_tail, cand_tail);
    double diff = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        diff += baseline[t] - candidate[t];
    }
    c.mean_difference = diff / static_cast<double>(n);
    return c;
}

std::vector<MethodComparison> compare_methods(const std::vector<RmseTable>& tables, const std::string& tissue,
                                              std::size_t peak) {
    if (tables.empty()) {
        return {};
    }
    for (const auto& t : tables) {
        if (t.config_hash != tables.front().config_hash || t.seed != tables.front().seed) {
            throw ConfigError("compare: tables come from different configurations");
        }
    }
    std::vector<std::pair<std::string, std::vector<double>>> series;
    for (const auto& t : tables) {
        for (const auto& m : t.methods()) {
            series.emplace_back(m, t.series(m, tissue));
        }
    }
    std::vector<MethodComparison> out;
    for (std::size_t a = 0; a < series.size(); ++a) {
        for (std::size_t b = a + 1; b < series.size(); ++b) {
            MethodComparison c = compare_series(series[a].second, series[b].second, peak);
            c.baseline = series[a].first;
            c.candidate = series[b].first;
            c.tissue = tissue;
            out.push_back(c);
        }
    }
    return out;
}

std::size_t peak_index(const std::vector<double>& vessel_truth_mean) {
    if (vessel_truth_mean.empty()) {
        throw ConfigError("empty vessel series");
    }
    return static_cast<std::size_t>(std::max_element(vessel_truth_mean.begin(), vessel_truth_mean.end()) -
                                    vessel_truth_mean.begin());
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) {
        throw ConfigError("spearman: series must align and have two or more points");
    }
    const auto ra = ranks(a);
    const auto rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0;
    double saa = 0.0;
    double sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) {
        return 0.0;
    }
    return sab / std::sqrt(saa * sbb);
}

LambdaReport lambda_series_report(const std::vector<std::vector<double>>& lambda_hat,
                                  const std::vector<double>& vessel_truth_mean, const TimeGrid& time) {
    LambdaReport report;
    const std::size_t nt = vessel_truth_mean.size();
    if (time.size() != nt) {
        throw ConfigError("lambda report: time grid does not match series");
    }
    report.mean_lambda.assign(nt, 0.0);
    for (const auto& sim : lambda_hat) {
        if (sim.size() != nt) {
            throw ConfigError("lambda report: every simulation needs one value per time point");
        }
        for (std::size_t t = 0; t < nt; ++t) {
            report.mean_lambda[t] += sim[t] / static_cast<double>(lambda_hat.size());
        }
    }
    report.spearman_vs_vessel = spearman(report.mean_lambda, vessel_truth_mean);
    report.csv = "time_s,lambda_mean,vessel_truth_mean\n";
    for (std::size_t t = 0; t < nt; ++t) {
        report.csv += format_number(time[t]) + ',' + format_number(report.mean_lambda[t]) + ',' +
                      format_number(vessel_truth_mean[t]) + '\n';
    }
    return report;
}

void RecoveryConfig::validate() const {
    dims.validate();
    noise.validate();
    hyper.validate();
    if (!(tau > 0.0) || !(lambda > 0.0 && lambda < 1.0) || replicates < 1) {
        throw ConfigError("recovery needs tau > 0, lambda in (0,1) and at least one replicate");
    }
}

RecoveryResult run_self_recovery(const RecoveryConfig& config) {
    config.validate();
    const PhaseOperator psi(build_dipole_kernel(config.dims, config.psi0));
    const TissueMap flat(config.dims, std::vector<std::uint8_t>(config.dims.size(), 1));
    const SmallImageContext ctx(psi, flat);
    const auto& prior = ctx.prior(PriorChoice::leroux);
    const LerouxModel model{prior.graph, config.tau, config.lambda};

    RecoveryResult out;
    out.tau_hat.assign(config.replicates, 0.0);
    out.lambda_hat.assign(config.replicates, 0.0);
    std::vector<std::exception_ptr> errors(config.replicates);
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t ri = 0; ri < static_cast<std::ptrdiff_t>(config.replicates); ++ri) {
        const auto r = static_cast<std::size_t>(ri);
        try {
            const std::uint64_t seed = mix_seed(config.seed, r);
            std::mt19937_64 rng(seed);
            const Volume c(config.dims, sample_leroux(model, rng));
            const Volume cm = corrupt_magnitude(c, config.noise, mix_seed(seed, 1));
            const Volume dphi = corrupt_phase(c, psi, config.noise, mix_seed(seed, 2));
            const auto noise = ObservationNoise::from_model(cm, config.noise, config.sigma_mode, &c);
            const auto system = DenseSystem::build(cm, dphi, noise, ctx.psi_dense());
            const auto post = hyperparameter_posterior(system, prior, config.hyper, config.hyper_options);
            out.tau_hat[r] = post.tau_hat;
            out.lambda_hat[r] = post.lambda_hat;
        } catch (...) {
            errors[r] = std::current_exception();
        }
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    const auto n = static_cast<double>(config.replicates);
    out.tau_mean = std::accumulate(out.tau_hat.begin(), out.tau_hat.end(), 0.0) / n;
    out.lambda_mean = std::accumulate(out.lambda_hat.begin(), out.lambda_hat.end(), 0.0) / n;
    return out;
}

std::vector<double> load_lambda_series(const std::filesystem::path& summary_path) {
    std::ifstream in(summary_path);
    if (!in) {
        throw ConfigError("cannot open small-image summary " + summary_path.string());
    }
    try {
        const json j = json::parse(in);
        return j.at("methods").at("bhm-leroux").at("lambda_mean_series").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw ConfigError("small-image summary lacks a bhm-leroux lambda series: " + std::string(e.what()));
    }
}

namespace {

struct SimulationOutcome {
    // [method][t]
    std::vector<std::vector<kernels::ClassErrorSums>> sums;
    std::vector<std::vector<double>> lambda_hat;
    std::vector<std::vector<double>> tau_hat;
    std::vector<std::size_t> cg_iterations;
};

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    std::vector<double> lambda_series = config.lambda_series;
    const bool uses_map_leroux =
        std::find(config.methods.begin(), config.methods.end(), Method::map_leroux) != config.methods.end();
    if (lambda_series.empty() && !config.lambda_source.empty()) {
        lambda_series = load_lambda_series(config.lambda_source);
        if (lambda_series.size() != TimeGrid::kCount) {
            throw ConfigError("transferred lambda series has the wrong length");
        }
    }

    const Phantom phantom = build_phantom(config.phantom_spec());
    const PhaseOperator psi(build_dipole_kernel(config.dims, config.psi0));
    const std::size_t nt = phantom.time.size();
    const std::size_t nm = config.methods.size();

    std::optional<SmallImageContext> ctx;
    if (std::any_of(config.methods.begin(), config.methods.end(), is_bhm)) {
        ctx.emplace(psi, phantom.tissue);
    }
    const GraphPtr open_graph = build_graph(config.dims);
    GraphPtr tissue_graph;
    if (std::find(config.methods.begin(), config.methods.end(), Method::map_besag_tissue) != config.methods.end()) {
        tissue_graph = build_graph(config.dims, &phantom.tissue, true);
    }
    std::vector<PrecisionOperator> leroux_by_time;
    if (uses_map_leroux) {
        for (std::size_t t = 0; t < nt; ++t) {
            const double lam = lambda_series.empty() ? config.map_lambda : lambda_series[t];
            leroux_by_time.push_back(leroux_precision({open_graph, config.map_tau, lam}));
        }
    }

    ExperimentResult result;
    result.time = phantom.time;
    result.vessel_truth_mean.assign(nt, 0.0);
    {
        const auto code = static_cast<std::uint8_t>(Tissue::vessel);
        const double count = static_cast<double>(phantom.tissue.count(code));
        for (std::size_t t = 0; t < nt; ++t) {
            double s = 0.0;
            for (std::size_t i = 0; i < phantom.tissue.size(); ++i) {
                if (phantom.tissue[i] == code) {
                    s += phantom.truth[t][i];
                }
            }
            result.vessel_truth_mean[t] = s / count;
        }
    }

    std::vector<SimulationOutcome> outcomes(config.simulations);
    std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
    for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(config.simulations); ++si) {
        try {
            const auto s = static_cast<std::size_t>(si);
            SimulationOutcome& out = outcomes[s];
            out.sums.assign(nm, std::vector<kernels::ClassErrorSums>(nt));
            out.lambda_hat.assign(nm, std::vector<double>(nt, 0.0));
            out.tau_hat.assign(nm, std::vector<double>(nt, 0.0));
            out.cg_iterations.assign(nm, 0);
            const SimulatedDataset data = simulate_dataset(phantom, psi, config.noise, mix_seed(config.seed, s));
            for (std::size_t t = 0; t < nt; ++t) {
                const auto noise = ObservationNoise::from_model(data.magnitude[t], config.noise, config.sigma_mode,
                                                                &data.truth[t]);
                std::optional<DenseSystem> system;
                for (std::size_t m = 0; m < nm; ++m) {
                    const Method method = config.methods[m];
                    std::vector<double> estimate;
                    if (is_bhm(method)) {
                        if (!system) {
                            system = DenseSystem::build(data.magnitude[t], data.phase[t], noise, ctx->psi_dense());
                        }
                        const PriorChoice choice = method == Method::bhm_leroux  ? PriorChoice::leroux
                                                   : method == Method::bhm_besag ? PriorChoice::besag
                                                                                 : PriorChoice::besag_tissue;
                        PosteriorSummary summary =
                            hyperparameter_posterior(*system, ctx->prior(choice), config.hyper, config.hyper_options);
                        out.lambda_hat[m][t] = summary.lambda_hat;
                        out.tau_hat[m][t] = summary.tau_hat;
                        estimate = std::move(summary.mean);
                    } else {
                        Estimate e;
                        switch (method) {
                            case Method::mle:
                                e = mle_estimate(data.magnitude[t], data.phase[t], noise, psi, config.cg);
                                break;
                            case Method::map_besag:
                                e = map_estimate(data.magnitude[t], data.phase[t], noise, psi,
                                                 besag_precision({open_graph, config.map_tau}), config.cg);
                                break;
                            case Method::map_besag_tissue:
                                e = map_estimate(data.magnitude[t], data.phase[t], noise, psi,
                                                 besag_precision({tissue_graph, config.map_tau}), config.cg);
                                break;
                            case Method::map_leroux:
                                e = map_estimate(data.magnitude[t], data.phase[t], noise, psi, leroux_by_time[t],
                                                 config.cg);
                                out.lambda_hat[m][t] = leroux_by_time[t].lambda();
                                break;
                            default: throw std::logic_error("unhandled method");
                        }
                        out.tau_hat[m][t] = method == Method::mle ? 0.0 : config.map_tau;
                        out.cg_iterations[m] += e.iterations;
                        estimate = e.c.vector();
                    }
                    out.sums[m][t] =
                        kernels::class_error_sums(estimate, data.truth[t].values(), phantom.tissue.labels(), kLabelCount);
                }
            }
        } catch (...) {
#pragma omp critical(caq_experiment_failure)
            if (!failure) {
                failure = std::current_exception();
            }
        }
    }
    if (failure) {
        std::rethrow_exception(failure);
    }

    // Reduce in simulation order so the output does not depend on scheduling.
    result.table.config_hash = config.hash();
    result.table.seed = config.seed;
    for (std::size_t m = 0; m < nm; ++m) {
        const std::string name = method_name(config.methods[m]);
        for (const auto& [code, cls_name] : phantom.tissue.classes()) {
            if (phantom.tissue.count(code) == 0) {
                continue;
            }
            for (std::size_t t = 0; t < nt; ++t) {
                double sse = 0.0;
                std::size_t count = 0;
                for (const auto& o : outcomes) {
                    sse += o.sums[m][t].squared_error[code];
                    count += o.sums[m][t].count[code];
                }
                result.table.rows.push_back(
                    {name, cls_name, t, phantom.time[t], std::sqrt(sse / static_cast<double>(count))});
            }
        }
        std::vector<std::vector<double>> lam;
        std::vector<std::vector<double>> tau;
        std::size_t iterations = 0;
        for (const auto& o : outcomes) {
            lam.push_back(o.lambda_hat[m]);
            tau.push_back(o.tau_hat[m]);
            iterations += o.cg_iterations[m];
        }
        result.lambda_hat[name] = std::move(lam);
        result.tau_hat[name] = std::move(tau);
        result.cg_iterations[name] = iterations;
    }

    const std::size_t peak = peak_index(result.vessel_truth_mean);
    json summary;
    summary["config_hash"] = result.table.config_hash;
    summary["vessel_truth_mean"] = result.vessel_truth_mean;
    summary["time_s"] = std::vector<double>(phantom.time.seconds().begin(), phantom.time.seconds().end());
    summary["peak_index"] = peak;
    for (std::size_t m = 0; m < nm; ++m) {
        const Method method = config.methods[m];
        const std::string name = method_name(method);
        json mj;
        std::vector<double> tau_mean(nt, 0.0);
        for (const auto& sim : result.tau_hat[name]) {
            for (std::size_t t = 0; t < nt; ++t) {
                tau_mean[t] += sim[t] / static_cast<double>(config.simulations);
            }
        }
        mj["tau_mean_series"] = tau_mean;
        if (method == Method::bhm_leroux || method == Method::map_leroux) {
            const LambdaReport report = lambda_series_report(result.lambda_hat[name], result.vessel_truth_mean, phantom.time);
            mj["lambda_mean_series"] = report.mean_lambda;
            mj["lambda_spearman_vs_vessel"] = report.spearman_vs_vessel;
        }
        if (is_bhm(method)) {
            mj["lambda_hat"] = result.lambda_hat[name];
            mj["tau_hat"] = result.tau_hat[name];
        } else {
            mj["cg_iterations_total"] = result.cg_iterations[name];
        }
        summary["methods"][name] = mj;
    }
    result.summary = summary;

    if (!config.output_dir.empty()) {
        std::filesystem::create_directories(config.output_dir);
        std::vector<std::string> files{"rmse.csv", "summary.json"};
        write_text(config.output_dir / "rmse.csv", result.table.to_csv());
        write_text(config.output_dir / "summary.json", summary.dump(2) + '\n');
        for (std::size_t m = 0; m < nm; ++m) {
            const Method method = config.methods[m];
            if (method == Method::bhm_leroux || method == Method::map_leroux) {
                const std::string name = method_name(method);
                const std::string file = "lambda_" + name + ".csv";
                write_text(config.output_dir / file,
                           lambda_series_report(result.lambda_hat[name], result.vessel_truth_mean, phantom.time).csv);
                files.push_back(file);
            }
        }
        json manifest;
        manifest["config"] = config.to_json();
        manifest["config"].erase("output_dir");
        manifest["config_hash"] = result.table.config_hash;
        std::vector<std::uint64_t> seeds;
        for (std::size_t s = 0; s < config.simulations; ++s) {
            seeds.push_back(mix_seed(config.seed, s));
        }
        manifest["simulation_seeds"] = seeds;
        manifest["files"] = files;
        write_text(config.output_dir / "manifest.json", manifest.dump(2) + '\n');
    }
    return result;
}

void SweepConfig::validate() const {
    small.validate();
    large.validate();
    if (!(rsnr_high > 0.0) || !(rsnr_low > 0.0) || !(tau_high > 0.0) || !(tau_low > 0.0)) {
        throw ConfigError("sweep: noise levels and tau values must be positive");
    }
    if (std::find(small.methods.begin(), small.methods.end(), Method::bhm_leroux) == small.methods.end()) {
        throw ConfigError("sweep: the small-image run must include bhm-leroux to supply lambda");
    }
}

json SweepConfig::to_json() const {
    json j;
    j["small"] = small.to_json();
    j["large"] = large.to_json();
    j["small"].erase("output_dir");
    j["large"].erase("output_dir");
    j["rsnr_high"] = rsnr_high;
    j["rsnr_low"] = rsnr_low;
    j["tau_high"] = tau_high;
    j["tau_low"] = tau_low;
    return j;
}

SweepConfig SweepConfig::from_json(const json& j) {
    SweepConfig c = standard();
    try {
        // Sub-configs start from the standard sweep values, so partial overrides are enough.
        if (j.contains("small")) {
            json merged = c.small.to_json();
            merged.update(j.at("small"));
            c.small = ExperimentConfig::from_json(merged);
        }
        if (j.contains("large")) {
            json merged = c.large.to_json();
            merged.update(j.at("large"));
            c.large = ExperimentConfig::from_json(merged);
        }
        c.rsnr_high = j.value("rsnr_high", c.rsnr_high);
        c.rsnr_low = j.value("rsnr_low", c.rsnr_low);
        c.tau_high = j.value("tau_high", c.tau_high);
        c.tau_low = j.value("tau_low", c.tau_low);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("sweep config: ") + e.what());
    }
    return c;
}

SweepConfig SweepConfig::standard() {
    SweepConfig c;
    c.small.dims = {10, 10, 10, 1.0};
    c.small.simulations = 30;
    c.small.methods = {Method::mle, Method::bhm_besag, Method::bhm_besag_tissue, Method::bhm_leroux};
    c.large.dims = {64, 64, 64, 1.0};
    c.large.simulations = 10;
    c.large.methods = {Method::mle, Method::map_leroux};
    return c;
}

SweepResult run_sweep(const SweepConfig& config) {
    config.validate();
    auto sub = [&](const char* name) {
        return config.output_dir.empty() ? std::filesystem::path{} : config.output_dir / name;
    };
    SweepResult out;

    ExperimentConfig small = config.small;
    small.noise.rsnr = config.rsnr_high;
    small.output_dir = sub("small_high");
    out.small_high = run_experiment(small);

    // The low-noise-level small run only feeds lambda to the large run.
    small.noise.rsnr = config.rsnr_low;
    small.methods = {Method::mle, Method::bhm_leroux};
    small.output_dir = sub("small_low");
    out.small_low = run_experiment(small);

    auto lambda_of = [](const ExperimentResult& r) {
        return r.summary.at("methods").at("bhm-leroux").at("lambda_mean_series").get<std::vector<double>>();
    };
    ExperimentConfig large = config.large;
    large.noise.rsnr = config.rsnr_high;
    large.map_tau = config.tau_high;
    large.lambda_series = lambda_of(out.small_high);
    large.lambda_source.clear();
    large.output_dir = sub("large_high");
    out.large_high = run_experiment(large);

    large.noise.rsnr = config.rsnr_low;
    large.map_tau = config.tau_low;
    large.lambda_series = lambda_of(out.small_low);
    large.output_dir = sub("large_low");
    out.large_low = run_experiment(large);

    if (!config.output_dir.empty()) {
        write_text(config.output_dir / "sweep.json", config.to_json().dump(2) + '\n');
    }
    return out;
}

void write_dataset(const std::filesystem::path& dir, const SimulatedDataset& data, const ExperimentConfig& config) {
    std::filesystem::create_directories(dir);
    write_tissue(dir / "tissue.catis", data.tissue);
    json files = json::object();
    files["tissue"] = "tissue.catis";
    for (const char* quantity : {"truth", "magnitude", "phase"}) {
        const auto& stack = std::string(quantity) == "truth"       ? data.truth
                            : std::string(quantity) == "magnitude" ? data.magnitude
                                                                   : data.phase;
        std::vector<std::string> names;
        for (std::size_t t = 0; t < stack.size(); ++t) {
            const std::string name = std::string(quantity) + "_" + time_tag(t) + ".cavol";
            write_volume(dir / name, stack[t]);
            names.push_back(name);
        }
        files[quantity] = names;
    }
    json manifest;
    json cfg = config.to_json();
    cfg.erase("output_dir");
    manifest["config"] = cfg;
    manifest["seed"] = data.seed;
    manifest["noise"] = {{"rsnr", data.noise.rsnr},
                         {"sigma_m", data.noise.sigma_m()},
                         {"sigma_phi", data.noise.sigma_phi()},
                         {"xi_variance", data.noise.xi_variance}};
    manifest["time_s"] = std::vector<double>(data.time.seconds().begin(), data.time.seconds().end());
    manifest["files"] = files;
    write_text(dir / "manifest.json", manifest.dump(2) + '\n');
}

LoadedDataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) {
        throw ConfigError("cannot open dataset manifest " + manifest_path.string());
    }
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError("dataset manifest: " + std::string(e.what()));
    }
    const auto dir = manifest_path.parent_path();
    LoadedDataset out{{}, ExperimentConfig::from_json(manifest.at("config"))};
    SimulatedDataset& d = out.data;
    d.noise = out.config.noise;
    d.seed = manifest.at("seed").get<std::uint64_t>();
    d.time = TimeGrid(manifest.at("time_s").get<std::vector<double>>());
    const auto& files = manifest.at("files");
    d.tissue = read_tissue(dir / files.at("tissue").get<std::string>());
    for (const char* quantity : {"truth", "magnitude", "phase"}) {
        auto& stack = std::string(quantity) == "truth"       ? d.truth
                      : std::string(quantity) == "magnitude" ? d.magnitude
                                                             : d.phase;
        for (const auto& name : files.at(quantity).get<std::vector<std::string>>()) {
            stack.push_back(read_volume(dir / name, d.tissue.dims()));
        }
        if (stack.size() != d.time.size()) {
            throw ConfigError(std::string("dataset manifest: ") + quantity + " stack does not match time grid");
        }
    }
    return out;
}

}  // namespace caq
