#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "caq/eval.hpp"
#include "caq/kernels.hpp"

using namespace caq;

namespace {

std::filesystem::path tmp_dir(const std::string& name) {
    const auto dir = std::filesystem::path(CAQ_TEST_TMP) / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.dims = {6, 6, 6, 1.0};
    c.simulations = 3;
    c.methods = {Method::mle, Method::map_leroux, Method::bhm_leroux, Method::bhm_besag};
    c.seed = 11;
    return c;
}

}  // namespace

TEST_SUITE("eval") {
    TEST_CASE("method and sigma mode names") {
        for (Method m : {Method::mle, Method::map_besag, Method::map_besag_tissue, Method::map_leroux, Method::bhm_leroux,
                         Method::bhm_besag, Method::bhm_besag_tissue}) {
            CHECK(method_from_name(method_name(m)) == m);
        }
        CHECK(method_from_name("bhm-exact") == Method::bhm_leroux);
        CHECK_THROWS_AS(method_from_name("inla"), ConfigError);
        CHECK(is_bhm(Method::bhm_besag));
        CHECK_FALSE(is_bhm(Method::map_leroux));
        for (SigmaMode m : {SigmaMode::plugin, SigmaMode::truth, SigmaMode::pooled}) {
            CHECK(parse_sigma_mode(sigma_mode_name(m)) == m);
        }
        CHECK_THROWS_AS(parse_sigma_mode("guess"), ConfigError);
    }

    TEST_CASE("config JSON round trip and hash") {
        ExperimentConfig c = small_config();
        c.lambda_series = std::vector<double>(22, 0.7);
        c.phantom = {{"delay_jitter_s", 0.5}};
        const auto j = c.to_json();
        const auto back = ExperimentConfig::from_json(j);
        CHECK(back.to_json() == j);
        CHECK(back.hash() == c.hash());
        ExperimentConfig moved = c;
        moved.output_dir = "/somewhere/else";
        CHECK(moved.hash() == c.hash());
        ExperimentConfig other = c;
        other.seed = 12;
        CHECK(other.hash() != c.hash());
        CHECK(c.hash().size() == 16);

        CHECK_THROWS_AS(ExperimentConfig::from_json({{"methods", {"mle", "nope"}}}), ConfigError);
        CHECK_THROWS_AS(ExperimentConfig::from_json({{"sigma_mode", "guess"}}), ConfigError);
        ExperimentConfig bad = small_config();
        bad.simulations = 0;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = small_config();
        bad.lambda_series = {0.5, 0.5};
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }

    TEST_CASE("phantom overrides") {
        ExperimentConfig c = small_config();
        c.phantom = nlohmann::json::parse(R"({
            "regions": [{"tissue": "white_matter", "center": [0, 0, 0], "radii": [0.5, 0.5, 0.5]},
                        {"tissue": "vessel", "shape": "cylinder_x", "center": [0, 0, 0], "radii": [0.9, 0.2, 0.2]}],
            "curves": {"white_matter": [0.2, null]},
            "aif": {"amplitude": 4.0}
        })");
        const PhantomSpec s = c.phantom_spec();
        REQUIRE(s.regions.size() == 2);
        CHECK(s.regions[1].shape == Shape::cylinder_x);
        CHECK(s.aif.amplitude == 4.0);
        CHECK(std::isinf(s.curves.at(Tissue::white_matter).rate_per_s));
        c.phantom = {{"regions", {{{"tissue", "bone"}, {"center", {0, 0, 0}}, {"radii", {1, 1, 1}}}}}};
        CHECK_THROWS_AS(c.phantom_spec(), ConfigError);
    }

    TEST_CASE("Spearman correlation") {
        const std::vector<double> up{1, 2, 3, 4, 5, 6};
        const std::vector<double> down{9, 7, 5, 4, 1, 0};
        CHECK(spearman(up, down) == doctest::Approx(-1.0));
        CHECK(spearman(up, up) == doctest::Approx(1.0));
        // rank based: any monotone transform is the same
        std::vector<double> cubed;
        for (double v : up) {
            cubed.push_back(v * v * v - 10.0);
        }
        CHECK(spearman(up, cubed) == doctest::Approx(1.0));
        // ties get average ranks: ranks (1.5, 1.5, 3) vs (1, 2, 3)
        CHECK(spearman({0, 0, 1}, {1, 2, 3}) == doctest::Approx(0.8660254037844386));
        CHECK(spearman({2, 2, 2}, {1, 2, 3}) == 0.0);
        CHECK_THROWS_AS(spearman({1}, {1}), ConfigError);
        CHECK_THROWS_AS(spearman({1, 2}, {1, 2, 3}), ConfigError);
    }

    TEST_CASE("series comparison") {
        const std::vector<double> base{1.0, 2.0, 4.0, 2.0, 1.0, 1.0, 1.0};
        const std::vector<double> cand{1.0, 1.5, 2.4, 1.0, 0.8, 0.7, 0.9};
        CHECK(peak_index({0, 1, 5, 3, 2, 1, 0}) == 2);
        const auto cmp = compare_series(base, cand, 2);
        CHECK(cmp.peak_decrease_pct == doctest::Approx(40.0));
        CHECK(cmp.tail_decrease_pct == doctest::Approx(20.0));
        CHECK(cmp.mean_difference == doctest::Approx((0.0 + 0.5 + 1.6 + 1.0 + 0.2 + 0.3 + 0.1) / 7.0));
    }

    TEST_CASE("rMSE by tissue: brute force and permutation invariance") {
        const GridDims d{4, 3, 2, 1.0};
        std::vector<std::uint8_t> labels(d.size());
        std::mt19937_64 rng(3);
        for (auto& l : labels) {
            l = static_cast<std::uint8_t>(rng() % 3);
        }
        const TissueMap tissue(d, labels);
        const std::size_t ns = 4;
        const std::size_t nt = 3;
        std::vector<std::vector<Volume>> est(ns), truth(ns);
        std::normal_distribution<double> g(0.0, 1.0);
        for (std::size_t s = 0; s < ns; ++s) {
            for (std::size_t t = 0; t < nt; ++t) {
                std::vector<double> a(d.size()), b(d.size());
                for (std::size_t i = 0; i < d.size(); ++i) {
                    a[i] = g(rng);
                    b[i] = g(rng);
                }
                est[s].emplace_back(d, a);
                truth[s].emplace_back(d, b);
            }
        }
        const auto r = rmse_by_tissue(est, truth, tissue, Tissue::white_matter);
        REQUIRE(r.size() == nt);
        for (std::size_t t = 0; t < nt; ++t) {
            double ss = 0.0;
            std::size_t n = 0;
            for (std::size_t s = 0; s < ns; ++s) {
                for (std::size_t i = 0; i < d.size(); ++i) {
                    if (labels[i] == static_cast<std::uint8_t>(Tissue::white_matter)) {
                        ss += std::pow(est[s][t][i] - truth[s][t][i], 2);
                        ++n;
                    }
                }
            }
            CHECK(r[t] == doctest::Approx(std::sqrt(ss / static_cast<double>(n))).epsilon(1e-14));
        }
        std::reverse(est.begin(), est.end());
        std::reverse(truth.begin(), truth.end());
        const auto rp = rmse_by_tissue(est, truth, tissue, Tissue::white_matter);
        for (std::size_t t = 0; t < nt; ++t) {
            CHECK(rp[t] == doctest::Approx(r[t]).epsilon(1e-14));
        }
        // an absent class has no rMSE
        CHECK_THROWS(rmse_by_tissue(est, truth, tissue, Tissue::vessel));
    }

    TEST_CASE("experiment is reproducible and thread-count independent") {
        const int saved = kernels::max_threads();
        ExperimentConfig c = small_config();
        c.output_dir = tmp_dir("exp_a");
        kernels::set_threads(1);
        const auto a = run_experiment(c);
        c.output_dir = tmp_dir("exp_b");
        kernels::set_threads(3);
        const auto b = run_experiment(c);
        kernels::set_threads(saved);

        const std::string csv = slurp(tmp_dir("unused").parent_path() / "exp_a" / "rmse.csv");
        CHECK(csv == slurp(std::filesystem::path(CAQ_TEST_TMP) / "exp_b" / "rmse.csv"));
        CHECK(csv.rfind("method,tissue,time_s,rmse\n", 0) == 0);
        CHECK(a.table.to_csv() == csv);
        CHECK(a.summary == b.summary);

        // one row per method x present class x time point
        std::size_t classes = 0;
        const Phantom ph = build_phantom(c.phantom_spec());
        for (int code = 0; code < 6; ++code) {
            classes += ph.tissue.count(static_cast<std::uint8_t>(code)) > 0 ? 1 : 0;
        }
        CHECK(a.table.rows.size() == c.methods.size() * classes * TimeGrid::kCount);
        CHECK(a.table.methods().size() == c.methods.size());

        for (const char* f : {"summary.json", "manifest.json", "lambda_bhm-leroux.csv"}) {
            CHECK(std::filesystem::exists(std::filesystem::path(CAQ_TEST_TMP) / "exp_a" / f));
        }
        const auto lam = load_lambda_series(std::filesystem::path(CAQ_TEST_TMP) / "exp_a" / "summary.json");
        CHECK(lam.size() == TimeGrid::kCount);
        CHECK(lam == a.summary.at("methods").at("bhm-leroux").at("lambda_mean_series").get<std::vector<double>>());

        // the rMSE rows agree with a recomputation from the stored sums
        const auto mle = a.table.series("mle", "vessel");
        CHECK(mle.size() == TimeGrid::kCount);
        for (double v : mle) {
            CHECK(std::isfinite(v));
            CHECK(v >= 0.0);
        }
    }

    TEST_CASE("map-leroux takes lambda from a small-image summary") {
        ExperimentConfig small = small_config();
        small.simulations = 1;
        small.methods = {Method::bhm_leroux};
        small.output_dir = tmp_dir("lam_src");
        const auto src = run_experiment(small);

        ExperimentConfig big = small_config();
        big.simulations = 1;
        big.methods = {Method::map_leroux};
        big.lambda_source = (small.output_dir / "summary.json").string();
        const auto from_file = run_experiment(big);
        big.lambda_source.clear();
        big.lambda_series = src.summary.at("methods").at("bhm-leroux").at("lambda_mean_series").get<std::vector<double>>();
        const auto from_series = run_experiment(big);
        CHECK(from_file.table.to_csv() == from_series.table.to_csv());
    }

    TEST_CASE("dataset files round trip") {
        ExperimentConfig c = small_config();
        const Phantom ph = build_phantom(c.phantom_spec());
        const PhaseOperator psi(build_dipole_kernel(c.dims, c.psi0));
        const auto data = simulate_dataset(ph, psi, c.noise, 5);
        const auto dir = tmp_dir("dataset");
        write_dataset(dir, data, c);
        const auto loaded = load_dataset(dir / "manifest.json");
        CHECK(loaded.config.hash() == c.hash());
        CHECK(loaded.data.tissue.labels().size() == data.tissue.labels().size());
        REQUIRE(loaded.data.magnitude.size() == data.magnitude.size());
        for (std::size_t t = 0; t < data.magnitude.size(); ++t) {
            CHECK(std::ranges::equal(loaded.data.magnitude[t].values(), data.magnitude[t].values()));
            CHECK(std::ranges::equal(loaded.data.phase[t].values(), data.phase[t].values()));
            CHECK(std::ranges::equal(loaded.data.truth[t].values(), data.truth[t].values()));
        }
    }

    TEST_CASE("self-recovery plumbing") {
        RecoveryConfig rc;
        rc.dims = {5, 5, 4, 1.0};
        rc.replicates = 3;
        const auto a = run_self_recovery(rc);
        const auto b = run_self_recovery(rc);
        CHECK(a.lambda_hat == b.lambda_hat);
        CHECK(a.tau_hat.size() == 3);
        double m = 0.0;
        for (double v : a.lambda_hat) {
            m += v / 3.0;
        }
        CHECK(a.lambda_mean == doctest::Approx(m));
        rc.lambda = 1.0;
        CHECK_THROWS_AS(run_self_recovery(rc), ConfigError);
    }

    TEST_CASE("sweep config") {
        const auto s = SweepConfig::standard();
        CHECK(s.small.simulations == 30);
        CHECK(s.large.simulations == 10);
        CHECK(s.large.dims.nx == 64);
        CHECK(s.tau_high == 0.1);
        CHECK(s.tau_low == 0.01);
        const auto back = SweepConfig::from_json(s.to_json());
        CHECK(back.to_json() == s.to_json());
        const auto partial = SweepConfig::from_json({{"large", {{"simulations", 50}}}});
        CHECK(partial.large.simulations == 50);
        CHECK(partial.large.dims.nx == 64);
    }
}
