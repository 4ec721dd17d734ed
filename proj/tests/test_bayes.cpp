#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

#include "caq/bayes.hpp"

using namespace caq;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Data {
    GridDims dims;
    PhaseOperator psi;
    Eigen::MatrixXd psi_dense;
    Volume magnitude;
    Volume phase;
};

Data noisy_instance(const GridDims& d, std::uint64_t seed) {
    Data x{d, PhaseOperator(build_dipole_kernel(d, 1.0)), {}, {}, {}};
    x.psi_dense = dense_psi_matrix(x.psi);
    std::mt19937_64 rng(seed);
    std::vector<double> c(d.size());
    for (double& v : c) {
        v = std::uniform_real_distribution<double>(0.0, 2.0)(rng);
    }
    const Volume truth(d, c);
    NoiseModel nm;
    x.magnitude = corrupt_magnitude(truth, nm, seed + 1);
    x.phase = corrupt_phase(truth, x.psi, nm, seed + 2);
    return x;
}

// Direct log density of y = [c_m; dphi] under c = mu 1 + u, u with covariance `prior_cov`
// restricted to the complement of the constant vector, mu flat: the kappa -> infinity
// limit of log p_kappa(y) + log(2 pi kappa)/2, in closed form.
double direct_flat_intercept(const Data& x, const ObservationNoise& noise, const Eigen::MatrixXd& pinv) {
    const auto n = static_cast<Eigen::Index>(x.dims.size());
    Eigen::MatrixXd h(2 * n, n);
    h.topRows(n) = Eigen::MatrixXd::Identity(n, n);
    h.bottomRows(n) = x.psi_dense;
    Eigen::VectorXd y(2 * n);
    Eigen::MatrixXd c0 = h * pinv * h.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
        c0(i, i) += noise.var_m[static_cast<std::size_t>(i)];
        c0(n + i, n + i) += noise.var_phi[static_cast<std::size_t>(i)];
        y(i) = x.magnitude[static_cast<std::size_t>(i)];
        y(n + i) = x.phase[static_cast<std::size_t>(i)];
    }
    const double log2pi = std::log(2.0 * std::numbers::pi);
    const Eigen::LLT<Eigen::MatrixXd> llt(c0);
    const double logdet = 2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
    const double base = -0.5 * static_cast<double>(2 * n) * log2pi - 0.5 * logdet - 0.5 * y.dot(llt.solve(y));
    const Eigen::VectorXd v = h * Eigen::VectorXd::Constant(n, 1.0 / std::sqrt(static_cast<double>(n)));
    const Eigen::VectorXd c0v = llt.solve(v);
    const double a = v.dot(c0v);
    const double proj = c0v.dot(y);
    return base - 0.5 * std::log(a) + 0.5 * proj * proj / a + 0.5 * log2pi;
}

}  // namespace

TEST_SUITE("bayes") {
    TEST_CASE("hyperprior log densities") {
        const auto hp = HyperPriorSpec::standard();
        for (double tau : {1e-3, 0.5, 7.0, 1e3}) {
            CHECK(log_tau_prior(tau, hp) == doctest::Approx(std::log(5e-5) + std::log(tau) - 5e-5 * tau));
        }
        for (double lambda : {0.05, 0.5, 0.9}) {
            CHECK(logit_lambda_prior(lambda, hp) == doctest::Approx(std::log(lambda) + std::log1p(-lambda)));
        }
        CHECK(hp.tau_grid.size() == 25);
        CHECK(hp.tau_grid.front() == doctest::Approx(1e-3));
        CHECK(hp.tau_grid.back() == doctest::Approx(1e3));
        CHECK(hp.lambda_grid.size() == 19);
        HyperPriorSpec bad = hp;
        bad.lambda_grid = {0.5, 1.0};
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = hp;
        bad.tau_grid = {2.0, 1.0};
        CHECK_THROWS_AS(bad.validate(), ConfigError);
        bad = hp;
        bad.tau_grid.clear();
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }

    TEST_CASE("scalar conjugate case") {
        // one voxel: Psi = 0, the Leroux precision is tau (1 - lambda)
        const GridDims d{1, 1, 1, 1.0};
        const PhaseOperator psi(build_dipole_kernel(d, 1.0));
        const Volume cm(d, 1.7);
        const Volume dphi(d, 0.3);
        const double s2 = 0.25;
        const double p2 = 0.04;
        const auto noise = ObservationNoise::uniform(1, s2, p2);
        const auto system = DenseSystem::build(cm, dphi, noise, psi);
        const auto prior = PriorStructure::make(PriorFamily::leroux, build_graph(d));
        const Theta th{2.0, 0.4};
        const double q = th.tau * (1.0 - th.lambda);
        const auto post = dense_posterior(system, prior, th);
        CHECK(post.mean(0) == doctest::Approx((1.7 / s2) / (1.0 / s2 + q)).epsilon(1e-14));
        CHECK(post.variance(0) == doctest::Approx(1.0 / (1.0 / s2 + q)).epsilon(1e-14));
        const double v = s2 + 1.0 / q;
        const double expect = -0.5 * std::log(2.0 * std::numbers::pi * v) - 0.5 * 1.7 * 1.7 / v -
                              0.5 * std::log(2.0 * std::numbers::pi * p2) - 0.5 * 0.3 * 0.3 / p2;
        CHECK(log_marginal_likelihood(system, prior, th) == doctest::Approx(expect).epsilon(1e-13));
    }

    TEST_CASE("no data: the posterior is the Leroux prior") {
        const GridDims d{3, 3, 2, 1.0};
        const Data x = noisy_instance(d, 3);
        const auto noise = ObservationNoise::uniform(d.size(), kInf, kInf);
        const auto system = DenseSystem::build(x.magnitude, x.phase, noise, x.psi_dense);
        CHECK(system.observed == 0);
        const auto prior = PriorStructure::make(PriorFamily::leroux, build_graph(d));
        const Theta th{1.5, 0.7};
        const auto post = dense_posterior(system, prior, th);
        const Eigen::MatrixXd cov = prior.precision(th.tau, th.lambda).to_dense().inverse();
        CHECK(post.mean.cwiseAbs().maxCoeff() == 0.0);
        CHECK((post.variance - cov.diagonal()).cwiseAbs().maxCoeff() <= 1e-12);
        CHECK(log_marginal_likelihood(system, prior, th) == doctest::Approx(0.0).scale(1e-12));
    }

    TEST_CASE("Leroux with intercept: marginal likelihood vs direct density") {
        const GridDims d{3, 3, 3, 1.0};
        const Data x = noisy_instance(d, 4);
        const auto noise = ObservationNoise::from_model(x.magnitude, NoiseModel{}, SigmaMode::plugin);
        const auto system = DenseSystem::build(x.magnitude, x.phase, noise, x.psi_dense);
        const auto g = build_graph(d);
        const auto prior = PriorStructure::make(PriorFamily::leroux, g, true);
        CHECK(prior.null_dimension() == 1);
        const auto n = static_cast<Eigen::Index>(d.size());
        for (const Theta th : {Theta{0.3, 0.2}, Theta{2.0, 0.85}}) {
            const Eigen::MatrixXd q = prior.precision(th.tau, th.lambda).to_dense();
            // Q 1 = tau (1 - lambda) 1, so dropping that eigenpair gives the pseudo-inverse.
            const Eigen::MatrixXd pinv = q.inverse() - Eigen::MatrixXd::Constant(n, n, 1.0 / (static_cast<double>(n) * th.tau * (1.0 - th.lambda)));
            const double direct = direct_flat_intercept(x, noise, pinv);
            CHECK(std::abs(log_marginal_likelihood(system, prior, th) - direct) <= 1e-8);

            Eigen::MatrixXd full = Eigen::MatrixXd::Zero(n, n);
            prior.add_to(full, th.tau, th.lambda);
            CHECK((full * Eigen::VectorXd::Ones(n)).cwiseAbs().maxCoeff() <= 1e-12);
        }
    }

    TEST_CASE("flat constant direction: shifting c_m leaves the evidence unchanged") {
        // Psi annihilates constants, so with uniform noise a shift of c_m is absorbed exactly
        // by the unpenalised constant direction.
        const GridDims d{4, 3, 3, 1.0};
        Data x = noisy_instance(d, 5);
        const auto noise = ObservationNoise::uniform(d.size(), 0.3, 0.05);
        const auto g = build_graph(d);
        const auto besag = PriorStructure::make(PriorFamily::besag, g);
        const auto leroux = PriorStructure::make(PriorFamily::leroux, g, true);
        const auto base = DenseSystem::build(x.magnitude, x.phase, noise, x.psi_dense);
        const auto p0 = dense_posterior(base, besag, {1.2, 1.0});
        const double b0 = log_marginal_likelihood(base, besag, {1.2, 1.0});
        const double l0 = log_marginal_likelihood(base, leroux, {1.2, 0.6});
        std::vector<double> shifted(x.magnitude.values().begin(), x.magnitude.values().end());
        for (double& v : shifted) {
            v += 2.5;
        }
        const auto moved = DenseSystem::build(Volume(d, shifted), x.phase, noise, x.psi_dense);
        CHECK(log_marginal_likelihood(moved, besag, {1.2, 1.0}) == doctest::Approx(b0).epsilon(1e-10));
        CHECK(log_marginal_likelihood(moved, leroux, {1.2, 0.6}) == doctest::Approx(l0).epsilon(1e-10));
        const auto p1 = dense_posterior(moved, besag, {1.2, 1.0});
        CHECK(((p1.mean - p0.mean).array() - 2.5).abs().maxCoeff() <= 1e-9);

        // the proper prior without intercept is not invariant
        const auto plain = PriorStructure::make(PriorFamily::leroux, g);
        CHECK(std::abs(log_marginal_likelihood(moved, plain, {1.2, 0.6}) -
                       log_marginal_likelihood(base, plain, {1.2, 0.6})) > 1e-3);
    }

    TEST_CASE("Besag generalised determinant counts components") {
        const GridDims d{4, 1, 1, 1.0};
        const TissueMap t(d, {1, 1, 2, 2});
        const auto g = build_graph(d, &t, true);
        const auto prior = PriorStructure::make(PriorFamily::besag, g);
        CHECK(prior.null_dimension() == 2);
        // two disjoint edges: eigenvalues 2 tau, 2 tau
        CHECK(prior.log_det(3.0, 1.0) == doctest::Approx(2.0 * std::log(6.0)));
    }

    TEST_CASE("one-point grid reproduces the dense posterior") {
        const GridDims d{4, 4, 3, 1.0};
        const Data x = noisy_instance(d, 6);
        const auto noise = ObservationNoise::from_model(x.magnitude, NoiseModel{}, SigmaMode::plugin);
        const auto system = DenseSystem::build(x.magnitude, x.phase, noise, x.psi_dense);
        const auto prior = PriorStructure::make(PriorFamily::leroux, build_graph(d), true);
        HyperPriorSpec hp = HyperPriorSpec::standard();
        hp.tau_grid = {0.8};
        hp.lambda_grid = {0.65};
        const auto s = hyperparameter_posterior(system, prior, hp);
        REQUIRE(s.weights.size() == 1);
        CHECK(s.weights[0] == 1.0);
        CHECK(s.tau_hat == 0.8);
        CHECK(s.lambda_hat == 0.65);
        const auto post = dense_posterior(system, prior, {0.8, 0.65});
        for (std::size_t i = 0; i < d.size(); ++i) {
            CHECK(s.mean[i] == post.mean(static_cast<Eigen::Index>(i)));
        }
    }

    TEST_CASE("grid posterior: normalised weights, mode walk agrees with the full grid") {
        const GridDims d{5, 4, 4, 1.0};
        const Data x = noisy_instance(d, 7);
        const auto noise = ObservationNoise::from_model(x.magnitude, NoiseModel{}, SigmaMode::plugin);
        const auto system = DenseSystem::build(x.magnitude, x.phase, noise, x.psi_dense);
        const auto g = build_graph(d);
        const auto hp = HyperPriorSpec::standard();
        for (const auto& prior : {PriorStructure::make(PriorFamily::leroux, g, true), PriorStructure::make(PriorFamily::besag, g)}) {
            const auto full = hyperparameter_posterior(system, prior, hp, {GridStrategy::exhaustive, 25.0, true});
            const auto walk = hyperparameter_posterior(system, prior, hp, {GridStrategy::mode_walk, 25.0, false});
            double sum = 0.0;
            for (double w : full.weights) {
                CHECK(w >= 0.0);
                sum += w;
            }
            CHECK(std::abs(sum - 1.0) <= 1e-12);
            CHECK(full.evaluated == full.weights.size());
            CHECK(walk.evaluated < full.evaluated);
            CHECK(walk.tau_hat == doctest::Approx(full.tau_hat).epsilon(1e-8));
            CHECK(walk.lambda_hat == doctest::Approx(full.lambda_hat).epsilon(1e-8));
            for (std::size_t i = 0; i < d.size(); ++i) {
                CHECK(walk.mean[i] == doctest::Approx(full.mean[i]).epsilon(1e-8).scale(1e-8));
            }
            CHECK(full.sd.size() == d.size());
            CHECK(walk.sd.empty());
        }
    }

    TEST_CASE("small-image estimates: plumbing and determinism") {
        const GridDims d{6, 6, 6, 1.0};
        const Phantom ph = build_phantom(PhantomSpec::standard(d));
        const PhaseOperator psi(build_dipole_kernel(d, 1.0));
        const SmallImageContext ctx(psi, ph.tissue);
        const auto data = simulate_dataset(ph, psi, NoiseModel{}, 99);
        auto hp = HyperPriorSpec::standard();
        const std::size_t t = 5;
        const auto open = estimate_small_image(ctx, data, t, PriorChoice::besag, hp);
        const auto tissue = estimate_small_image(ctx, data, t, PriorChoice::besag_tissue, hp);
        CHECK(open.mean != tissue.mean);
        for (double v : tissue.mean) {
            CHECK(std::isfinite(v));
        }
        CHECK(ctx.prior(PriorChoice::besag_tissue).graph->restricted());
        CHECK_FALSE(ctx.prior(PriorChoice::leroux).graph->restricted());
        const auto a = estimate_small_image(ctx, data, t, PriorChoice::leroux, hp);
        const auto b = estimate_small_image(ctx, data, t, PriorChoice::leroux, hp);
        CHECK(a.mean == b.mean);
        CHECK(a.weights == b.weights);
        CHECK(a.lambda_hat > 0.0);
        CHECK(a.lambda_hat < 1.0);
        CHECK_THROWS_AS(estimate_small_image(ctx, data, 22, PriorChoice::leroux, hp), BoundsError);
    }
}
