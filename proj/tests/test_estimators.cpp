#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include <Eigen/Dense>

#include "caq/estimators.hpp"

using namespace caq;

namespace {

LinearOperator dense_op(const Eigen::MatrixXd& a) {
    return [a](std::span<const double> x, std::span<double> y) {
        Eigen::Map<Eigen::VectorXd>(y.data(), a.rows()) =
            a * Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
    };
}

struct Problem {
    GridDims dims;
    PhaseOperator psi;
    Volume truth;
    Volume magnitude;
    Volume phase;
    ObservationNoise noise;
};

Problem make_problem(const GridDims& d, std::uint64_t seed) {
    Problem p{d, PhaseOperator(build_dipole_kernel(d, 1.0)), {}, {}, {}, {}};
    std::mt19937_64 rng(seed);
    std::vector<double> c(d.size());
    for (double& v : c) {
        v = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
    }
    p.truth = Volume(d, c);
    NoiseModel nm;
    p.magnitude = corrupt_magnitude(p.truth, nm, seed + 1);
    p.phase = corrupt_phase(p.truth, p.psi, nm, seed + 2);
    p.noise = ObservationNoise::from_model(p.magnitude, nm, SigmaMode::plugin);
    return p;
}

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) {
        s += x * x;
    }
    return std::sqrt(s);
}

double rel_diff(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    return std::sqrt(s) / norm(b);
}

}  // namespace

TEST_SUITE("estimators") {
    TEST_CASE("CG on hand-sized systems") {
        const std::vector<double> b{3.0, -1.0, 2.0};
        const auto r = conjugate_gradient(dense_op(Eigen::MatrixXd::Identity(3, 3)), b, {});
        CHECK(r.iterations == 1);
        CHECK(r.x == b);

        Eigen::MatrixXd a(2, 2);
        a << 1, 0, 0, 2;
        const auto r2 = conjugate_gradient(dense_op(a), std::vector<double>{1.0, 2.0}, {});
        CHECK(r2.x[0] == doctest::Approx(1.0));
        CHECK(r2.x[1] == doctest::Approx(1.0));

        // zero right-hand side needs no work
        const auto r0 = conjugate_gradient(dense_op(a), std::vector<double>{0.0, 0.0}, {});
        CHECK(r0.x == std::vector<double>{0.0, 0.0});
    }

    TEST_CASE("CG reports indefiniteness and non-convergence") {
        Eigen::MatrixXd a(2, 2);
        a << 1, 0, 0, -1;
        CHECK_THROWS_AS(conjugate_gradient(dense_op(a), std::vector<double>{0.0, 1.0}, {}), CgError);
        try {
            conjugate_gradient(dense_op(a), std::vector<double>{0.0, 1.0}, {});
        } catch (const CgError& e) {
            CHECK(e.kind() == CgError::Kind::indefinite);
        }

        std::mt19937_64 rng(3);
        const Eigen::MatrixXd m = Eigen::MatrixXd::NullaryExpr(40, 40, [&] {
            return std::normal_distribution<double>(0.0, 1.0)(rng);
        });
        const Eigen::MatrixXd spd = m.transpose() * m + 1e-3 * Eigen::MatrixXd::Identity(40, 40);
        CGOptions few;
        few.max_iterations = 2;
        few.tolerance = 1e-14;
        try {
            conjugate_gradient(dense_op(spd), std::vector<double>(40, 1.0), few);
            FAIL("expected non-convergence");
        } catch (const CgError& e) {
            CHECK(e.kind() == CgError::Kind::not_converged);
            CHECK(e.best().x.size() == 40);
            CHECK(e.best().relative_residual > 1e-14);
        }
        CHECK_THROWS_AS(CGOptions({0, 1e-8, true}).validate(), ConfigError);
        CHECK_THROWS_AS(CGOptions({10, 0.0, true}).validate(), ConfigError);
    }

    TEST_CASE("CG with and without the Jacobi preconditioner reach the dense solution") {
        std::mt19937_64 rng(4);
        const Eigen::MatrixXd m = Eigen::MatrixXd::NullaryExpr(50, 50, [&] {
            return std::normal_distribution<double>(0.0, 1.0)(rng);
        });
        Eigen::MatrixXd a = m.transpose() * m + Eigen::MatrixXd::Identity(50, 50);
        a.diagonal() *= 5.0;
        std::vector<double> b(50);
        for (double& v : b) {
            v = std::normal_distribution<double>(0.0, 1.0)(rng);
        }
        const Eigen::VectorXd ref = a.ldlt().solve(Eigen::Map<const Eigen::VectorXd>(b.data(), 50));
        std::vector<double> inv(50);
        for (int i = 0; i < 50; ++i) {
            inv[static_cast<std::size_t>(i)] = 1.0 / a(i, i);
        }
        CGOptions opts;
        opts.tolerance = 1e-12;
        for (bool pre : {false, true}) {
            const auto r = pre ? conjugate_gradient(dense_op(a), b, opts, inv) : conjugate_gradient(dense_op(a), b, opts);
            CHECK(rel_diff(r.x, std::span<const double>(ref.data(), 50)) <= 1e-8);
            CHECK(r.relative_residual <= 1e-12);
        }
    }

    TEST_CASE("MLE with uninformative phase returns the magnitude data") {
        const auto p = make_problem(GridDims{5, 4, 3, 1.0}, 10);
        ObservationNoise noise = p.noise;
        noise.var_phi.assign(noise.var_phi.size(), std::numeric_limits<double>::infinity());
        const auto e = mle_estimate(p.magnitude, p.phase, noise, p.psi);
        for (std::size_t i = 0; i < p.dims.size(); ++i) {
            CHECK(e.c[i] == doctest::Approx(p.magnitude[i]).epsilon(1e-10));
        }
    }

    TEST_CASE("MLE on consistent noiseless data recovers the field") {
        const GridDims d{6, 6, 6, 1.0};
        const auto p = make_problem(d, 11);
        const Volume phase = p.psi.apply(p.truth);
        CGOptions opts;
        opts.tolerance = 1e-12;
        const auto e = mle_estimate(p.truth, phase, ObservationNoise::uniform(d.size(), 0.04, 0.01), p.psi, opts);
        CHECK(rel_diff(e.c.values(), p.truth.values()) <= 1e-10);
    }

    TEST_CASE("MLE matches dense normal equations on 4x4x4") {
        const GridDims d{4, 4, 4, 1.0};
        const auto p = make_problem(d, 12);
        const Eigen::MatrixXd psi = dense_psi_matrix(p.psi);
        const auto n = static_cast<Eigen::Index>(d.size());
        Eigen::VectorXd wm(n), wp(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            wm(i) = 1.0 / p.noise.var_m[static_cast<std::size_t>(i)];
            wp(i) = 1.0 / p.noise.var_phi[static_cast<std::size_t>(i)];
        }
        Eigen::MatrixXd a = psi.transpose() * wp.asDiagonal() * psi;
        a.diagonal() += wm;
        const Eigen::VectorXd rhs =
            wm.cwiseProduct(Eigen::Map<const Eigen::VectorXd>(p.magnitude.values().data(), n)) +
            psi.transpose() * wp.cwiseProduct(Eigen::Map<const Eigen::VectorXd>(p.phase.values().data(), n));
        const Eigen::VectorXd ref = a.ldlt().solve(rhs);
        CGOptions opts;
        opts.tolerance = 1e-12;
        const auto e = mle_estimate(p.magnitude, p.phase, p.noise, p.psi, opts);
        CHECK(rel_diff(e.c.values(), std::span<const double>(ref.data(), d.size())) <= 1e-8);
    }

    TEST_CASE("MAP with zero precision equals MLE") {
        const GridDims d{8, 7, 6, 1.0};
        const auto p = make_problem(d, 13);
        CGOptions opts;
        opts.tolerance = 1e-12;
        const auto mle = mle_estimate(p.magnitude, p.phase, p.noise, p.psi, opts);
        const auto map = map_estimate(p.magnitude, p.phase, p.noise, p.psi, zero_precision(d.size()), opts);
        CHECK(rel_diff(map.c.values(), mle.c.values()) <= 1e-12);
        CHECK(map.iterations == mle.iterations);
    }

    TEST_CASE("tau ladder interpolates between MLE and zero") {
        const GridDims d{8, 8, 8, 1.0};
        const auto p = make_problem(d, 14);
        const auto g = build_graph(d);
        CGOptions opts;
        opts.tolerance = 1e-10;
        const auto mle = mle_estimate(p.magnitude, p.phase, p.noise, p.psi, opts);
        double previous = std::numeric_limits<double>::infinity();
        for (double tau : {1e-8, 1e-3, 1e-1, 1.0, 10.0, 1e3, 1e8}) {
            const auto e = map_estimate(p.magnitude, p.phase, p.noise, p.psi, leroux_precision({g, tau, 0.5}), opts);
            const double n = norm(e.c.values());
            CHECK(n <= previous * (1.0 + 1e-9));
            previous = n;
            if (tau == 1e-8) {
                CHECK(rel_diff(e.c.values(), mle.c.values()) <= 1e-6);
            }
            if (tau == 1e8) {
                CHECK(n / norm(mle.c.values()) <= 1e-6);
            }
        }
        // lambda near zero and huge tau: total shrinkage to the prior mean
        const auto e = map_estimate(p.magnitude, p.phase, p.noise, p.psi, leroux_precision({g, 1e9, 1e-6}), opts);
        CHECK(norm(e.c.values()) / norm(mle.c.values()) <= 1e-6);
    }

    TEST_CASE("MAP objective and closed-form gradient") {
        const GridDims d{4, 5, 3, 1.0};
        const auto p = make_problem(d, 15);
        const auto q = besag_precision({build_graph(d), 0.6});
        // at the minimiser the gradient vanishes
        CGOptions opts;
        opts.tolerance = 1e-13;
        const auto e = map_estimate(p.magnitude, p.phase, p.noise, p.psi, q, opts);
        const auto g0 = map_gradient(e.c.values(), p.magnitude, p.phase, p.noise, p.psi, q);
        const auto g1 = map_gradient(p.truth.values(), p.magnitude, p.phase, p.noise, p.psi, q);
        CHECK(norm(g0) <= 1e-8 * norm(g1));
        // the objective is quadratic, so f(c + h) - f(c) = g.h + h'Ah with A = half the Hessian
        std::vector<double> h(d.size(), 0.0);
        h[7] = 0.3;
        std::vector<double> ch(p.truth.values().begin(), p.truth.values().end());
        ch[7] += 0.3;
        const double f0 = map_objective(p.truth.values(), p.magnitude, p.phase, p.noise, p.psi, q);
        const double f1 = map_objective(ch, p.magnitude, p.phase, p.noise, p.psi, q);
        std::vector<double> e7(d.size(), 0.0);
        e7[7] = 1.0;
        const Volume pe = p.psi.apply(Volume(d, e7));
        double a77 = 1.0 / p.noise.var_m[7] + q.entry(7, 7);
        for (std::size_t i = 0; i < d.size(); ++i) {
            a77 += pe[i] * pe[i] / p.noise.var_phi[i];
        }
        CHECK(f1 - f0 == doctest::Approx(g1[7] * 0.3 + a77 * 0.09).epsilon(1e-9));
    }

    TEST_CASE("observation noise from the model") {
        const GridDims d{3, 1, 1, 1.0};
        const Volume cm(d, std::vector<double>{0.0, 1.0, -2.0});
        const Volume truth(d, std::vector<double>{1.0, 1.0, 1.0});
        NoiseModel nm;
        nm.rsnr = 2.0;
        const auto plug = ObservationNoise::from_model(cm, nm, SigmaMode::plugin);
        CHECK(plug.var_m[0] == doctest::Approx(0.25));
        CHECK(plug.var_m[1] == doctest::Approx(0.34));
        CHECK(plug.var_m[2] == doctest::Approx(0.61));
        CHECK(plug.var_phi[0] == doctest::Approx(0.0625));
        const auto tr = ObservationNoise::from_model(cm, nm, SigmaMode::truth, &truth);
        for (double v : tr.var_m) {
            CHECK(v == doctest::Approx(0.34));
        }
        const auto pooled = ObservationNoise::from_model(cm, nm, SigmaMode::pooled);
        CHECK(pooled.var_m[0] == doctest::Approx((0.25 + 0.34 + 0.61) / 3.0));
        CHECK(pooled.var_m[2] == pooled.var_m[0]);
        CHECK_THROWS_AS(ObservationNoise::from_model(cm, nm, SigmaMode::truth), ConfigError);
        CHECK_THROWS(ObservationNoise::uniform(3, 0.0, 1.0).validate(3));
        CHECK_THROWS(ObservationNoise::uniform(3, 1.0, 1.0).validate(4));
    }
}
