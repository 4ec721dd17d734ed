#include "caq/oracle_checks.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <Eigen/Dense>

#include "caq/bayes.hpp"
#include "caq/estimators.hpp"
#include "caq/kernels.hpp"

namespace caq {
namespace {

using Clock = std::chrono::steady_clock;

CheckResult timed(const std::string& name, const std::function<std::pair<bool, std::string>()>& body) {
    const auto start = Clock::now();
    CheckResult r;
    r.name = name;
    try {
        auto [ok, detail] = body();
        r.passed = ok;
        r.detail = std::move(detail);
    } catch (const std::exception& e) {
        r.passed = false;
        r.detail = std::string("threw: ") + e.what();
    }
    r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
    return r;
}

std::string sci(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

Eigen::Map<const Eigen::VectorXd> as_vec(std::span<const double> v) {
    return {v.data(), static_cast<Eigen::Index>(v.size())};
}

double rel_err(const Eigen::VectorXd& a, const Eigen::VectorXd& ref) {
    const double denom = ref.norm();
    return denom == 0.0 ? (a - ref).norm() : (a - ref).norm() / denom;
}

std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) {
        x = u(rng);
    }
    return v;
}

struct Instance {
    Volume truth;
    Volume magnitude;
    Volume phase;
    ObservationNoise noise;
};

Instance random_instance(const PhaseOperator& psi, std::mt19937_64& rng) {
    const GridDims& d = psi.dims();
    Instance in;
    in.truth = Volume(d, random_vector(d.size(), rng, 0.0, 3.0));
    NoiseModel nm;
    nm.rsnr = std::uniform_real_distribution<double>(1.0, 5.0)(rng);
    in.magnitude = corrupt_magnitude(in.truth, nm, rng());
    in.phase = corrupt_phase(in.truth, psi, nm, rng());
    in.noise = ObservationNoise::from_model(in.magnitude, nm, SigmaMode::plugin);
    return in;
}

// Independent normal-equation assembly: H = [I; Psi] stacked, Sigma diagonal.
Eigen::VectorXd dense_mle(const Instance& in, const Eigen::MatrixXd& psi) {
    const auto n = static_cast<Eigen::Index>(in.truth.size());
    Eigen::VectorXd wm(n);
    Eigen::VectorXd wp(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        wm(i) = 1.0 / in.noise.var_m[static_cast<std::size_t>(i)];
        wp(i) = 1.0 / in.noise.var_phi[static_cast<std::size_t>(i)];
    }
    Eigen::MatrixXd a = psi.transpose() * wp.asDiagonal() * psi;
    a.diagonal() += wm;
    const Eigen::VectorXd b =
        wm.cwiseProduct(as_vec(in.magnitude.values())) + psi.transpose() * wp.cwiseProduct(as_vec(in.phase.values()));
    return a.ldlt().solve(b);
}

// Psi by direct DFT summation: Psi[r, s] = (1/N) sum_k G(k) cos(2 pi k . (r - s) / n).
Eigen::MatrixXd direct_psi(const DipoleKernel& kernel) {
    const GridDims& d = kernel.dims();
    const auto n = static_cast<Eigen::Index>(d.size());
    Eigen::MatrixXd psi = Eigen::MatrixXd::Zero(n, n);
    const double two_pi = 2.0 * std::numbers::pi;
    for (std::size_t r = 0; r < d.size(); ++r) {
        const Voxel vr = voxel_coords(r, d);
        for (std::size_t s = 0; s < d.size(); ++s) {
            const Voxel vs = voxel_coords(s, d);
            const double dx = static_cast<double>(vr.i) - static_cast<double>(vs.i);
            const double dy = static_cast<double>(vr.j) - static_cast<double>(vs.j);
            const double dz = static_cast<double>(vr.k) - static_cast<double>(vs.k);
            double acc = 0.0;
            for (std::size_t k = 0; k < d.nz; ++k) {
                for (std::size_t j = 0; j < d.ny; ++j) {
                    for (std::size_t i = 0; i < d.nx; ++i) {
                        const double phase = two_pi * (static_cast<double>(i) * dx / static_cast<double>(d.nx) +
                                                       static_cast<double>(j) * dy / static_cast<double>(d.ny) +
                                                       static_cast<double>(k) * dz / static_cast<double>(d.nz));
                        acc += kernel.at(i, j, k) * std::cos(phase);
                    }
                }
            }
            psi(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(s)) = acc / static_cast<double>(d.size());
        }
    }
    return psi;
}

}  // namespace

std::vector<CheckResult> estimator_oracle_checks(std::uint64_t seed, std::size_t instances) {
    std::vector<CheckResult> out;
    const GridDims dims{6, 6, 6, 1.0};
    const PhaseOperator psi(build_dipole_kernel(dims, 1.0));
    const Eigen::MatrixXd psi_dense = direct_psi(psi.kernel());
    const GraphPtr graph = build_graph(dims);
    const PriorStructure leroux = PriorStructure::make(PriorFamily::leroux, graph);
    const PriorStructure besag = PriorStructure::make(PriorFamily::besag, graph);
    CGOptions tight;
    tight.tolerance = 1e-12;

    std::mt19937_64 rng(seed);
    std::vector<Instance> cases;
    std::vector<Theta> thetas;
    for (std::size_t s = 0; s < instances; ++s) {
        cases.push_back(random_instance(psi, rng));
        const double tau = std::pow(10.0, std::uniform_real_distribution<double>(-2.0, 1.0)(rng));
        const double lambda = std::uniform_real_distribution<double>(0.1, 0.9)(rng);
        thetas.push_back({tau, lambda});
    }

    out.push_back(timed("map_estimate vs dense posterior mean (6x6x6)", [&] {
        double worst = 0.0;
        for (std::size_t s = 0; s < cases.size(); ++s) {
            const auto& in = cases[s];
            const PriorStructure& prior = s % 2 == 0 ? leroux : besag;
            const DenseSystem system = DenseSystem::build(in.magnitude, in.phase, in.noise, psi_dense);
            const DensePosterior post = dense_posterior(system, prior, thetas[s]);
            const Estimate e = map_estimate(in.magnitude, in.phase, in.noise, psi,
                                            prior.precision(thetas[s].tau, thetas[s].lambda), tight);
            worst = std::max(worst, rel_err(as_vec(e.c.values()), post.mean));
        }
        return std::pair{worst <= 1e-6, "max relative error " + sci(worst) + " over " +
                                             std::to_string(cases.size()) + " instances (limit 1e-6)"};
    }));

    out.push_back(timed("mle_estimate vs dense normal equations (6x6x6)", [&] {
        double worst = 0.0;
        for (const auto& in : cases) {
            const Estimate e = mle_estimate(in.magnitude, in.phase, in.noise, psi, tight);
            worst = std::max(worst, rel_err(as_vec(e.c.values()), dense_mle(in, psi_dense)));
        }
        return std::pair{worst <= 1e-8, "max relative error " + sci(worst) + " over " +
                                             std::to_string(cases.size()) + " instances (limit 1e-8)"};
    }));
    return out;
}

std::vector<CheckResult> operator_checks(std::uint64_t seed) {
    std::vector<CheckResult> out;
    std::mt19937_64 rng(seed);

    out.push_back(timed("FFT Psi vs direct DFT on every grid up to 4x4x4", [&] {
        double worst = 0.0;
        std::size_t grids = 0;
        for (std::size_t nz = 1; nz <= 4; ++nz) {
            for (std::size_t ny = 1; ny <= 4; ++ny) {
                for (std::size_t nx = 1; nx <= 4; ++nx) {
                    const GridDims d{nx, ny, nz, 1.0};
                    const PhaseOperator psi(build_dipole_kernel(d, 1.0));
                    const Eigen::MatrixXd ref = direct_psi(psi.kernel());
                    const Eigen::MatrixXd fft = dense_psi_matrix(psi);
                    const double scale = std::max(ref.norm(), 1.0);
                    worst = std::max(worst, (fft - ref).norm() / scale);
                    const auto c = random_vector(d.size(), rng);
                    std::vector<double> y(d.size());
                    psi.apply(c, y);
                    const Eigen::VectorXd expect = ref * as_vec(c);
                    const double denom = std::max(expect.norm(), as_vec(c).norm());
                    worst = std::max(worst, (as_vec(y) - expect).norm() / denom);
                    ++grids;
                }
            }
        }
        return std::pair{worst <= 1e-10,
                         "max relative error " + sci(worst) + " over " + std::to_string(grids) + " grids (limit 1e-10)"};
    }));

    out.push_back(timed("Psi self-adjoint on random pairs up to 16^3", [&] {
        double worst = 0.0;
        for (const GridDims& d : {GridDims{3, 5, 4, 1.0}, GridDims{8, 8, 8, 1.0}, GridDims{16, 12, 9, 1.0},
                                  GridDims{16, 16, 16, 1.0}}) {
            const PhaseOperator psi(build_dipole_kernel(d, 1.0));
            for (int rep = 0; rep < 3; ++rep) {
                const auto x = random_vector(d.size(), rng);
                const auto y = random_vector(d.size(), rng);
                std::vector<double> px(d.size());
                std::vector<double> py(d.size());
                psi.apply(x, px);
                psi.apply(y, py);
                const double gap = std::abs(as_vec(px).dot(as_vec(y)) - as_vec(x).dot(as_vec(py)));
                worst = std::max(worst, gap / (as_vec(x).norm() * as_vec(y).norm()));
            }
        }
        return std::pair{worst <= 1e-10, "max |<Psi x,y> - <x,Psi y>| / (|x||y|) = " + sci(worst) + " (limit 1e-10)"};
    }));

    out.push_back(timed("Psi annihilates constants", [&] {
        double worst = 0.0;
        for (const GridDims& d : {GridDims{4, 4, 4, 1.0}, GridDims{5, 3, 7, 1.0}, GridDims{16, 16, 16, 1.0},
                                  GridDims{64, 64, 64, 1.0}}) {
            const PhaseOperator psi(build_dipole_kernel(d, 1.0));
            const Volume y = psi.apply(Volume(d, 1.0));
            worst = std::max(worst, as_vec(y.values()).norm());
        }
        return std::pair{worst == 0.0, "max |Psi 1| = " + sci(worst) + " (must be exactly 0)"};
    }));

    out.push_back(timed("Psi linear", [&] {
        const GridDims d{8, 6, 5, 1.0};
        const PhaseOperator psi(build_dipole_kernel(d, 1.0));
        const auto x = random_vector(d.size(), rng);
        const auto y = random_vector(d.size(), rng);
        const double a = 1.7;
        const double b = -0.6;
        std::vector<double> mix(d.size());
        for (std::size_t i = 0; i < d.size(); ++i) {
            mix[i] = a * x[i] + b * y[i];
        }
        std::vector<double> px(d.size());
        std::vector<double> py(d.size());
        std::vector<double> pm(d.size());
        psi.apply(x, px);
        psi.apply(y, py);
        psi.apply(mix, pm);
        const Eigen::VectorXd combo = a * as_vec(px) + b * as_vec(py);
        const double err = rel_err(as_vec(pm), combo);
        return std::pair{err <= 1e-12, "relative error " + sci(err) + " (limit 1e-12)"};
    }));
    return out;
}

std::vector<CheckResult> property_checks(std::uint64_t seed) {
    std::vector<CheckResult> out;
    std::mt19937_64 rng(seed);
    const GridDims d10{10, 10, 10, 1.0};
    const GridDims d6{6, 6, 6, 1.0};
    const Phantom phantom = build_phantom(PhantomSpec::standard(d10));

    out.push_back(timed("Besag Q row sums vanish", [&] {
        double worst = 0.0;
        for (const GraphPtr& g : {build_graph(d10), build_graph(d10, &phantom.tissue, true)}) {
            const PrecisionOperator q = besag_precision({g, 2.5});
            std::vector<double> ones(g->size(), 1.0);
            std::vector<double> y(g->size());
            q.apply(ones, y);
            worst = std::max(worst, as_vec(y).cwiseAbs().maxCoeff());
        }
        return std::pair{worst == 0.0, "max |Q 1| = " + sci(worst) + " (open and tissue-restricted graphs)"};
    }));

    out.push_back(timed("Besag quadratic form invariant to constant shifts", [&] {
        const PrecisionOperator q = besag_precision({build_graph(d10), 1.3});
        double worst = 0.0;
        for (int rep = 0; rep < 10; ++rep) {
            auto x = random_vector(d10.size(), rng);
            std::vector<double> qx(x.size());
            q.apply(x, qx);
            const double base = as_vec(x).dot(as_vec(qx));
            const double alpha = std::uniform_real_distribution<double>(-5.0, 5.0)(rng);
            for (double& v : x) {
                v += alpha;
            }
            q.apply(x, qx);
            const double shifted = as_vec(x).dot(as_vec(qx));
            worst = std::max(worst, std::abs(shifted - base) / std::max(std::abs(base), 1.0));
        }
        return std::pair{worst <= 1e-10, "max relative change " + sci(worst) + " (limit 1e-10)"};
    }));

    out.push_back(timed("Leroux Q positive definite for lambda 0.1..0.9 (6x6x6)", [&] {
        const GraphPtr g = build_graph(d6);
        std::string failed;
        for (int i = 1; i <= 9; ++i) {
            const double lambda = 0.1 * i;
            const Eigen::MatrixXd q = leroux_precision({g, 1.0, lambda}).to_dense();
            if (Eigen::LLT<Eigen::MatrixXd>(q).info() != Eigen::Success) {
                failed += " " + std::to_string(lambda);
            }
        }
        return std::pair{failed.empty(), failed.empty() ? "Cholesky succeeded at all 9 values"
                                                        : "Cholesky failed at lambda" + failed};
    }));

    out.push_back(timed("full conditionals match precision entries (100 voxels)", [&] {
        const GraphPtr open = build_graph(d10);
        const GraphPtr restricted = build_graph(d10, &phantom.tissue, true);
        const auto c = random_vector(d10.size(), rng, -2.0, 2.0);
        std::uniform_int_distribution<std::size_t> pick(0, d10.size() - 1);
        double worst = 0.0;
        std::size_t checked = 0;
        while (checked < 100) {
            const std::size_t i = pick(rng);
            const bool use_besag = checked % 2 == 0;
            const GraphPtr& g = checked % 4 < 2 ? open : restricted;
            if (use_besag && g->degree(i) == 0) {
                continue;
            }
            const double tau = 0.7;
            const double lambda = 0.35;
            const PrecisionOperator q = use_besag ? besag_precision({g, tau}) : leroux_precision({g, tau, lambda});
            const FullConditional fc =
                use_besag ? full_conditional(BesagModel{g, tau}, c, i) : full_conditional(LerouxModel{g, tau, lambda}, c, i);
            const double qii = q.entry(i, i);
            double s = 0.0;
            for (std::size_t j : g->neighbors(i)) {
                s += q.entry(i, j) * c[j];
            }
            worst = std::max({worst, std::abs(fc.mean - (-s / qii)), std::abs(fc.variance - 1.0 / qii)});
            ++checked;
        }
        return std::pair{worst <= 1e-12, "max deviation " + sci(worst) + " (limit 1e-12)"};
    }));

    out.push_back(timed("CG vs dense solve on random SPD systems", [&] {
        double worst = 0.0;
        CGOptions opts;
        opts.tolerance = 1e-12;
        for (int n : {10, 50, 50, 50, 200}) {
            const Eigen::MatrixXd m = Eigen::MatrixXd::NullaryExpr(n, n, [&] {
                return std::normal_distribution<double>(0.0, 1.0)(rng);
            });
            const Eigen::MatrixXd a = m.transpose() * m + Eigen::MatrixXd::Identity(n, n);
            const auto b = random_vector(static_cast<std::size_t>(n), rng);
            const CGResult r = conjugate_gradient(
                [&](std::span<const double> x, std::span<double> y) {
                    Eigen::Map<Eigen::VectorXd>(y.data(), n) = a * as_vec(x);
                },
                b, opts);
            const Eigen::VectorXd ref = a.ldlt().solve(as_vec(b));
            worst = std::max(worst, rel_err(as_vec(r.x), ref));
        }
        return std::pair{worst <= 1e-8, "max relative error " + sci(worst) + " (limit 1e-8)"};
    }));

    out.push_back(timed("MAP objective gradient vs finite differences", [&] {
        const GridDims d{5, 4, 6, 1.0};
        const PhaseOperator psi(build_dipole_kernel(d, 1.0));
        const Instance in = random_instance(psi, rng);
        const PrecisionOperator q = leroux_precision({build_graph(d), 0.8, 0.6});
        double worst = 0.0;
        for (int rep = 0; rep < 3; ++rep) {
            auto c = random_vector(d.size(), rng, 0.0, 3.0);
            const auto grad = map_gradient(c, in.magnitude, in.phase, in.noise, psi, q);
            std::vector<double> fd(c.size());
            const double h = 1e-4;
            for (std::size_t i = 0; i < c.size(); ++i) {
                const double keep = c[i];
                c[i] = keep + h;
                const double fp = map_objective(c, in.magnitude, in.phase, in.noise, psi, q);
                c[i] = keep - h;
                const double fm = map_objective(c, in.magnitude, in.phase, in.noise, psi, q);
                c[i] = keep;
                fd[i] = (fp - fm) / (2.0 * h);
            }
            worst = std::max(worst, rel_err(as_vec(fd), as_vec(grad)));
        }
        return std::pair{worst <= 1e-5, "max relative error " + sci(worst) + " (limit 1e-5)"};
    }));

    out.push_back(timed("magnitude variance Monte Carlo", [&] {
        const GridDims d{100, 100, 40, 1.0};
        NoiseModel nm;
        double worst = 0.0;
        for (double level : {0.0, 1.0, 3.0}) {
            for (double rsnr : {1.0, 5.0}) {
                nm.rsnr = rsnr;
                const Volume cm = corrupt_magnitude(Volume(d, level), nm, rng());
                const auto v = cm.values();
                const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
                double ss = 0.0;
                for (double x : v) {
                    ss += (x - mean) * (x - mean);
                }
                const double var = ss / static_cast<double>(v.size() - 1);
                const double expect = nm.xi_variance * level * level + nm.sigma_m() * nm.sigma_m();
                worst = std::max(worst, std::abs(var / expect - 1.0));
            }
        }
        return std::pair{worst <= 0.02, "max relative deviation " + sci(worst) + " (limit 0.02)"};
    }));

    out.push_back(timed("log marginal likelihood vs direct Gaussian density (3x3x3)", [&] {
        const GridDims d{3, 3, 3, 1.0};
        const PhaseOperator psi(build_dipole_kernel(d, 1.0));
        const Eigen::MatrixXd psi_dense = direct_psi(psi.kernel());
        const auto n = static_cast<Eigen::Index>(d.size());
        const GraphPtr g = build_graph(d);
        const Instance in = random_instance(psi, rng);
        const DenseSystem system = DenseSystem::build(in.magnitude, in.phase, in.noise, psi_dense);

        Eigen::MatrixXd h(2 * n, n);
        h.topRows(n) = Eigen::MatrixXd::Identity(n, n);
        h.bottomRows(n) = psi_dense;
        Eigen::VectorXd sigma(2 * n);
        Eigen::VectorXd y(2 * n);
        for (Eigen::Index i = 0; i < n; ++i) {
            sigma(i) = in.noise.var_m[static_cast<std::size_t>(i)];
            sigma(n + i) = in.noise.var_phi[static_cast<std::size_t>(i)];
            y(i) = in.magnitude[static_cast<std::size_t>(i)];
            y(n + i) = in.phase[static_cast<std::size_t>(i)];
        }
        const double log2pi = std::log(2.0 * std::numbers::pi);
        auto gaussian = [&](const Eigen::MatrixXd& cov) {
            const Eigen::LLT<Eigen::MatrixXd> llt(cov);
            const double logdet = 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
            return -0.5 * static_cast<double>(2 * n) * log2pi - 0.5 * logdet - 0.5 * y.dot(llt.solve(y));
        };

        double worst = 0.0;
        const PriorStructure leroux = PriorStructure::make(PriorFamily::leroux, g);
        for (const Theta th : {Theta{0.5, 0.3}, Theta{3.0, 0.9}}) {
            const Eigen::MatrixXd qinv = leroux.precision(th.tau, th.lambda).to_dense().inverse();
            Eigen::MatrixXd cov = h * qinv * h.transpose();
            cov.diagonal() += sigma;
            worst = std::max(worst, std::abs(log_marginal_likelihood(system, leroux, th) - gaussian(cov)));
        }

        // Intrinsic prior: the constant direction has a flat prior. With prior variance kappa
        // on that direction, log p + log(2 pi kappa)/2 converges as kappa grows; the limit is
        // taken in closed form via the rank-one update of the covariance.
        const PriorStructure besag = PriorStructure::make(PriorFamily::besag, g);
        for (double tau : {0.2, 4.0}) {
            const Eigen::MatrixXd r = besag.precision(tau, 1.0).to_dense();
            const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(r);
            Eigen::VectorXd inv_eval = es.eigenvalues();
            for (Eigen::Index i = 0; i < n; ++i) {
                inv_eval(i) = inv_eval(i) > 1e-9 ? 1.0 / inv_eval(i) : 0.0;
            }
            const Eigen::MatrixXd pinv = es.eigenvectors() * inv_eval.asDiagonal() * es.eigenvectors().transpose();
            Eigen::MatrixXd c0 = h * pinv * h.transpose();
            c0.diagonal() += sigma;
            const Eigen::VectorXd v = h * Eigen::VectorXd::Constant(n, 1.0 / std::sqrt(static_cast<double>(n)));
            const Eigen::LLT<Eigen::MatrixXd> llt(c0);
            const Eigen::VectorXd c0v = llt.solve(v);
            const double a = v.dot(c0v);
            const double proj = c0v.dot(y);
            const double limit = gaussian(c0) - 0.5 * std::log(a) + 0.5 * proj * proj / a + 0.5 * log2pi;
            worst = std::max(worst, std::abs(log_marginal_likelihood(system, besag, {tau, 1.0}) - limit));
        }
        return std::pair{worst <= 1e-8, "max |log ML - direct| = " + sci(worst) + " (limit 1e-8)"};
    }));
    return out;
}

std::vector<CheckResult> run_oracle_checks(std::uint64_t seed) {
    std::vector<CheckResult> all = estimator_oracle_checks(seed);
    for (auto& r : operator_checks(seed + 1)) {
        all.push_back(std::move(r));
    }
    for (auto& r : property_checks(seed + 2)) {
        all.push_back(std::move(r));
    }
    return all;
}

}  // namespace caq
