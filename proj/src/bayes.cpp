#include "caq/bayes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <stdexcept>
#include <utility>

namespace caq {
namespace {

const double kLog2Pi = std::log(2.0 * std::numbers::pi);

double inverse_or_zero(double variance) { return std::isinf(variance) ? 0.0 : 1.0 / variance; }

struct PointEval {
    double log_ml = 0.0;
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
};

PointEval evaluate_point(const DenseSystem& system, const PriorStructure& prior, const Theta& theta,
                         bool want_variance) {
    Eigen::MatrixXd post = system.data_precision;
    prior.add_to(post, theta.tau, theta.lambda);
    Eigen::LLT<Eigen::Ref<Eigen::MatrixXd>> llt(post);
    if (llt.info() != Eigen::Success) {
        throw std::runtime_error("posterior precision is not positive definite (tau=" + std::to_string(theta.tau) +
                                 ", lambda=" + std::to_string(theta.lambda) + ")");
    }
    PointEval out;
    out.mean = llt.solve(system.rhs);
    const double log_det_post = 2.0 * post.diagonal().array().log().sum();
    out.log_ml = -0.5 * static_cast<double>(system.observed) * kLog2Pi - 0.5 * system.log_det_sigma -
                 0.5 * system.data_quadratic + 0.5 * prior.log_det(theta.tau, theta.lambda) +
                 0.5 * static_cast<double>(prior.null_dimension()) * kLog2Pi - 0.5 * log_det_post +
                 0.5 * out.mean.dot(system.rhs);
    if (want_variance) {
        const auto n = post.rows();
        Eigen::MatrixXd linv = Eigen::MatrixXd::Identity(n, n);
        post.triangularView<Eigen::Lower>().solveInPlace(linv);
        out.variance = linv.colwise().squaredNorm().transpose();
    }
    return out;
}

void check_dense_size(std::size_t n) {
    if (n > kMaxDenseVoxels) {
        throw ConfigError("dense inference refused for " + std::to_string(n) + " voxels (limit " +
                          std::to_string(kMaxDenseVoxels) + ")");
    }
}

/// Trapezoid cell widths of sorted nodes.
std::vector<double> cell_widths(const std::vector<double>& u) {
    std::vector<double> w(u.size(), 1.0);
    if (u.size() < 2) {
        return w;
    }
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double lo = i == 0 ? u[0] : u[i - 1];
        const double hi = i + 1 == u.size() ? u[i] : u[i + 1];
        w[i] = 0.5 * (hi - lo);
    }
    return w;
}

}  // namespace

DenseSystem DenseSystem::build(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise,
                               const Eigen::MatrixXd& psi_dense) {
    const std::size_t n = magnitude.size();
    check_dense_size(n);
    noise.validate(n);
    if (phase.size() != n || static_cast<std::size_t>(psi_dense.rows()) != n ||
        static_cast<std::size_t>(psi_dense.cols()) != n) {
        throw ConfigError("dense system: size mismatch");
    }
    const auto ni = static_cast<Eigen::Index>(n);
    Eigen::VectorXd w_m(ni);
    Eigen::VectorXd w_phi(ni);
    DenseSystem s;
    for (std::size_t i = 0; i < n; ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        w_m(ii) = inverse_or_zero(noise.var_m[i]);
        w_phi(ii) = inverse_or_zero(noise.var_phi[i]);
        for (double v : {noise.var_m[i], noise.var_phi[i]}) {
            if (!std::isinf(v)) {
                s.log_det_sigma += std::log(v);
                ++s.observed;
            }
        }
        s.data_quadratic += w_m(ii) * magnitude[i] * magnitude[i] + w_phi(ii) * phase[i] * phase[i];
    }
    s.data_precision = Eigen::MatrixXd::Zero(ni, ni);
    if (noise.uniform_phase()) {
        s.data_precision.selfadjointView<Eigen::Lower>().rankUpdate(psi_dense.transpose(), w_phi(0));
    } else {
        const Eigen::MatrixXd scaled = psi_dense.transpose() * w_phi.cwiseSqrt().asDiagonal();
        s.data_precision.selfadjointView<Eigen::Lower>().rankUpdate(scaled, 1.0);
    }
    s.data_precision.triangularView<Eigen::StrictlyUpper>() = s.data_precision.transpose();
    s.data_precision.diagonal() += w_m;

    const Eigen::Map<const Eigen::VectorXd> cm(magnitude.values().data(), ni);
    const Eigen::Map<const Eigen::VectorXd> dphi(phase.values().data(), ni);
    s.rhs = w_m.cwiseProduct(cm) + psi_dense.transpose() * w_phi.cwiseProduct(dphi);
    return s;
}

DenseSystem DenseSystem::build(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise,
                               const PhaseOperator& psi) {
    return build(magnitude, phase, noise, dense_psi_matrix(psi));
}

PriorStructure PriorStructure::make(PriorFamily family, GraphPtr graph, bool intercept) {
    if (!graph) {
        throw ConfigError("prior structure needs a graph");
    }
    check_dense_size(graph->size());
    PriorStructure p;
    p.family = family;
    p.intercept = intercept && family == PriorFamily::leroux;
    p.spectrum = graph_spectrum(*graph);
    p.graph = std::move(graph);
    return p;
}

PrecisionOperator PriorStructure::precision(double tau, double lambda) const {
    if (family == PriorFamily::besag) {
        return besag_precision({graph, tau});
    }
    return leroux_precision({graph, tau, lambda});
}

void PriorStructure::add_to(Eigen::MatrixXd& m, double tau, double lambda) const {
    precision(tau, lambda).add_to(m);
    if (intercept) {
        m.array() -= tau * (1.0 - lambda) / static_cast<double>(m.rows());
    }
}

double PriorStructure::log_det(double tau, double lambda) const {
    if (family == PriorFamily::besag) {
        return besag_log_pdet(spectrum, tau);
    }
    // The constant vector has eigenvalue tau (1 - lambda) without the intercept and 0 with it.
    return leroux_log_det(spectrum, tau, lambda) - (intercept ? std::log(tau * (1.0 - lambda)) : 0.0);
}

std::size_t PriorStructure::null_dimension() const noexcept {
    if (family == PriorFamily::besag) {
        return spectrum.zero_count;
    }
    return intercept ? 1 : 0;
}

DensePosterior dense_posterior(const DenseSystem& system, const PriorStructure& prior, const Theta& theta) {
    PointEval e = evaluate_point(system, prior, theta, true);
    return {std::move(e.mean), std::move(e.variance)};
}

Eigen::VectorXd dense_solve(const DenseSystem& system, const PrecisionOperator* q) {
    Eigen::MatrixXd a = system.data_precision;
    if (q != nullptr) {
        q->add_to(a);
    }
    Eigen::LLT<Eigen::Ref<Eigen::MatrixXd>> llt(a);
    if (llt.info() != Eigen::Success) {
        throw std::runtime_error("dense normal equations are not positive definite");
    }
    return llt.solve(system.rhs);
}

double log_marginal_likelihood(const DenseSystem& system, const PriorStructure& prior, const Theta& theta) {
    return evaluate_point(system, prior, theta, false).log_ml;
}

void HyperPriorSpec::validate() const {
    if (tau_grid.empty() || lambda_grid.empty()) {
        throw ConfigError("hyperparameter grid is empty");
    }
    for (std::size_t i = 0; i < tau_grid.size(); ++i) {
        if (!(tau_grid[i] > 0.0) || !std::isfinite(tau_grid[i]) || (i > 0 && !(tau_grid[i] > tau_grid[i - 1]))) {
            throw ConfigError("tau grid must be positive, finite and strictly increasing");
        }
    }
    for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
        if (!(lambda_grid[i] > 0.0 && lambda_grid[i] < 1.0) || (i > 0 && !(lambda_grid[i] > lambda_grid[i - 1]))) {
            throw ConfigError("lambda grid must lie in (0, 1) and be strictly increasing");
        }
    }
    if (!(log_tau_shape > 0.0) || !(log_tau_rate > 0.0) || !(lambda_a > 0.0) || !(lambda_b > 0.0)) {
        throw ConfigError("hyperprior parameters must be positive");
    }
}

HyperPriorSpec HyperPriorSpec::standard() {
    HyperPriorSpec hp;
    for (int i = 0; i < 25; ++i) {
        hp.tau_grid.push_back(std::pow(10.0, -3.0 + 6.0 * i / 24.0));
    }
    for (int i = 1; i <= 19; ++i) {
        hp.lambda_grid.push_back(0.05 * i);
    }
    return hp;
}

double log_tau_prior(double tau, const HyperPriorSpec& hp) {
    // Density of log(tau) when tau ~ Gamma(shape, rate).
    const double a = hp.log_tau_shape;
    const double b = hp.log_tau_rate;
    return a * std::log(b) - std::lgamma(a) + a * std::log(tau) - b * tau;
}

double logit_lambda_prior(double lambda, const HyperPriorSpec& hp) {
    // Density of logit(lambda) when lambda ~ Beta(a, b).
    const double a = hp.lambda_a;
    const double b = hp.lambda_b;
    return std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(lambda) + b * std::log1p(-lambda);
}

PosteriorSummary hyperparameter_posterior(const DenseSystem& system, const PriorStructure& prior,
                                          const HyperPriorSpec& hp, const HyperOptions& opts) {
    hp.validate();
    const bool besag = prior.family == PriorFamily::besag;
    PosteriorSummary out;
    out.family = prior.family;
    out.tau_grid = hp.tau_grid;
    out.lambda_grid = besag ? std::vector<double>{1.0} : hp.lambda_grid;
    const std::size_t nt = out.tau_grid.size();
    const std::size_t nl = out.lambda_grid.size();

    std::vector<double> log_tau(nt);
    std::transform(out.tau_grid.begin(), out.tau_grid.end(), log_tau.begin(), [](double t) { return std::log(t); });
    std::vector<double> logit_lambda(nl);
    std::transform(out.lambda_grid.begin(), out.lambda_grid.end(), logit_lambda.begin(),
                   [](double l) { return l < 1.0 ? std::log(l / (1.0 - l)) : 0.0; });
    const auto tau_width = cell_widths(log_tau);
    const auto lambda_width = cell_widths(logit_lambda);

    const double nan = std::numeric_limits<double>::quiet_NaN();
    out.log_posterior.assign(nt * nl, nan);
    std::vector<PointEval> evals(nt * nl);

    auto log_prior = [&](std::size_t ti, std::size_t li) {
        double lp = log_tau_prior(out.tau_grid[ti], hp) + std::log(tau_width[ti]);
        if (!besag) {
            lp += logit_lambda_prior(out.lambda_grid[li], hp) + std::log(lambda_width[li]);
        }
        return lp;
    };

    // Evaluates every not-yet-evaluated cell in `batch`; independent, so order-free.
    auto evaluate_batch = [&](std::vector<std::size_t> batch) {
        std::sort(batch.begin(), batch.end());
        batch.erase(std::unique(batch.begin(), batch.end()), batch.end());
        std::erase_if(batch, [&](std::size_t c) { return !std::isnan(out.log_posterior[c]); });
#pragma omp parallel for schedule(dynamic)
        for (std::ptrdiff_t b = 0; b < static_cast<std::ptrdiff_t>(batch.size()); ++b) {
            const std::size_t cell = batch[static_cast<std::size_t>(b)];
            const std::size_t ti = cell / nl;
            const std::size_t li = cell % nl;
            evals[cell] = evaluate_point(system, prior, {out.tau_grid[ti], out.lambda_grid[li]}, opts.compute_sd);
            out.log_posterior[cell] = evals[cell].log_ml + log_prior(ti, li);
        }
        return batch;
    };

    if (opts.strategy == GridStrategy::exhaustive) {
        std::vector<std::size_t> all(nt * nl);
        for (std::size_t c = 0; c < all.size(); ++c) {
            all[c] = c;
        }
        evaluate_batch(all);
    } else {
        auto cell_of = [&](std::ptrdiff_t ti, std::ptrdiff_t li) -> std::optional<std::size_t> {
            if (ti < 0 || li < 0 || ti >= static_cast<std::ptrdiff_t>(nt) || li >= static_cast<std::ptrdiff_t>(nl)) {
                return std::nullopt;
            }
            return static_cast<std::size_t>(ti) * nl + static_cast<std::size_t>(li);
        };
        auto ring = [&](std::size_t cell, std::ptrdiff_t st, std::ptrdiff_t sl) {
            std::vector<std::size_t> out_cells;
            const auto ti = static_cast<std::ptrdiff_t>(cell / nl);
            const auto li = static_cast<std::ptrdiff_t>(cell % nl);
            for (std::ptrdiff_t dt = -1; dt <= 1; ++dt) {
                for (std::ptrdiff_t dl = -1; dl <= 1; ++dl) {
                    if (auto c = cell_of(ti + dt * st, li + dl * sl); c && *c != cell) {
                        out_cells.push_back(*c);
                    }
                }
            }
            return out_cells;
        };

        // Coarse-to-fine hill climb.
        std::size_t current = (nt / 2) * nl + nl / 2;
        evaluate_batch({current});
        std::ptrdiff_t st = std::max<std::ptrdiff_t>(1, static_cast<std::ptrdiff_t>(nt) / 4);
        std::ptrdiff_t sl = std::max<std::ptrdiff_t>(1, static_cast<std::ptrdiff_t>(nl) / 4);
        while (true) {
            const auto around = ring(current, st, sl);
            evaluate_batch(around);
            std::size_t best = current;
            for (std::size_t c : around) {
                if (out.log_posterior[c] > out.log_posterior[best]) {
                    best = c;
                }
            }
            if (best != current) {
                current = best;
                continue;
            }
            if (st == 1 && sl == 1) {
                break;
            }
            st = std::max<std::ptrdiff_t>(1, st / 2);
            sl = std::max<std::ptrdiff_t>(1, sl / 2);
        }

        // Expand from every cell within log_drop of the best value seen.
        auto best_value = [&] {
            double m = -std::numeric_limits<double>::infinity();
            for (double v : out.log_posterior) {
                if (!std::isnan(v)) {
                    m = std::max(m, v);
                }
            }
            return m;
        };
        std::set<std::size_t> expanded;
        while (true) {
            const double threshold = best_value() - opts.log_drop;
            bool grew = false;
            std::vector<std::size_t> frontier;
            for (std::size_t c = 0; c < nt * nl; ++c) {
                if (!std::isnan(out.log_posterior[c]) && out.log_posterior[c] >= threshold && !expanded.contains(c)) {
                    expanded.insert(c);
                    grew = true;
                    for (std::size_t nb : ring(c, 1, 1)) {
                        frontier.push_back(nb);
                    }
                }
            }
            if (!grew) {
                break;
            }
            evaluate_batch(std::move(frontier));
        }
    }

    double max_lp = -std::numeric_limits<double>::infinity();
    for (double v : out.log_posterior) {
        if (!std::isnan(v)) {
            max_lp = std::max(max_lp, v);
        }
    }
    if (!std::isfinite(max_lp)) {
        throw std::runtime_error("hyperparameter posterior is degenerate (no finite log density)");
    }
    out.weights.assign(nt * nl, 0.0);
    double total = 0.0;
    for (std::size_t c = 0; c < nt * nl; ++c) {
        if (!std::isnan(out.log_posterior[c])) {
            out.weights[c] = std::exp(out.log_posterior[c] - max_lp);
            total += out.weights[c];
            ++out.evaluated;
        }
    }
    const auto n = static_cast<Eigen::Index>(system.rhs.size());
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd second = Eigen::VectorXd::Zero(n);
    for (std::size_t c = 0; c < nt * nl; ++c) {
        if (out.weights[c] == 0.0) {
            continue;
        }
        out.weights[c] /= total;
        const double w = out.weights[c];
        mean += w * evals[c].mean;
        if (opts.compute_sd) {
            second += w * (evals[c].variance + evals[c].mean.cwiseAbs2());
        }
        out.tau_hat += w * out.tau_grid[c / nl];
        out.lambda_hat += w * out.lambda_grid[c % nl];
    }
    out.mean.assign(mean.data(), mean.data() + n);
    if (opts.compute_sd) {
        out.sd.resize(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            out.sd[static_cast<std::size_t>(i)] = std::sqrt(std::max(0.0, second(i) - mean(i) * mean(i)));
        }
    }
    return out;
}

const char* prior_choice_name(PriorChoice p) {
    switch (p) {
        case PriorChoice::leroux: return "leroux";
        case PriorChoice::besag: return "besag";
        case PriorChoice::besag_tissue: return "besag-tissue";
    }
    return "?";
}

SmallImageContext::SmallImageContext(const PhaseOperator& psi, const TissueMap& tissue)
    : psi_(psi), psi_dense_(dense_psi_matrix(psi)) {
    if (!(tissue.dims() == psi.dims())) {
        throw ConfigError("tissue map dims do not match the phase operator");
    }
    auto open = build_graph(psi.dims());
    leroux_ = PriorStructure::make(PriorFamily::leroux, open, true);
    besag_ = leroux_;
    besag_.family = PriorFamily::besag;
    besag_.intercept = false;
    besag_tissue_ = PriorStructure::make(PriorFamily::besag, build_graph(psi.dims(), &tissue, true));
}

const PriorStructure& SmallImageContext::prior(PriorChoice choice) const {
    switch (choice) {
        case PriorChoice::leroux: return leroux_;
        case PriorChoice::besag: return besag_;
        case PriorChoice::besag_tissue: return besag_tissue_;
    }
    throw ConfigError("unknown prior choice");
}

PosteriorSummary estimate_small_image(const SmallImageContext& ctx, const SimulatedDataset& data,
                                      std::size_t time_index, PriorChoice prior, const HyperPriorSpec& hp,
                                      const HyperOptions& opts, SigmaMode sigma) {
    if (time_index >= data.magnitude.size()) {
        throw BoundsError("time index out of range");
    }
    const auto noise = ObservationNoise::from_model(data.magnitude[time_index], data.noise, sigma,
                                                    &data.truth[time_index]);
    const auto system = DenseSystem::build(data.magnitude[time_index], data.phase[time_index], noise, ctx.psi_dense());
    return hyperparameter_posterior(system, ctx.prior(prior), hp, opts);
}

}  // namespace caq
