#pragma once

// Exact conjugate inference for small grids. The observation model and both CAR
// priors are jointly Gaussian, so posterior means, variances and the marginal
// likelihood of (tau, lambda) follow from dense Cholesky factorisations.

#include <cstddef>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "caq/estimators.hpp"

namespace caq {

/// Data part of the posterior precision, H = Sm^-1 + Psi^T Sphi^-1 Psi, with the
/// matching right-hand side and the Gaussian constants of the likelihood.
struct DenseSystem {
    Eigen::MatrixXd data_precision;
    Eigen::VectorXd rhs;
    double data_quadratic = 0.0;  // y' Sigma^-1 y
    double log_det_sigma = 0.0;   // log det Sigma over observed entries
    std::size_t observed = 0;     // entries of y with finite variance

    static DenseSystem build(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise,
                             const Eigen::MatrixXd& psi_dense);
    static DenseSystem build(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise,
                             const PhaseOperator& psi);
};

enum class PriorFamily { leroux, besag };

/// A CAR prior family on a fixed graph, with the structure-matrix spectrum cached
/// for log determinants.
/// With `intercept`, a Leroux field gets an additive global level under a flat prior, so
/// only deviations from the image mean are shrunk. The implied precision is
/// Q - tau (1 - lambda) 11'/N, singular along the constant vector.
struct PriorStructure {
    PriorFamily family = PriorFamily::leroux;
    GraphPtr graph;
    GraphSpectrum spectrum;
    bool intercept = false;

    static PriorStructure make(PriorFamily family, GraphPtr graph, bool intercept = false);
    /// The sparse part; excludes the intercept correction.
    [[nodiscard]] PrecisionOperator precision(double tau, double lambda) const;
    /// Adds the full prior precision (including any intercept correction) to a dense matrix.
    void add_to(Eigen::MatrixXd& m, double tau, double lambda) const;
    /// log det Q (Leroux) or the generalised log det over the non-null space.
    [[nodiscard]] double log_det(double tau, double lambda) const;
    /// Dimension of the null space: component count for Besag, 1 for Leroux with intercept, else 0.
    [[nodiscard]] std::size_t null_dimension() const noexcept;
};

struct Theta {
    double tau = 1.0;
    double lambda = 0.5;  // ignored for Besag
};

struct DensePosterior {
    Eigen::VectorXd mean;
    Eigen::VectorXd variance;
};

/// Posterior of c given y and theta. For the intrinsic prior the likelihood makes the
/// posterior proper; the constant direction carries a flat prior.
DensePosterior dense_posterior(const DenseSystem& system, const PriorStructure& prior, const Theta& theta);

/// Mean only, solving (H + Q) c = rhs densely. `q` may be null (no prior).
Eigen::VectorXd dense_solve(const DenseSystem& system, const PrecisionOperator* q);

/// log p(y | theta), integrating c out exactly.
double log_marginal_likelihood(const DenseSystem& system, const PriorStructure& prior, const Theta& theta);

/// Hyperpriors: Log-Gamma(shape, rate) on log(tau) and Logit-beta(a, b) on logit(lambda),
/// integrated over a tensor grid with trapezoid cell widths in those coordinates.
struct HyperPriorSpec {
    std::vector<double> tau_grid;
    std::vector<double> lambda_grid;
    double log_tau_shape = 1.0;
    double log_tau_rate = 5e-5;
    double lambda_a = 1.0;
    double lambda_b = 1.0;

    void validate() const;
    /// tau log-spaced 1e-3..1e3 (25 points), lambda 0.05..0.95 step 0.05.
    static HyperPriorSpec standard();
};

double log_tau_prior(double tau, const HyperPriorSpec& hp);
double logit_lambda_prior(double lambda, const HyperPriorSpec& hp);

enum class GridStrategy {
    exhaustive,  // every grid point
    mode_walk,   // climb to the mode, then expand while within `log_drop` of it
};

struct HyperOptions {
    GridStrategy strategy = GridStrategy::exhaustive;
    double log_drop = 25.0;
    bool compute_sd = false;
};

struct PosteriorSummary {
    std::vector<double> mean;
    std::vector<double> sd;                   // empty unless requested
    std::vector<double> weights;              // tau-major: index = t * n_lambda + l
    std::vector<double> log_posterior;        // NaN where not evaluated
    std::vector<double> tau_grid;
    std::vector<double> lambda_grid;          // {1} for Besag
    double tau_hat = 0.0;
    double lambda_hat = 0.0;
    std::size_t evaluated = 0;
    PriorFamily family = PriorFamily::leroux;
};

PosteriorSummary hyperparameter_posterior(const DenseSystem& system, const PriorStructure& prior,
                                          const HyperPriorSpec& hp, const HyperOptions& opts = {});

enum class PriorChoice { leroux, besag, besag_tissue };

const char* prior_choice_name(PriorChoice p);

/// Reusable pieces for repeated small-image fits on one grid and tissue layout.
class SmallImageContext {
public:
    SmallImageContext(const PhaseOperator& psi, const TissueMap& tissue);

    [[nodiscard]] const PhaseOperator& psi() const noexcept { return psi_; }
    [[nodiscard]] const Eigen::MatrixXd& psi_dense() const noexcept { return psi_dense_; }
    [[nodiscard]] const PriorStructure& prior(PriorChoice choice) const;

private:
    PhaseOperator psi_;
    Eigen::MatrixXd psi_dense_;
    PriorStructure leroux_;
    PriorStructure besag_;
    PriorStructure besag_tissue_;
};

PosteriorSummary estimate_small_image(const SmallImageContext& ctx, const SimulatedDataset& data,
                                      std::size_t time_index, PriorChoice prior, const HyperPriorSpec& hp,
                                      const HyperOptions& opts = {}, SigmaMode sigma = SigmaMode::plugin);

}  // namespace caq
