#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "caq/grid.hpp"
#include "caq/phantom.hpp"
#include "caq/phase_model.hpp"
#include "caq/spatial_priors.hpp"

namespace caq {

/// How the magnitude variance is approximated from simulated data.
enum class SigmaMode {
    plugin,  // xi_var * c_m^2 + sigma_m^2, using the observation itself
    truth,   // xi_var * c^2 + sigma_m^2, using the true field (oracle studies)
    pooled,  // plugin variances averaged over the image, one scalar per frame
};

/// Diagonal observation covariances Sigma_m, Sigma_phi (per-voxel variances).
/// An infinite variance marks an uninformative observation.
struct ObservationNoise {
    std::vector<double> var_m;
    std::vector<double> var_phi;

    void validate(std::size_t n) const;
    [[nodiscard]] bool uniform_phase() const noexcept;

    static ObservationNoise uniform(std::size_t n, double var_m, double var_phi);
    static ObservationNoise from_model(const Volume& magnitude, const NoiseModel& noise, SigmaMode mode,
                                       const Volume* truth = nullptr);
};

struct CGOptions {
    std::size_t max_iterations = 5000;
    double tolerance = 1e-8;
    bool precondition = true;

    void validate() const;
};

struct CGResult {
    std::vector<double> x;
    std::size_t iterations = 0;
    double relative_residual = 0.0;
};

class CgError : public std::runtime_error {
public:
    enum class Kind { indefinite, not_converged };

    CgError(Kind kind, const std::string& what, CGResult best)
        : std::runtime_error(what), kind_(kind), best_(std::move(best)) {}
    [[nodiscard]] Kind kind() const noexcept { return kind_; }
    [[nodiscard]] const CGResult& best() const noexcept { return best_; }

private:
    Kind kind_;
    CGResult best_;
};

using LinearOperator = std::function<void(std::span<const double>, std::span<double>)>;

/// Solves A x = b for symmetric positive definite A, starting from zero.
/// Stops when the true residual satisfies |b - A x| <= tolerance |b|.
/// `inverse_diagonal`, when non-empty, is a Jacobi preconditioner.
CGResult conjugate_gradient(const LinearOperator& apply_a, std::span<const double> b, const CGOptions& opts,
                            std::span<const double> inverse_diagonal = {});

struct Estimate {
    Volume c;
    std::size_t iterations = 0;
    double relative_residual = 0.0;
};

/// argmin (c_m - c)' Sm^-1 (c_m - c) + (dphi - Psi c)' Sphi^-1 (dphi - Psi c)
Estimate mle_estimate(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise,
                      const PhaseOperator& psi, const CGOptions& opts = {});

/// Same objective plus c' Q c; the posterior mean under a Gaussian prior with precision Q.
Estimate map_estimate(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise,
                      const PhaseOperator& psi, const PrecisionOperator& q, const CGOptions& opts = {});

/// Value and gradient of the MAP objective. Used for finite-difference checks.
double map_objective(std::span<const double> c, const Volume& magnitude, const Volume& phase,
                     const ObservationNoise& noise, const PhaseOperator& psi, const PrecisionOperator& q);
std::vector<double> map_gradient(std::span<const double> c, const Volume& magnitude, const Volume& phase,
                                 const ObservationNoise& noise, const PhaseOperator& psi,
                                 const PrecisionOperator& q);

}  // namespace caq
