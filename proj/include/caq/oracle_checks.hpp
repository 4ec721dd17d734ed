#pragma once

// Dense-oracle equivalence and property suites. Each check compares a production
// path (FFT, CG, sparse precision) against an independent dense computation.

#include <cstdint>
#include <string>
#include <vector>

namespace caq {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
    double seconds = 0.0;
};

/// MAP (CG + FFT) vs dense posterior mean, MLE vs dense normal equations, on random 6x6x6 instances.
std::vector<CheckResult> estimator_oracle_checks(std::uint64_t seed, std::size_t instances = 20);
/// FFT Psi vs direct DFT summation on every grid up to 4x4x4, self-adjointness, null space.
std::vector<CheckResult> operator_checks(std::uint64_t seed);
/// Precision structure, full conditionals, CG, gradient, magnitude variance, marginal likelihood.
std::vector<CheckResult> property_checks(std::uint64_t seed);

std::vector<CheckResult> run_oracle_checks(std::uint64_t seed);

}  // namespace caq
