#pragma once

// Data-parallel inner loops. `caq::kernels` holds the OpenMP versions used by the
// estimators; `caq::kernels::reference` holds plain serial loops with the same
// contracts, kept for the equivalence tests and the benchmark.
//
// Reductions are chunked with a fixed chunk size and summed in chunk order, so
// results do not depend on the thread count.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace caq::kernels {

inline constexpr std::size_t kReductionChunk = 4096;

double dot(std::span<const double> a, std::span<const double> b);
/// y += alpha * x
void axpy(double alpha, std::span<const double> x, std::span<double> y);
/// p = r + beta * p
void xpby(std::span<const double> r, double beta, std::span<double> p);
/// y = w .* x
void hadamard(std::span<const double> w, std::span<const double> x, std::span<double> y);

/// y = Q x for Q with the given diagonal and one shared off-diagonal value on every
/// edge of a CSR adjacency structure.
void precision_apply(std::span<const std::size_t> offsets, std::span<const std::size_t> adjacency,
                     std::span<const double> diagonal, double off_diagonal, std::span<const double> x,
                     std::span<double> y);

struct ClassErrorSums {
    std::vector<double> squared_error;  // indexed by label code
    std::vector<std::size_t> count;
};

/// Per-label sum of (estimate - truth)^2 and voxel counts for label codes < n_labels.
ClassErrorSums class_error_sums(std::span<const double> estimate, std::span<const double> truth,
                                std::span<const std::uint8_t> labels, std::size_t n_labels);

namespace reference {

double dot(std::span<const double> a, std::span<const double> b);
void axpy(double alpha, std::span<const double> x, std::span<double> y);
void xpby(std::span<const double> r, double beta, std::span<double> p);
void hadamard(std::span<const double> w, std::span<const double> x, std::span<double> y);
void precision_apply(std::span<const std::size_t> offsets, std::span<const std::size_t> adjacency,
                     std::span<const double> diagonal, double off_diagonal, std::span<const double> x,
                     std::span<double> y);
ClassErrorSums class_error_sums(std::span<const double> estimate, std::span<const double> truth,
                                std::span<const std::uint8_t> labels, std::size_t n_labels);

}  // namespace reference

/// Number of OpenMP threads available to the parallel kernels (1 without OpenMP).
int max_threads();
void set_threads(int n);

}  // namespace caq::kernels
