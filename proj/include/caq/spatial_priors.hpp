#pragma once

#include <cstddef>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "caq/grid.hpp"

namespace caq {

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// First-order (6-connected) voxel adjacency in CSR form.
class NeighborGraph {
public:
    NeighborGraph(std::size_t n, std::vector<std::size_t> offsets, std::vector<std::size_t> adjacency,
                  bool restricted);

    [[nodiscard]] std::size_t size() const noexcept { return n_; }
    [[nodiscard]] bool restricted() const noexcept { return restricted_; }
    [[nodiscard]] std::size_t degree(std::size_t i) const noexcept { return offsets_[i + 1] - offsets_[i]; }
    [[nodiscard]] std::span<const std::size_t> neighbors(std::size_t i) const noexcept {
        return std::span(adjacency_).subspan(offsets_[i], degree(i));
    }
    [[nodiscard]] std::span<const std::size_t> offsets() const noexcept { return offsets_; }
    [[nodiscard]] std::span<const std::size_t> adjacency() const noexcept { return adjacency_; }
    /// Undirected edge count.
    [[nodiscard]] std::size_t edge_count() const noexcept { return adjacency_.size() / 2; }
    [[nodiscard]] std::size_t component_count() const noexcept { return n_components_; }
    [[nodiscard]] std::span<const std::size_t> component_ids() const noexcept { return component_; }

private:
    std::size_t n_;
    std::vector<std::size_t> offsets_;
    std::vector<std::size_t> adjacency_;
    bool restricted_;
    std::vector<std::size_t> component_;
    std::size_t n_components_ = 0;
};

using GraphPtr = std::shared_ptr<const NeighborGraph>;

GraphPtr build_graph(const GridDims& dims, const TissueMap* tissue = nullptr, bool restrict_to_tissue = false);

/// Intrinsic CAR: Q = tau * (D - A). rho is fixed at 1.
struct BesagModel {
    GraphPtr graph;
    double tau = 1.0;
};

/// Proper CAR: Q = tau * ((1 - lambda) I + lambda (D - A)), 0 < lambda < 1.
struct LerouxModel {
    GraphPtr graph;
    double tau = 1.0;
    double lambda = 0.5;
};

/// Sparse symmetric precision: per-voxel diagonal plus one value shared by every edge.
class PrecisionOperator {
public:
    enum class Kind { zero, iid, besag, leroux };

    PrecisionOperator(Kind kind, GraphPtr graph, std::vector<double> diagonal, double off_diagonal, double tau,
                      double lambda);

    [[nodiscard]] Kind kind() const noexcept { return kind_; }
    [[nodiscard]] std::size_t size() const noexcept { return diagonal_.size(); }
    [[nodiscard]] const GraphPtr& graph() const noexcept { return graph_; }
    [[nodiscard]] std::span<const double> diagonal() const noexcept { return diagonal_; }
    [[nodiscard]] double off_diagonal() const noexcept { return off_diagonal_; }
    [[nodiscard]] double tau() const noexcept { return tau_; }
    [[nodiscard]] double lambda() const noexcept { return lambda_; }

    [[nodiscard]] double entry(std::size_t i, std::size_t j) const;
    void apply(std::span<const double> x, std::span<double> y) const;
    [[nodiscard]] Eigen::MatrixXd to_dense() const;
    /// Adds Q into a dense matrix of matching size.
    void add_to(Eigen::MatrixXd& m) const;

private:
    Kind kind_;
    GraphPtr graph_;
    std::vector<double> diagonal_;
    double off_diagonal_;
    double tau_;
    double lambda_;
};

PrecisionOperator besag_precision(const BesagModel& model);
PrecisionOperator leroux_precision(const LerouxModel& model);
/// The lambda = 0 endpoint: tau * I.
PrecisionOperator iid_precision(const GraphPtr& graph, double tau);
PrecisionOperator zero_precision(std::size_t n);

Volume q_matvec(const PrecisionOperator& q, const Volume& x);

struct FullConditional {
    double mean;
    double variance;
};

FullConditional full_conditional(const BesagModel& model, std::span<const double> c, std::size_t i);
FullConditional full_conditional(const LerouxModel& model, std::span<const double> c, std::size_t i);

/// Eigenvalues of the structure matrix R = D - A (ascending), from a dense solve.
struct GraphSpectrum {
    std::vector<double> eigenvalues;
    std::size_t zero_count = 0;  // = number of connected components
    Eigen::MatrixXd eigenvectors;  // empty unless requested
};

GraphSpectrum graph_spectrum(const NeighborGraph& graph, bool with_vectors = false);

/// log det of tau((1-lambda)I + lambda R).
double leroux_log_det(const GraphSpectrum& spectrum, double tau, double lambda);
/// Generalised log determinant of tau R over its non-null eigenspace.
double besag_log_pdet(const GraphSpectrum& spectrum, double tau);

/// Subtracts the per-component mean (sum-to-zero on every connected component).
void project_sum_to_zero(const NeighborGraph& graph, std::span<double> x);

/// Exact draws for small grids (dense factorisations).
std::vector<double> sample_leroux(const LerouxModel& model, std::mt19937_64& rng);
/// Draw from the intrinsic prior restricted to the sum-to-zero subspace.
std::vector<double> sample_besag(const BesagModel& model, const GraphSpectrum& spectrum_with_vectors,
                                 std::mt19937_64& rng);

}  // namespace caq
