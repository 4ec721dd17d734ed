#include "caq/spatial_priors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "caq/kernels.hpp"
#include "caq/phase_model.hpp"

namespace caq {
namespace {

std::size_t find_root(std::vector<std::size_t>& parent, std::size_t x) {
    while (parent[x] != x) {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    return x;
}

void check_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) {
        throw DomainError("precision tau must be positive and finite");
    }
}

void check_dense(std::size_t n) {
    if (n > kMaxDenseVoxels) {
        throw ConfigError("dense prior computation refused for " + std::to_string(n) + " voxels");
    }
}

}  // namespace

NeighborGraph::NeighborGraph(std::size_t n, std::vector<std::size_t> offsets, std::vector<std::size_t> adjacency,
                             bool restricted)
    : n_(n), offsets_(std::move(offsets)), adjacency_(std::move(adjacency)), restricted_(restricted) {
    if (offsets_.size() != n_ + 1 || offsets_.back() != adjacency_.size()) {
        throw ConfigError("malformed adjacency structure");
    }
    std::vector<std::size_t> parent(n_);
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    for (std::size_t i = 0; i < n_; ++i) {
        for (std::size_t j : neighbors(i)) {
            const auto a = find_root(parent, i);
            const auto b = find_root(parent, j);
            if (a != b) {
                parent[std::max(a, b)] = std::min(a, b);
            }
        }
    }
    component_.assign(n_, 0);
    std::vector<std::size_t> label(n_, n_);
    for (std::size_t i = 0; i < n_; ++i) {
        const auto r = find_root(parent, i);
        if (label[r] == n_) {
            label[r] = n_components_++;
        }
        component_[i] = label[r];
    }
}

GraphPtr build_graph(const GridDims& dims, const TissueMap* tissue, bool restrict_to_tissue) {
    dims.validate();
    if (tissue != nullptr && !(tissue->dims() == dims)) {
        throw ConfigError("tissue map dims do not match grid");
    }
    const std::size_t n = dims.size();
    std::vector<std::size_t> offsets(n + 1, 0);
    std::vector<std::size_t> adjacency;
    adjacency.reserve(6 * n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto nb = neighbors(i, dims, tissue, restrict_to_tissue);
        adjacency.insert(adjacency.end(), nb.begin(), nb.end());
        offsets[i + 1] = adjacency.size();
    }
    return std::make_shared<const NeighborGraph>(n, std::move(offsets), std::move(adjacency), restrict_to_tissue);
}

PrecisionOperator::PrecisionOperator(Kind kind, GraphPtr graph, std::vector<double> diagonal, double off_diagonal,
                                     double tau, double lambda)
    : kind_(kind),
      graph_(std::move(graph)),
      diagonal_(std::move(diagonal)),
      off_diagonal_(off_diagonal),
      tau_(tau),
      lambda_(lambda) {
    if (graph_ && graph_->size() != diagonal_.size()) {
        throw ConfigError("precision diagonal does not match graph size");
    }
}

double PrecisionOperator::entry(std::size_t i, std::size_t j) const {
    if (i >= size() || j >= size()) {
        throw BoundsError("precision entry out of range");
    }
    if (i == j) {
        return diagonal_[i];
    }
    if (!graph_) {
        return 0.0;
    }
    const auto nb = graph_->neighbors(i);
    return std::find(nb.begin(), nb.end(), j) != nb.end() ? off_diagonal_ : 0.0;
}

void PrecisionOperator::apply(std::span<const double> x, std::span<double> y) const {
    if (x.size() != size() || y.size() != size()) {
        throw ConfigError("precision matvec: size mismatch");
    }
    if (!graph_ || off_diagonal_ == 0.0) {
        kernels::hadamard(diagonal_, x, y);
        return;
    }
    kernels::precision_apply(graph_->offsets(), graph_->adjacency(), diagonal_, off_diagonal_, x, y);
}

Eigen::MatrixXd PrecisionOperator::to_dense() const {
    check_dense(size());
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(size()), static_cast<Eigen::Index>(size()));
    add_to(m);
    return m;
}

void PrecisionOperator::add_to(Eigen::MatrixXd& m) const {
    if (static_cast<std::size_t>(m.rows()) != size() || static_cast<std::size_t>(m.cols()) != size()) {
        throw ConfigError("precision add_to: size mismatch");
    }
    for (std::size_t i = 0; i < size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        m(ii, ii) += diagonal_[i];
        if (graph_ && off_diagonal_ != 0.0) {
            for (std::size_t j : graph_->neighbors(i)) {
                m(ii, static_cast<Eigen::Index>(j)) += off_diagonal_;
            }
        }
    }
}

PrecisionOperator besag_precision(const BesagModel& model) {
    check_tau(model.tau);
    if (!model.graph) {
        throw ConfigError("Besag model without a graph");
    }
    std::vector<double> diag(model.graph->size());
    for (std::size_t i = 0; i < diag.size(); ++i) {
        diag[i] = model.tau * static_cast<double>(model.graph->degree(i));
    }
    return {PrecisionOperator::Kind::besag, model.graph, std::move(diag), -model.tau, model.tau, 1.0};
}

PrecisionOperator leroux_precision(const LerouxModel& model) {
    check_tau(model.tau);
    if (!(model.lambda > 0.0 && model.lambda < 1.0)) {
        throw DomainError("Leroux lambda must lie in (0, 1)");
    }
    if (!model.graph) {
        throw ConfigError("Leroux model without a graph");
    }
    const double lam = model.lambda;
    std::vector<double> diag(model.graph->size());
    for (std::size_t i = 0; i < diag.size(); ++i) {
        diag[i] = model.tau * (1.0 - lam + lam * static_cast<double>(model.graph->degree(i)));
    }
    return {PrecisionOperator::Kind::leroux, model.graph, std::move(diag), -model.tau * lam, model.tau, lam};
}

PrecisionOperator iid_precision(const GraphPtr& graph, double tau) {
    check_tau(tau);
    if (!graph) {
        throw ConfigError("iid precision without a graph");
    }
    return {PrecisionOperator::Kind::iid, graph, std::vector<double>(graph->size(), tau), 0.0, tau, 0.0};
}

PrecisionOperator zero_precision(std::size_t n) {
    return {PrecisionOperator::Kind::zero, nullptr, std::vector<double>(n, 0.0), 0.0, 0.0, 0.0};
}

Volume q_matvec(const PrecisionOperator& q, const Volume& x) {
    Volume y(x.dims());
    q.apply(x.values(), y.values());
    return y;
}

namespace {
double neighbor_sum(const NeighborGraph& g, std::span<const double> c, std::size_t i) {
    double s = 0.0;
    for (std::size_t j : g.neighbors(i)) {
        s += c[j];
    }
    return s;
}

void check_conditional_args(const GraphPtr& g, std::span<const double> c, std::size_t i) {
    if (!g) {
        throw ConfigError("model without a graph");
    }
    if (c.size() != g->size()) {
        throw ConfigError("field size does not match graph");
    }
    if (i >= g->size()) {
        throw BoundsError("voxel index out of range");
    }
}
}  // namespace

FullConditional full_conditional(const BesagModel& model, std::span<const double> c, std::size_t i) {
    check_conditional_args(model.graph, c, i);
    check_tau(model.tau);
    const auto d = static_cast<double>(model.graph->degree(i));
    if (d == 0.0) {
        throw DomainError("Besag full conditional is degenerate for a voxel without neighbors");
    }
    return {neighbor_sum(*model.graph, c, i) / d, 1.0 / (model.tau * d)};
}

FullConditional full_conditional(const LerouxModel& model, std::span<const double> c, std::size_t i) {
    check_conditional_args(model.graph, c, i);
    check_tau(model.tau);
    const double lam = model.lambda;
    const double denom = 1.0 - lam + lam * static_cast<double>(model.graph->degree(i));
    return {lam / denom * neighbor_sum(*model.graph, c, i), 1.0 / (model.tau * denom)};
}

GraphSpectrum graph_spectrum(const NeighborGraph& graph, bool with_vectors) {
    check_dense(graph.size());
    const auto n = static_cast<Eigen::Index>(graph.size());
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(n, n);
    for (std::size_t i = 0; i < graph.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        r(ii, ii) = static_cast<double>(graph.degree(i));
        for (std::size_t j : graph.neighbors(i)) {
            r(ii, static_cast<Eigen::Index>(j)) = -1.0;
        }
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(
        r, with_vectors ? Eigen::ComputeEigenvectors : Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) {
        throw std::runtime_error("structure-matrix eigendecomposition failed");
    }
    GraphSpectrum out;
    out.eigenvalues.assign(solver.eigenvalues().data(), solver.eigenvalues().data() + solver.eigenvalues().size());
    // The null space has exactly one dimension per connected component.
    out.zero_count = graph.component_count();
    for (std::size_t k = 0; k < out.zero_count; ++k) {
        out.eigenvalues[k] = 0.0;
    }
    if (with_vectors) {
        out.eigenvectors = solver.eigenvectors();
    }
    return out;
}

double leroux_log_det(const GraphSpectrum& spectrum, double tau, double lambda) {
    check_tau(tau);
    double s = 0.0;
    for (double r : spectrum.eigenvalues) {
        s += std::log1p(lambda * (r - 1.0));
    }
    return static_cast<double>(spectrum.eigenvalues.size()) * std::log(tau) + s;
}

double besag_log_pdet(const GraphSpectrum& spectrum, double tau) {
    check_tau(tau);
    double s = 0.0;
    for (std::size_t k = spectrum.zero_count; k < spectrum.eigenvalues.size(); ++k) {
        s += std::log(spectrum.eigenvalues[k]);
    }
    const auto rank = static_cast<double>(spectrum.eigenvalues.size() - spectrum.zero_count);
    return rank * std::log(tau) + s;
}

void project_sum_to_zero(const NeighborGraph& graph, std::span<double> x) {
    if (x.size() != graph.size()) {
        throw ConfigError("field size does not match graph");
    }
    std::vector<double> sum(graph.component_count(), 0.0);
    std::vector<std::size_t> count(graph.component_count(), 0);
    const auto comp = graph.component_ids();
    for (std::size_t i = 0; i < x.size(); ++i) {
        sum[comp[i]] += x[i];
        ++count[comp[i]];
    }
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] -= sum[comp[i]] / static_cast<double>(count[comp[i]]);
    }
}

std::vector<double> sample_leroux(const LerouxModel& model, std::mt19937_64& rng) {
    const Eigen::MatrixXd q = leroux_precision(model).to_dense();
    Eigen::LLT<Eigen::MatrixXd> llt(q);
    if (llt.info() != Eigen::Success) {
        throw std::runtime_error("Leroux precision factorisation failed");
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd z(q.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
        z(i) = normal(rng);
    }
    // Q = L L^T, so x = L^-T z has covariance Q^-1.
    const Eigen::VectorXd x = llt.matrixU().solve(z);
    return {x.data(), x.data() + x.size()};
}

std::vector<double> sample_besag(const BesagModel& model, const GraphSpectrum& spectrum, std::mt19937_64& rng) {
    check_tau(model.tau);
    const auto n = static_cast<Eigen::Index>(spectrum.eigenvalues.size());
    if (spectrum.eigenvectors.rows() != n || !model.graph || model.graph->size() != spectrum.eigenvalues.size()) {
        throw ConfigError("Besag sampling needs the graph spectrum with eigenvectors");
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    for (Eigen::Index k = static_cast<Eigen::Index>(spectrum.zero_count); k < n; ++k) {
        const double scale = normal(rng) / std::sqrt(model.tau * spectrum.eigenvalues[static_cast<std::size_t>(k)]);
        x += scale * spectrum.eigenvectors.col(k);
    }
    std::vector<double> out(x.data(), x.data() + n);
    project_sum_to_zero(*model.graph, out);
    return out;
}

}  // namespace caq
