#pragma once

#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "caq/grid.hpp"

namespace caq {

/// Susceptibility dipole kernel on the DFT frequency grid:
/// G(k) = psi0 * (1/3 - kz^2 / |k|^2), with G(0) = 0.
/// Values are stored x-fastest over the full N-point frequency grid.
class DipoleKernel {
public:
    DipoleKernel(const GridDims& dims, double psi0);

    [[nodiscard]] const GridDims& dims() const noexcept { return dims_; }
    [[nodiscard]] double psi0() const noexcept { return psi0_; }
    [[nodiscard]] std::span<const double> values() const noexcept { return g_; }
    [[nodiscard]] double at(std::size_t i, std::size_t j, std::size_t k) const {
        return g_[linear_index(i, j, k, dims_)];
    }

    /// (1/N) sum G^2: the constant diagonal of the circulant Psi^T Psi.
    [[nodiscard]] double mean_squared() const noexcept;

private:
    GridDims dims_;
    double psi0_;
    std::vector<double> g_;
};

DipoleKernel build_dipole_kernel(const GridDims& dims, double psi0);

/// Signed DFT frequency of bin m on an n-point axis (m > n/2 wraps negative).
double dft_frequency(std::size_t m, std::size_t n) noexcept;

/// Phi = F^-1(G . F(c)), applied with FFTW real transforms. Periodic boundaries.
/// Copies share the plans; apply() allocates its own workspace and is safe to call concurrently.
class PhaseOperator {
public:
    explicit PhaseOperator(DipoleKernel kernel);

    [[nodiscard]] const DipoleKernel& kernel() const noexcept { return *kernel_; }
    [[nodiscard]] const GridDims& dims() const noexcept { return kernel_->dims(); }

    [[nodiscard]] Volume apply(const Volume& c) const;
    void apply(std::span<const double> in, std::span<double> out) const;

    /// out = Psi^T diag(weights) Psi in. A single weight means a uniform diagonal and
    /// takes one transform pair with G^2.
    void apply_gram(std::span<const double> in, std::span<const double> weights, std::span<double> out) const;

private:
    struct Plans;

    void multiply(std::span<const double> in, std::span<const double> half_multiplier, std::span<double> out) const;

    std::shared_ptr<const DipoleKernel> kernel_;
    std::shared_ptr<const Plans> plans_;
    std::vector<double> half_g_;
    std::vector<double> half_g2_;
};

/// Column j is apply(e_j). Refuses grids above kMaxDenseVoxels.
Eigen::MatrixXd dense_psi_matrix(const PhaseOperator& op);

inline constexpr std::size_t kMaxDenseVoxels = 4096;

}  // namespace caq
