#include "caq/phase_model.hpp"

#include <cmath>
#include <complex>
#include <mutex>
#include <stdexcept>

#include <fftw3.h>

namespace caq {
namespace {

// FFTW's planner is not reentrant.
std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

template <typename T>
struct FftwBuffer {
    explicit FftwBuffer(std::size_t n) : ptr(static_cast<T*>(fftw_malloc(sizeof(T) * std::max<std::size_t>(n, 1)))) {
        if (ptr == nullptr) {
            throw std::bad_alloc();
        }
    }
    ~FftwBuffer() { fftw_free(ptr); }
    FftwBuffer(const FftwBuffer&) = delete;
    FftwBuffer& operator=(const FftwBuffer&) = delete;
    T* ptr;
};

std::size_t half_size(const GridDims& d) { return (d.nx / 2 + 1) * d.ny * d.nz; }

}  // namespace

double dft_frequency(std::size_t m, std::size_t n) noexcept {
    const auto sm = static_cast<double>(m);
    return (2 * m > n) ? sm - static_cast<double>(n) : sm;
}

DipoleKernel::DipoleKernel(const GridDims& dims, double psi0) : dims_(dims), psi0_(psi0) {
    dims_.validate();
    if (!std::isfinite(psi0)) {
        throw ConfigError("psi0 must be finite");
    }
    g_.assign(dims_.size(), 0.0);
    const double ex = static_cast<double>(dims_.nx) * dims_.voxel_mm;
    const double ey = static_cast<double>(dims_.ny) * dims_.voxel_mm;
    const double ez = static_cast<double>(dims_.nz) * dims_.voxel_mm;
    for (std::size_t k = 0; k < dims_.nz; ++k) {
        const double kz = dft_frequency(k, dims_.nz) / ez;
        for (std::size_t j = 0; j < dims_.ny; ++j) {
            const double ky = dft_frequency(j, dims_.ny) / ey;
            for (std::size_t i = 0; i < dims_.nx; ++i) {
                const double kx = dft_frequency(i, dims_.nx) / ex;
                const double k2 = kx * kx + ky * ky + kz * kz;
                g_[i + dims_.nx * (j + dims_.ny * k)] = (k2 == 0.0) ? 0.0 : psi0 * (1.0 / 3.0 - kz * kz / k2);
            }
        }
    }
}

double DipoleKernel::mean_squared() const noexcept {
    double s = 0.0;
    for (double g : g_) {
        s += g * g;
    }
    return s / static_cast<double>(g_.size());
}

DipoleKernel build_dipole_kernel(const GridDims& dims, double psi0) { return DipoleKernel(dims, psi0); }

struct PhaseOperator::Plans {
    fftw_plan forward = nullptr;
    fftw_plan backward = nullptr;

    explicit Plans(const GridDims& d) {
        FftwBuffer<double> real(d.size());
        FftwBuffer<fftw_complex> spec(half_size(d));
        const int n[3] = {static_cast<int>(d.nz), static_cast<int>(d.ny), static_cast<int>(d.nx)};
        std::lock_guard lock(planner_mutex());
        forward = fftw_plan_dft_r2c(3, n, real.ptr, spec.ptr, FFTW_ESTIMATE);
        backward = fftw_plan_dft_c2r(3, n, spec.ptr, real.ptr, FFTW_ESTIMATE);
        if (forward == nullptr || backward == nullptr) {
            throw std::runtime_error("FFTW planning failed");
        }
    }
    ~Plans() {
        std::lock_guard lock(planner_mutex());
        fftw_destroy_plan(forward);
        fftw_destroy_plan(backward);
    }
    Plans(const Plans&) = delete;
    Plans& operator=(const Plans&) = delete;
};

PhaseOperator::PhaseOperator(DipoleKernel kernel)
    : kernel_(std::make_shared<const DipoleKernel>(std::move(kernel))),
      plans_(std::make_shared<const Plans>(kernel_->dims())) {
    const GridDims& d = kernel_->dims();
    const std::size_t hx = d.nx / 2 + 1;
    half_g_.resize(half_size(d));
    half_g2_.resize(half_size(d));
    const double inv_n = 1.0 / static_cast<double>(d.size());
    const auto g = kernel_->values();
    for (std::size_t k = 0; k < d.nz; ++k) {
        for (std::size_t j = 0; j < d.ny; ++j) {
            for (std::size_t i = 0; i < hx; ++i) {
                const double value = g[i + d.nx * (j + d.ny * k)];
                // Real-to-complex output is only Hermitian-consistent if G(k) = G(-k).
                const std::size_t mi = (d.nx - i) % d.nx;
                const std::size_t mj = (d.ny - j) % d.ny;
                const std::size_t mk = (d.nz - k) % d.nz;
                if (value != g[mi + d.nx * (mj + d.ny * mk)]) {
                    throw std::logic_error("dipole kernel is not symmetric under k -> -k");
                }
                half_g_[i + hx * (j + d.ny * k)] = value * inv_n;
                half_g2_[i + hx * (j + d.ny * k)] = value * value * inv_n;
            }
        }
    }
}

void PhaseOperator::multiply(std::span<const double> in, std::span<const double> half_multiplier,
                             std::span<double> out) const {
    const GridDims& d = dims();
    const std::size_t n = d.size();
    if (in.size() != n || out.size() != n) {
        throw ConfigError("phase operator: input/output size does not match grid");
    }
    FftwBuffer<double> real(n);
    FftwBuffer<fftw_complex> spec(half_size(d));
    std::copy(in.begin(), in.end(), real.ptr);
    fftw_execute_dft_r2c(plans_->forward, real.ptr, spec.ptr);
    const std::size_t hn = half_multiplier.size();
    for (std::size_t m = 0; m < hn; ++m) {
        spec.ptr[m][0] *= half_multiplier[m];
        spec.ptr[m][1] *= half_multiplier[m];
    }
    fftw_execute_dft_c2r(plans_->backward, spec.ptr, real.ptr);
    std::copy(real.ptr, real.ptr + n, out.begin());
}

void PhaseOperator::apply(std::span<const double> in, std::span<double> out) const { multiply(in, half_g_, out); }

Volume PhaseOperator::apply(const Volume& c) const {
    if (!(c.dims() == dims())) {
        throw ConfigError("phase operator: volume dims do not match kernel dims");
    }
    Volume out(c.dims());
    apply(c.values(), out.values());
    return out;
}

void PhaseOperator::apply_gram(std::span<const double> in, std::span<const double> weights,
                               std::span<double> out) const {
    if (weights.size() == 1) {
        multiply(in, half_g2_, out);
        const double w = weights[0];
        for (double& v : out) {
            v *= w;
        }
        return;
    }
    if (weights.size() != in.size()) {
        throw ConfigError("phase operator: weight count does not match grid");
    }
    std::vector<double> tmp(in.size());
    multiply(in, half_g_, tmp);
    for (std::size_t i = 0; i < tmp.size(); ++i) {
        tmp[i] *= weights[i];
    }
    multiply(tmp, half_g_, out);
}

Eigen::MatrixXd dense_psi_matrix(const PhaseOperator& op) {
    const std::size_t n = op.dims().size();
    if (n > kMaxDenseVoxels) {
        throw ConfigError("dense Psi refused: " + std::to_string(n) + " voxels exceeds " +
                          std::to_string(kMaxDenseVoxels));
    }
    Eigen::MatrixXd psi(n, n);
    std::vector<double> basis(n, 0.0);
    std::vector<double> column(n);
    for (std::size_t j = 0; j < n; ++j) {
        basis[j] = 1.0;
        op.apply(basis, column);
        basis[j] = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            psi(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = column[i];
        }
    }
    return psi;
}

}  // namespace caq
