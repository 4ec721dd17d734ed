#pragma once

#include <array>
#include <cstdint>
#include <limits>
#include <map>
#include <vector>

#include "caq/grid.hpp"
#include "caq/phase_model.hpp"

namespace caq {

/// Gamma-variate first pass plus a slowly washing-out recirculation plateau:
/// plateau * (1 - exp(-(t - arrival) / plateau_rise)) * exp(-plateau_washout (t - arrival)).
struct AifParams {
    double amplitude = 6.0;      // mM, first-pass height at arrival + time_to_peak
    double arrival_s = 4.0;
    double time_to_peak_s = 6.0;
    double shape = 3.0;
    double plateau_mM = 0.0;
    double plateau_rise_s = 8.0;
    double plateau_washout_per_s = 0.0;

    void validate() const;
};

double aif(double t, const AifParams& p);

/// Tissue response: gain * rate * integral of aif(s) exp(-rate (t - s)) ds.
/// An infinite rate is the identity kernel (gain * aif).
struct CurveParams {
    double gain = 0.0;
    double rate_per_s = std::numeric_limits<double>::infinity();
};

double tissue_curve(double t, const CurveParams& curve, const AifParams& p);

enum class Shape { ellipsoid, cylinder_x, cylinder_y, cylinder_z };

/// Region in normalised coordinates, where voxel centres span (-1, 1) on every axis.
/// For a cylinder, the radius along its own axis is the half-length and the other two
/// are the cross-section semi-axes.
struct Region {
    Tissue tissue = Tissue::background;
    Shape shape = Shape::ellipsoid;
    std::array<double, 3> center{0.0, 0.0, 0.0};
    std::array<double, 3> radii{1.0, 1.0, 1.0};

    [[nodiscard]] bool contains(double x, double y, double z) const noexcept;
};

/// Normalised coordinate of the centre of voxel `idx` on an `n`-voxel axis.
double normalized_coordinate(std::size_t idx, std::size_t n) noexcept;

struct PhantomSpec {
    GridDims dims;
    std::vector<Region> regions;  // painted in order; later regions win
    std::map<Tissue, CurveParams> curves;
    AifParams aif;
    TimeGrid time;
    double gain_jitter = 0.05;  // relative s.d. of a per-voxel gain factor
    double delay_jitter_s = 0.0;  // s.d. of a per-voxel bolus arrival offset
    std::uint64_t seed = 1;

    void validate() const;
    static PhantomSpec standard(const GridDims& dims, std::uint64_t seed = 1);
};

struct Phantom {
    TissueMap tissue;
    std::vector<Volume> truth;  // one volume per time point
    TimeGrid time;
};

Phantom build_phantom(const PhantomSpec& spec);

/// Observation noise. Effective standard deviations are base / rsnr.
struct NoiseModel {
    double rsnr = 5.0;
    double sigma_m_base = 1.0;    // mM
    double sigma_phi_base = 0.5;  // rad
    double xi_variance = 0.09;

    [[nodiscard]] double sigma_m() const noexcept { return sigma_m_base / rsnr; }
    [[nodiscard]] double sigma_phi() const noexcept { return sigma_phi_base / rsnr; }
    void validate() const;
};

/// c_m = xi .* c + eps_m with xi ~ N(1, xi_variance), eps_m ~ N(0, sigma_m^2).
Volume corrupt_magnitude(const Volume& c, const NoiseModel& noise, std::uint64_t seed);
/// dphi = Psi c + eps_phi with eps_phi ~ N(0, sigma_phi^2).
Volume corrupt_phase(const Volume& c, const PhaseOperator& psi, const NoiseModel& noise, std::uint64_t seed);

struct SimulatedDataset {
    std::vector<Volume> truth;
    std::vector<Volume> magnitude;
    std::vector<Volume> phase;
    TissueMap tissue;
    TimeGrid time;
    NoiseModel noise;
    std::uint64_t seed = 0;
};

/// Time point t draws from substream seed ^ t.
std::uint64_t substream_seed(std::uint64_t seed, std::size_t time_index) noexcept;
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept;

SimulatedDataset simulate_dataset(const Phantom& phantom, const PhaseOperator& psi, const NoiseModel& noise,
                                  std::uint64_t seed);

}  // namespace caq
