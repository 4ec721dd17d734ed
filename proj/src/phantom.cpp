#include "caq/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include <boost/math/quadrature/gauss_kronrod.hpp>

namespace caq {

void AifParams::validate() const {
    if (!(amplitude > 0.0) || !(time_to_peak_s > 0.0)) {
        throw ConfigError("AIF amplitude and time-to-peak must be positive");
    }
    if (!(shape > 0.0) || !std::isfinite(arrival_s) || arrival_s < 0.0) {
        throw ConfigError("AIF shape must be positive and arrival non-negative");
    }
    if (!(plateau_mM >= 0.0) || !(plateau_rise_s > 0.0) || !(plateau_washout_per_s >= 0.0)) {
        throw ConfigError("AIF plateau needs height >= 0, rise > 0 and washout >= 0");
    }
}

double aif(double t, const AifParams& p) {
    p.validate();
    if (t < 0.0) {
        throw ConfigError("AIF evaluated at negative time");
    }
    if (t <= p.arrival_s) {
        return 0.0;
    }
    const double dt = t - p.arrival_s;
    const double u = dt / p.time_to_peak_s;
    const double first_pass = p.amplitude * std::pow(u, p.shape) * std::exp(p.shape * (1.0 - u));
    if (p.plateau_mM == 0.0) {
        return first_pass;
    }
    return first_pass +
           p.plateau_mM * -std::expm1(-dt / p.plateau_rise_s) * std::exp(-p.plateau_washout_per_s * dt);
}

double tissue_curve(double t, const CurveParams& curve, const AifParams& p) {
    if (!(curve.gain >= 0.0) || !(curve.rate_per_s > 0.0)) {
        throw ConfigError("tissue curve needs gain >= 0 and rate > 0");
    }
    if (curve.gain == 0.0) {
        return 0.0;
    }
    if (std::isinf(curve.rate_per_s)) {
        return curve.gain * aif(t, p);
    }
    if (t <= p.arrival_s) {
        return 0.0;
    }
    const double k = curve.rate_per_s;
    auto integrand = [&](double s) { return aif(s, p) * std::exp(-k * (t - s)); };
    const double integral =
        boost::math::quadrature::gauss_kronrod<double, 31>::integrate(integrand, p.arrival_s, t, 15, 1e-12);
    return curve.gain * k * integral;
}

bool Region::contains(double x, double y, double z) const noexcept {
    const double dx = (x - center[0]) / radii[0];
    const double dy = (y - center[1]) / radii[1];
    const double dz = (z - center[2]) / radii[2];
    switch (shape) {
        case Shape::ellipsoid: return dx * dx + dy * dy + dz * dz <= 1.0;
        case Shape::cylinder_x: return dy * dy + dz * dz <= 1.0 && std::abs(dx) <= 1.0;
        case Shape::cylinder_y: return dx * dx + dz * dz <= 1.0 && std::abs(dy) <= 1.0;
        case Shape::cylinder_z: return dx * dx + dy * dy <= 1.0 && std::abs(dz) <= 1.0;
    }
    return false;
}

double normalized_coordinate(std::size_t idx, std::size_t n) noexcept {
    return (static_cast<double>(idx) + 0.5) / static_cast<double>(n) * 2.0 - 1.0;
}

void PhantomSpec::validate() const {
    dims.validate();
    aif.validate();
    if (!(gain_jitter >= 0.0) || gain_jitter >= 0.5) {
        throw ConfigError("gain jitter must lie in [0, 0.5)");
    }
    if (!(delay_jitter_s >= 0.0) || !std::isfinite(delay_jitter_s)) {
        throw ConfigError("delay jitter must be finite and non-negative");
    }
    for (const auto& r : regions) {
        if (!(r.radii[0] > 0.0 && r.radii[1] > 0.0 && r.radii[2] > 0.0)) {
            throw ConfigError("region radii must be positive");
        }
        if (!curves.contains(r.tissue)) {
            throw ConfigError("no curve parameters for tissue '" + tissue_name(r.tissue) + "'");
        }
    }
}

PhantomSpec PhantomSpec::standard(const GridDims& dims, std::uint64_t seed) {
    PhantomSpec s;
    s.dims = dims;
    s.seed = seed;
    s.regions = {
        {Tissue::gray_matter, Shape::ellipsoid, {0.0, 0.0, 0.0}, {0.92, 0.92, 0.92}},
        {Tissue::white_matter, Shape::ellipsoid, {0.0, 0.0, 0.0}, {0.72, 0.72, 0.72}},
        {Tissue::tumor_rim, Shape::ellipsoid, {0.3, -0.3, 0.1}, {0.45, 0.45, 0.45}},
        {Tissue::tumor_core, Shape::ellipsoid, {0.3, -0.3, 0.1}, {0.2, 0.2, 0.2}},
        {Tissue::vessel, Shape::cylinder_z, {-0.5, 0.3, 0.0}, {0.3, 0.3, 0.8}},
    };
    s.curves = {
        {Tissue::background, {0.0, 1.0}},
        {Tissue::white_matter, {0.04, 0.05}},
        {Tissue::gray_matter, {0.06, 0.1}},
        {Tissue::tumor_rim, {0.3, 0.1}},
        {Tissue::tumor_core, {0.1, 0.02}},
        {Tissue::vessel, {1.0, std::numeric_limits<double>::infinity()}},
    };
    return s;
}

Phantom build_phantom(const PhantomSpec& spec) {
    spec.validate();
    const GridDims& d = spec.dims;
    std::vector<std::uint8_t> labels(d.size(), static_cast<std::uint8_t>(Tissue::background));
    for (std::size_t k = 0; k < d.nz; ++k) {
        const double z = normalized_coordinate(k, d.nz);
        for (std::size_t j = 0; j < d.ny; ++j) {
            const double y = normalized_coordinate(j, d.ny);
            for (std::size_t i = 0; i < d.nx; ++i) {
                const double x = normalized_coordinate(i, d.nx);
                for (const auto& r : spec.regions) {
                    if (r.contains(x, y, z)) {
                        labels[i + d.nx * (j + d.ny * k)] = static_cast<std::uint8_t>(r.tissue);
                    }
                }
            }
        }
    }
    if (std::count(labels.begin(), labels.end(), static_cast<std::uint8_t>(Tissue::vessel)) == 0) {
        throw ConfigError("phantom has no vessel voxels");
    }

    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> gain(d.size(), 1.0);
    std::vector<double> delay(d.size(), 0.0);
    for (std::size_t n = 0; n < d.size(); ++n) {
        gain[n] = std::max(0.0, 1.0 + spec.gain_jitter * normal(rng));
        delay[n] = spec.delay_jitter_s * normal(rng);
    }

    Phantom out{TissueMap(d, std::move(labels)), {}, spec.time};
    const std::size_t nt = spec.time.size();
    std::map<std::uint8_t, CurveParams> params;
    for (const auto& [tissue, p] : spec.curves) {
        params[static_cast<std::uint8_t>(tissue)] = p;
    }
    params.try_emplace(static_cast<std::uint8_t>(Tissue::background), CurveParams{0.0, 1.0});

    out.truth.assign(nt, Volume(d));
    if (spec.delay_jitter_s == 0.0) {
        // Curves per class on the time grid, evaluated once.
        for (const auto& [code, p] : params) {
            for (std::size_t t = 0; t < nt; ++t) {
                const double value = tissue_curve(spec.time[t], p, spec.aif);
                for (std::size_t n = 0; n < d.size(); ++n) {
                    if (out.tissue[n] == code) {
                        out.truth[t][n] = gain[n] * value;
                    }
                }
            }
        }
        return out;
    }

    // Shifted curves come from a fine table with linear interpolation.
    constexpr double step = 0.01;
    const double t_end = spec.time[nt - 1] + 8.0 * spec.delay_jitter_s + step;
    const auto samples = static_cast<std::size_t>(std::ceil(t_end / step)) + 2;
    for (const auto& [code, p] : params) {
        std::vector<double> table(samples);
        for (std::size_t m = 0; m < samples; ++m) {
            table[m] = tissue_curve(static_cast<double>(m) * step, p, spec.aif);
        }
        for (std::size_t n = 0; n < d.size(); ++n) {
            if (out.tissue[n] != code) {
                continue;
            }
            for (std::size_t t = 0; t < nt; ++t) {
                const double u = std::clamp((spec.time[t] - delay[n]) / step, 0.0, static_cast<double>(samples - 1));
                const auto lo = std::min(static_cast<std::size_t>(u), samples - 2);
                const double f = u - static_cast<double>(lo);
                out.truth[t][n] = gain[n] * ((1.0 - f) * table[lo] + f * table[lo + 1]);
            }
        }
    }
    return out;
}

void NoiseModel::validate() const {
    if (!(rsnr > 0.0) || !(sigma_m_base > 0.0) || !(sigma_phi_base > 0.0) || !(xi_variance >= 0.0)) {
        throw ConfigError("noise model needs rsnr, sigma bases > 0 and xi variance >= 0");
    }
}

Volume corrupt_magnitude(const Volume& c, const NoiseModel& noise, std::uint64_t seed) {
    noise.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> xi(1.0, std::sqrt(noise.xi_variance));
    std::normal_distribution<double> eps(0.0, noise.sigma_m());
    Volume out(c.dims());
    for (std::size_t i = 0; i < c.size(); ++i) {
        const double bias = xi(rng);
        out[i] = bias * c[i] + eps(rng);
    }
    return out;
}

Volume corrupt_phase(const Volume& c, const PhaseOperator& psi, const NoiseModel& noise, std::uint64_t seed) {
    noise.validate();
    Volume out = psi.apply(c);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> eps(0.0, noise.sigma_phi());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += eps(rng);
    }
    return out;
}

std::uint64_t substream_seed(std::uint64_t seed, std::size_t time_index) noexcept {
    return seed ^ static_cast<std::uint64_t>(time_index);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    // splitmix64 finaliser
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

SimulatedDataset simulate_dataset(const Phantom& phantom, const PhaseOperator& psi, const NoiseModel& noise,
                                  std::uint64_t seed) {
    noise.validate();
    if (!(psi.dims() == phantom.tissue.dims())) {
        throw ConfigError("phase operator dims do not match phantom");
    }
    const std::size_t nt = phantom.truth.size();
    SimulatedDataset ds{phantom.truth, std::vector<Volume>(nt), std::vector<Volume>(nt), phantom.tissue,
                        phantom.time,  noise,                  seed};
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(nt); ++t) {
        const auto ti = static_cast<std::size_t>(t);
        const std::uint64_t sub = substream_seed(seed, ti);
        ds.magnitude[ti] = corrupt_magnitude(phantom.truth[ti], noise, mix_seed(sub, 1));
        ds.phase[ti] = corrupt_phase(phantom.truth[ti], psi, noise, mix_seed(sub, 2));
    }
    return ds;
}

}  // namespace caq
