#include "caq/estimators.hpp"

#include <algorithm>
#include <numeric>
#include <cmath>
#include <string>

#include "caq/kernels.hpp"

namespace caq {

void ObservationNoise::validate(std::size_t n) const {
    if (var_m.size() != n || (var_phi.size() != n)) {
        throw ConfigError("observation noise size does not match grid");
    }
    auto positive = [](double v) { return v > 0.0; };  // +inf allowed, NaN rejected
    if (!std::all_of(var_m.begin(), var_m.end(), positive) || !std::all_of(var_phi.begin(), var_phi.end(), positive)) {
        throw ConfigError("observation variances must be positive");
    }
}

bool ObservationNoise::uniform_phase() const noexcept {
    return std::all_of(var_phi.begin(), var_phi.end(), [&](double v) { return v == var_phi.front(); });
}

ObservationNoise ObservationNoise::uniform(std::size_t n, double var_m, double var_phi) {
    return {std::vector<double>(n, var_m), std::vector<double>(n, var_phi)};
}

ObservationNoise ObservationNoise::from_model(const Volume& magnitude, const NoiseModel& noise, SigmaMode mode,
                                              const Volume* truth) {
    noise.validate();
    const Volume* source = &magnitude;
    if (mode == SigmaMode::truth) {
        if (truth == nullptr || !(truth->dims() == magnitude.dims())) {
            throw ConfigError("truth sigma mode needs the true field on the same grid");
        }
        source = truth;
    }
    const double s2m = noise.sigma_m() * noise.sigma_m();
    ObservationNoise out;
    out.var_m.resize(magnitude.size());
    for (std::size_t i = 0; i < magnitude.size(); ++i) {
        const double c = (*source)[i];
        out.var_m[i] = noise.xi_variance * c * c + s2m;
    }
    if (mode == SigmaMode::pooled && !out.var_m.empty()) {
        const double mean = std::accumulate(out.var_m.begin(), out.var_m.end(), 0.0) / static_cast<double>(out.var_m.size());
        std::fill(out.var_m.begin(), out.var_m.end(), mean);
    }
    out.var_phi.assign(magnitude.size(), noise.sigma_phi() * noise.sigma_phi());
    return out;
}

void CGOptions::validate() const {
    if (!(tolerance > 0.0) || max_iterations < 1) {
        throw ConfigError("CG needs tolerance > 0 and at least one iteration");
    }
}

CGResult conjugate_gradient(const LinearOperator& apply_a, std::span<const double> b, const CGOptions& opts,
                            std::span<const double> inverse_diagonal) {
    opts.validate();
    const std::size_t n = b.size();
    if (!inverse_diagonal.empty() && inverse_diagonal.size() != n) {
        throw ConfigError("preconditioner size does not match system");
    }
    CGResult result;
    result.x.assign(n, 0.0);
    const double b_norm = std::sqrt(kernels::dot(b, b));
    if (b_norm == 0.0) {
        return result;
    }

    std::vector<double> r(b.begin(), b.end());
    std::vector<double> z(n);
    std::vector<double> p(n);
    std::vector<double> ap(n);
    auto precondition = [&] {
        if (inverse_diagonal.empty()) {
            std::copy(r.begin(), r.end(), z.begin());
        } else {
            kernels::hadamard(inverse_diagonal, r, z);
        }
    };
    precondition();
    std::copy(z.begin(), z.end(), p.begin());
    double rz = kernels::dot(r, z);
    result.relative_residual = 1.0;

    for (std::size_t it = 1; it <= opts.max_iterations; ++it) {
        apply_a(p, ap);
        const double curvature = kernels::dot(p, ap);
        if (!(curvature > 0.0)) {
            result.iterations = it;
            throw CgError(CgError::Kind::indefinite,
                          "conjugate gradient: non-positive curvature " + std::to_string(curvature), result);
        }
        const double alpha = rz / curvature;
        kernels::axpy(alpha, p, result.x);
        kernels::axpy(-alpha, ap, r);
        result.iterations = it;
        result.relative_residual = std::sqrt(kernels::dot(r, r)) / b_norm;

        if (result.relative_residual <= opts.tolerance) {
            // Confirm with the true residual; restart from it if the recurrence drifted.
            apply_a(result.x, ap);
            for (std::size_t i = 0; i < n; ++i) {
                r[i] = b[i] - ap[i];
            }
            result.relative_residual = std::sqrt(kernels::dot(r, r)) / b_norm;
            if (result.relative_residual <= opts.tolerance) {
                return result;
            }
            precondition();
            std::copy(z.begin(), z.end(), p.begin());
            rz = kernels::dot(r, z);
            continue;
        }
        precondition();
        const double rz_next = kernels::dot(r, z);
        kernels::xpby(z, rz_next / rz, p);
        rz = rz_next;
    }
    throw CgError(CgError::Kind::not_converged,
                  "conjugate gradient did not converge in " + std::to_string(opts.max_iterations) +
                      " iterations (relative residual " + std::to_string(result.relative_residual) + ")",
                  result);
}

namespace {

struct NormalSystem {
    std::vector<double> w_m;    // Sigma_m^-1
    std::vector<double> w_phi;  // Sigma_phi^-1, one entry when uniform
    std::vector<double> rhs;
};

NormalSystem normal_system(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise,
                           const PhaseOperator& psi) {
    const std::size_t n = magnitude.size();
    if (!(magnitude.dims() == psi.dims()) || !(phase.dims() == psi.dims())) {
        throw ConfigError("estimator: magnitude/phase dims do not match the phase operator");
    }
    noise.validate(n);
    NormalSystem s;
    s.w_m.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        s.w_m[i] = 1.0 / noise.var_m[i];
    }
    if (noise.uniform_phase()) {
        s.w_phi = {1.0 / noise.var_phi.front()};
    } else {
        s.w_phi.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            s.w_phi[i] = 1.0 / noise.var_phi[i];
        }
    }
    // rhs = Sm^-1 c_m + Psi^T Sphi^-1 dphi; Psi is symmetric.
    std::vector<double> weighted_phase(n);
    for (std::size_t i = 0; i < n; ++i) {
        weighted_phase[i] = phase[i] * (s.w_phi.size() == 1 ? s.w_phi[0] : s.w_phi[i]);
    }
    s.rhs.resize(n);
    psi.apply(weighted_phase, s.rhs);
    for (std::size_t i = 0; i < n; ++i) {
        s.rhs[i] += s.w_m[i] * magnitude[i];
    }
    return s;
}

void apply_normal(const NormalSystem& s, const PhaseOperator& psi, const PrecisionOperator* q,
                  std::span<const double> x, std::span<double> y) {
    psi.apply_gram(x, s.w_phi, y);
    const std::size_t n = x.size();
    if (q != nullptr) {
        std::vector<double> qx(n);
        q->apply(x, qx);
        kernels::axpy(1.0, qx, y);
    }
    for (std::size_t i = 0; i < n; ++i) {
        y[i] += s.w_m[i] * x[i];
    }
}

Estimate solve(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise, const PhaseOperator& psi,
               const PrecisionOperator* q, const CGOptions& opts) {
    const NormalSystem s = normal_system(magnitude, phase, noise, psi);
    const std::size_t n = magnitude.size();
    if (q != nullptr && q->size() != n) {
        throw ConfigError("precision size does not match grid");
    }
    std::vector<double> inv_diag;
    if (opts.precondition) {
        double mean_w_phi = 0.0;
        for (double w : s.w_phi) {
            mean_w_phi += w;
        }
        mean_w_phi /= static_cast<double>(s.w_phi.size());
        const double gram_diag = mean_w_phi * psi.kernel().mean_squared();
        inv_diag.resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            const double d = s.w_m[i] + gram_diag + (q != nullptr ? q->diagonal()[i] : 0.0);
            inv_diag[i] = d > 0.0 ? 1.0 / d : 1.0;
        }
    }
    auto op = [&](std::span<const double> x, std::span<double> y) { apply_normal(s, psi, q, x, y); };
    CGResult r = conjugate_gradient(op, s.rhs, opts, inv_diag);
    return {Volume(magnitude.dims(), std::move(r.x)), r.iterations, r.relative_residual};
}

}  // namespace

Estimate mle_estimate(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise,
                      const PhaseOperator& psi, const CGOptions& opts) {
    return solve(magnitude, phase, noise, psi, nullptr, opts);
}

Estimate map_estimate(const Volume& magnitude, const Volume& phase, const ObservationNoise& noise,
                      const PhaseOperator& psi, const PrecisionOperator& q, const CGOptions& opts) {
    return solve(magnitude, phase, noise, psi, &q, opts);
}

double map_objective(std::span<const double> c, const Volume& magnitude, const Volume& phase,
                     const ObservationNoise& noise, const PhaseOperator& psi, const PrecisionOperator& q) {
    const std::size_t n = magnitude.size();
    noise.validate(n);
    if (c.size() != n || q.size() != n) {
        throw ConfigError("objective: size mismatch");
    }
    std::vector<double> psi_c(n);
    psi.apply(c, psi_c);
    std::vector<double> qc(n);
    q.apply(c, qc);
    double value = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double em = magnitude[i] - c[i];
        const double ep = phase[i] - psi_c[i];
        value += em * em / noise.var_m[i] + ep * ep / noise.var_phi[i] + c[i] * qc[i];
    }
    return value;
}

std::vector<double> map_gradient(std::span<const double> c, const Volume& magnitude, const Volume& phase,
                                 const ObservationNoise& noise, const PhaseOperator& psi,
                                 const PrecisionOperator& q) {
    const NormalSystem s = normal_system(magnitude, phase, noise, psi);
    std::vector<double> g(c.size());
    apply_normal(s, psi, &q, c, g);
    for (std::size_t i = 0; i < g.size(); ++i) {
        g[i] = 2.0 * (g[i] - s.rhs[i]);
    }
    return g;
}

}  // namespace caq
