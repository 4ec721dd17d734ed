#include "caq/kernels.hpp"

#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace caq::kernels {
namespace {

void require_same(std::size_t a, std::size_t b) {
    if (a != b) {
        throw std::invalid_argument("kernel operands differ in length");
    }
}

using Index = std::ptrdiff_t;

}  // namespace

double dot(std::span<const double> a, std::span<const double> b) {
    require_same(a.size(), b.size());
    const std::size_t n = a.size();
    const std::size_t chunks = (n + kReductionChunk - 1) / kReductionChunk;
    if (chunks <= 1) {
        return reference::dot(a, b);
    }
    std::vector<double> partial(chunks, 0.0);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < static_cast<Index>(chunks); ++c) {
        const std::size_t lo = static_cast<std::size_t>(c) * kReductionChunk;
        const std::size_t hi = std::min(n, lo + kReductionChunk);
        double s = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
            s += a[i] * b[i];
        }
        partial[static_cast<std::size_t>(c)] = s;
    }
    double total = 0.0;
    for (double p : partial) {
        total += p;
    }
    return total;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    require_same(x.size(), y.size());
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < static_cast<Index>(x.size()); ++i) {
        y[i] += alpha * x[i];
    }
}

void xpby(std::span<const double> r, double beta, std::span<double> p) {
    require_same(r.size(), p.size());
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < static_cast<Index>(r.size()); ++i) {
        p[i] = r[i] + beta * p[i];
    }
}

void hadamard(std::span<const double> w, std::span<const double> x, std::span<double> y) {
    require_same(w.size(), x.size());
    require_same(x.size(), y.size());
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < static_cast<Index>(x.size()); ++i) {
        y[i] = w[i] * x[i];
    }
}

void precision_apply(std::span<const std::size_t> offsets, std::span<const std::size_t> adjacency,
                     std::span<const double> diagonal, double off_diagonal, std::span<const double> x,
                     std::span<double> y) {
    require_same(diagonal.size(), x.size());
    require_same(x.size(), y.size());
    require_same(offsets.size(), x.size() + 1);
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < static_cast<Index>(x.size()); ++i) {
        double neighbor_sum = 0.0;
        for (std::size_t e = offsets[i]; e < offsets[i + 1]; ++e) {
            neighbor_sum += x[adjacency[e]];
        }
        y[i] = diagonal[i] * x[i] + off_diagonal * neighbor_sum;
    }
}

ClassErrorSums class_error_sums(std::span<const double> estimate, std::span<const double> truth,
                                std::span<const std::uint8_t> labels, std::size_t n_labels) {
    require_same(estimate.size(), truth.size());
    require_same(truth.size(), labels.size());
    const std::size_t n = truth.size();
    const std::size_t chunks = (n + kReductionChunk - 1) / kReductionChunk;
    std::vector<ClassErrorSums> partial(chunks);
#pragma omp parallel for schedule(static)
    for (Index c = 0; c < static_cast<Index>(chunks); ++c) {
        const std::size_t lo = static_cast<std::size_t>(c) * kReductionChunk;
        const std::size_t hi = std::min(n, lo + kReductionChunk);
        partial[static_cast<std::size_t>(c)] =
            reference::class_error_sums(estimate.subspan(lo, hi - lo), truth.subspan(lo, hi - lo),
                                        labels.subspan(lo, hi - lo), n_labels);
    }
    ClassErrorSums total{std::vector<double>(n_labels, 0.0), std::vector<std::size_t>(n_labels, 0)};
    for (const auto& p : partial) {
        for (std::size_t l = 0; l < n_labels; ++l) {
            total.squared_error[l] += p.squared_error[l];
            total.count[l] += p.count[l];
        }
    }
    return total;
}

namespace reference {

double dot(std::span<const double> a, std::span<const double> b) {
    require_same(a.size(), b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    require_same(x.size(), y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] += alpha * x[i];
    }
}

void xpby(std::span<const double> r, double beta, std::span<double> p) {
    require_same(r.size(), p.size());
    for (std::size_t i = 0; i < r.size(); ++i) {
        p[i] = r[i] + beta * p[i];
    }
}

void hadamard(std::span<const double> w, std::span<const double> x, std::span<double> y) {
    require_same(w.size(), x.size());
    require_same(x.size(), y.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = w[i] * x[i];
    }
}

void precision_apply(std::span<const std::size_t> offsets, std::span<const std::size_t> adjacency,
                     std::span<const double> diagonal, double off_diagonal, std::span<const double> x,
                     std::span<double> y) {
    require_same(diagonal.size(), x.size());
    require_same(x.size(), y.size());
    require_same(offsets.size(), x.size() + 1);
    for (std::size_t i = 0; i < x.size(); ++i) {
        double neighbor_sum = 0.0;
        for (std::size_t e = offsets[i]; e < offsets[i + 1]; ++e) {
            neighbor_sum += x[adjacency[e]];
        }
        y[i] = diagonal[i] * x[i] + off_diagonal * neighbor_sum;
    }
}

ClassErrorSums class_error_sums(std::span<const double> estimate, std::span<const double> truth,
                                std::span<const std::uint8_t> labels, std::size_t n_labels) {
    require_same(estimate.size(), truth.size());
    require_same(truth.size(), labels.size());
    ClassErrorSums out{std::vector<double>(n_labels, 0.0), std::vector<std::size_t>(n_labels, 0)};
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const std::size_t l = labels[i];
        if (l >= n_labels) {
            continue;
        }
        const double e = estimate[i] - truth[i];
        out.squared_error[l] += e * e;
        ++out.count[l];
    }
    return out;
}

}  // namespace reference

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) {
        omp_set_num_threads(n);
    }
#else
    (void)n;
#endif
}

}  // namespace caq::kernels
