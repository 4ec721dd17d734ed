#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace caq {

class BoundsError : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Voxel grid geometry. Voxels are cubes of edge `voxel_mm`.
struct GridDims {
    std::size_t nx = 1;
    std::size_t ny = 1;
    std::size_t nz = 1;
    double voxel_mm = 1.0;

    [[nodiscard]] std::size_t size() const noexcept { return nx * ny * nz; }
    void validate() const;

    friend bool operator==(const GridDims&, const GridDims&) = default;
};

struct Voxel {
    std::size_t i = 0;
    std::size_t j = 0;
    std::size_t k = 0;
    friend bool operator==(const Voxel&, const Voxel&) = default;
};

/// x-fastest linear order: i + nx*(j + ny*k).
std::size_t linear_index(std::size_t i, std::size_t j, std::size_t k, const GridDims& dims);
Voxel voxel_coords(std::size_t index, const GridDims& dims);

/// Scalar field over a grid (mM for concentration, radians for phase).
class Volume {
public:
    Volume() = default;
    explicit Volume(const GridDims& dims, double fill = 0.0);
    Volume(const GridDims& dims, std::vector<double> values);

    [[nodiscard]] const GridDims& dims() const noexcept { return dims_; }
    [[nodiscard]] std::size_t size() const noexcept { return values_.size(); }
    [[nodiscard]] std::span<const double> values() const noexcept { return values_; }
    [[nodiscard]] std::span<double> values() noexcept { return values_; }
    [[nodiscard]] const std::vector<double>& vector() const noexcept { return values_; }

    double& operator[](std::size_t idx) noexcept { return values_[idx]; }
    double operator[](std::size_t idx) const noexcept { return values_[idx]; }
    double& at(std::size_t i, std::size_t j, std::size_t k) { return values_[linear_index(i, j, k, dims_)]; }
    [[nodiscard]] double at(std::size_t i, std::size_t j, std::size_t k) const {
        return values_[linear_index(i, j, k, dims_)];
    }

    [[nodiscard]] bool all_finite() const noexcept;

private:
    GridDims dims_{};
    std::vector<double> values_;
};

/// Tissue class codes used by the digital phantom.
enum class Tissue : std::uint8_t {
    background = 0,
    white_matter = 1,
    gray_matter = 2,
    tumor_rim = 3,
    tumor_core = 4,
    vessel = 5,
};

std::string tissue_name(Tissue t);
Tissue tissue_from_name(const std::string& name);
std::map<std::uint8_t, std::string> default_class_table();

class TissueMap {
public:
    TissueMap() = default;
    TissueMap(const GridDims& dims, std::vector<std::uint8_t> labels,
              std::map<std::uint8_t, std::string> classes = default_class_table());

    [[nodiscard]] const GridDims& dims() const noexcept { return dims_; }
    [[nodiscard]] std::size_t size() const noexcept { return labels_.size(); }
    [[nodiscard]] std::span<const std::uint8_t> labels() const noexcept { return labels_; }
    [[nodiscard]] std::uint8_t operator[](std::size_t idx) const noexcept { return labels_[idx]; }
    [[nodiscard]] const std::map<std::uint8_t, std::string>& classes() const noexcept { return classes_; }
    [[nodiscard]] std::size_t count(std::uint8_t code) const noexcept;

private:
    GridDims dims_{};
    std::vector<std::uint8_t> labels_;
    std::map<std::uint8_t, std::string> classes_;
};

/// Acquisition times in seconds: every 2 s up to 30 s, then every 5 s up to 60 s.
class TimeGrid {
public:
    static constexpr std::size_t kCount = 22;

    TimeGrid();
    explicit TimeGrid(std::vector<double> seconds);

    [[nodiscard]] std::span<const double> seconds() const noexcept { return t_; }
    [[nodiscard]] std::size_t size() const noexcept { return t_.size(); }
    double operator[](std::size_t idx) const noexcept { return t_[idx]; }

private:
    std::vector<double> t_;
};

/// Face-adjacent neighbors in order -x, +x, -y, +y, -z, +z, no wrap-around.
/// With `restrict_to_tissue`, neighbors of a different class are dropped.
std::vector<std::size_t> neighbors(std::size_t index, const GridDims& dims,
                                   const TissueMap* tissue = nullptr, bool restrict_to_tissue = false);

}  // namespace caq
