#include "caq/grid.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace caq {

void GridDims::validate() const {
    if (nx < 1 || ny < 1 || nz < 1) {
        throw ConfigError("grid dimensions must be >= 1");
    }
    if (!(voxel_mm > 0.0) || !std::isfinite(voxel_mm)) {
        throw ConfigError("voxel size must be positive and finite");
    }
}

std::size_t linear_index(std::size_t i, std::size_t j, std::size_t k, const GridDims& dims) {
    if (i >= dims.nx || j >= dims.ny || k >= dims.nz) {
        std::ostringstream os;
        os << "voxel (" << i << "," << j << "," << k << ") outside " << dims.nx << "x" << dims.ny << "x"
           << dims.nz;
        throw BoundsError(os.str());
    }
    return i + dims.nx * (j + dims.ny * k);
}

Voxel voxel_coords(std::size_t index, const GridDims& dims) {
    if (index >= dims.size()) {
        throw BoundsError("linear index " + std::to_string(index) + " outside grid of " +
                          std::to_string(dims.size()) + " voxels");
    }
    const std::size_t i = index % dims.nx;
    const std::size_t rest = index / dims.nx;
    return {i, rest % dims.ny, rest / dims.ny};
}

Volume::Volume(const GridDims& dims, double fill) : dims_(dims) {
    dims_.validate();
    values_.assign(dims_.size(), fill);
}

Volume::Volume(const GridDims& dims, std::vector<double> values) : dims_(dims), values_(std::move(values)) {
    dims_.validate();
    if (values_.size() != dims_.size()) {
        throw ConfigError("volume has " + std::to_string(values_.size()) + " values, grid needs " +
                          std::to_string(dims_.size()));
    }
}

bool Volume::all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

std::string tissue_name(Tissue t) {
    switch (t) {
        case Tissue::background: return "background";
        case Tissue::white_matter: return "white_matter";
        case Tissue::gray_matter: return "gray_matter";
        case Tissue::tumor_rim: return "tumor_rim";
        case Tissue::tumor_core: return "tumor_core";
        case Tissue::vessel: return "vessel";
    }
    throw ConfigError("unknown tissue code");
}

Tissue tissue_from_name(const std::string& name) {
    for (auto code : {Tissue::background, Tissue::white_matter, Tissue::gray_matter, Tissue::tumor_rim,
                      Tissue::tumor_core, Tissue::vessel}) {
        if (tissue_name(code) == name) {
            return code;
        }
    }
    throw ConfigError("unknown tissue class '" + name + "'");
}

std::map<std::uint8_t, std::string> default_class_table() {
    std::map<std::uint8_t, std::string> table;
    for (auto code : {Tissue::background, Tissue::white_matter, Tissue::gray_matter, Tissue::tumor_rim,
                      Tissue::tumor_core, Tissue::vessel}) {
        table[static_cast<std::uint8_t>(code)] = tissue_name(code);
    }
    return table;
}

TissueMap::TissueMap(const GridDims& dims, std::vector<std::uint8_t> labels,
                     std::map<std::uint8_t, std::string> classes)
    : dims_(dims), labels_(std::move(labels)), classes_(std::move(classes)) {
    dims_.validate();
    if (labels_.size() != dims_.size()) {
        throw ConfigError("tissue map has " + std::to_string(labels_.size()) + " labels, grid needs " +
                          std::to_string(dims_.size()));
    }
    for (auto label : labels_) {
        if (!classes_.contains(label)) {
            throw ConfigError("tissue label " + std::to_string(label) + " not in class table");
        }
    }
}

std::size_t TissueMap::count(std::uint8_t code) const noexcept {
    return static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), code));
}

namespace {
std::vector<double> standard_times() {
    std::vector<double> t;
    for (int s = 0; s <= 30; s += 2) {
        t.push_back(s);
    }
    for (int s = 35; s <= 60; s += 5) {
        t.push_back(s);
    }
    return t;
}
}  // namespace

TimeGrid::TimeGrid() : t_(standard_times()) {}

TimeGrid::TimeGrid(std::vector<double> seconds) : t_(std::move(seconds)) {
    if (t_.empty()) {
        throw ConfigError("time grid is empty");
    }
    for (std::size_t i = 1; i < t_.size(); ++i) {
        if (!(t_[i] > t_[i - 1])) {
            throw ConfigError("time grid must be strictly increasing");
        }
    }
}

std::vector<std::size_t> neighbors(std::size_t index, const GridDims& dims, const TissueMap* tissue,
                                   bool restrict_to_tissue) {
    const Voxel v = voxel_coords(index, dims);
    if (restrict_to_tissue) {
        if (tissue == nullptr) {
            throw ConfigError("tissue restriction requested without a tissue map");
        }
        if (!(tissue->dims() == dims)) {
            throw ConfigError("tissue map dims do not match grid");
        }
    }
    std::vector<std::size_t> out;
    out.reserve(6);
    const std::size_t sx = 1;
    const std::size_t sy = dims.nx;
    const std::size_t sz = dims.nx * dims.ny;
    auto push = [&](std::size_t n) {
        if (!restrict_to_tissue || (*tissue)[n] == (*tissue)[index]) {
            out.push_back(n);
        }
    };
    if (v.i > 0) push(index - sx);
    if (v.i + 1 < dims.nx) push(index + sx);
    if (v.j > 0) push(index - sy);
    if (v.j + 1 < dims.ny) push(index + sy);
    if (v.k > 0) push(index - sz);
    if (v.k + 1 < dims.nz) push(index + sz);
    return out;
}

}  // namespace caq
