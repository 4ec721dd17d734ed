#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include "caq/grid.hpp"

namespace caq {

/// Failure reading a CAVOL1 / CATIS1 file.
class VolumeParseError : public std::runtime_error {
public:
    enum class Kind { io, malformed_header, dimension_mismatch, truncated };

    VolumeParseError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    [[nodiscard]] Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

// CAVOL1: "CAVOL1 nx ny nz voxel_mm\n" then nx*ny*nz little-endian float64, x fastest.
void write_volume(const std::filesystem::path& path, const Volume& volume);
Volume read_volume(const std::filesystem::path& path);
/// Same as read_volume but rejects a file whose header dims differ from `expected`.
Volume read_volume(const std::filesystem::path& path, const GridDims& expected);

// CATIS1: same header with uint8 labels, followed by one JSON line mapping code -> class name.
void write_tissue(const std::filesystem::path& path, const TissueMap& tissue);
TissueMap read_tissue(const std::filesystem::path& path);

}  // namespace caq
