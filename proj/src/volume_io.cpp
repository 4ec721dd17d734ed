#include "caq/volume_io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

#include <json.hpp>

namespace caq {
namespace {

constexpr std::size_t kMaxHeader = 256;

using Kind = VolumeParseError::Kind;

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return {buf, res.ptr};
}

std::string header_line(const char* magic, const GridDims& dims) {
    std::string line = magic;
    line += ' ' + std::to_string(dims.nx) + ' ' + std::to_string(dims.ny) + ' ' + std::to_string(dims.nz) + ' ' +
            format_double(dims.voxel_mm) + '\n';
    return line;
}

std::vector<char> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw VolumeParseError(Kind::io, "cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
bool parse_number(const std::string& token, T& out) {
    const char* end = token.data() + token.size();
    auto res = std::from_chars(token.data(), end, out);
    return res.ec == std::errc() && res.ptr == end;
}

struct Header {
    GridDims dims;
    std::size_t payload_offset = 0;
};

Header parse_header(const std::vector<char>& bytes, const char* magic, const std::string& name) {
    const auto limit = std::min(bytes.size(), kMaxHeader);
    const auto nl = std::find(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(limit), '\n');
    if (nl == bytes.begin() + static_cast<std::ptrdiff_t>(limit)) {
        throw VolumeParseError(Kind::malformed_header, name + ": no header line");
    }
    std::istringstream is(std::string(bytes.begin(), nl));
    std::vector<std::string> tokens{std::istream_iterator<std::string>(is), std::istream_iterator<std::string>()};
    if (tokens.size() != 5 || tokens[0] != magic) {
        throw VolumeParseError(Kind::malformed_header, name + ": expected '" + magic + " nx ny nz voxel_mm'");
    }
    Header h;
    if (!parse_number(tokens[1], h.dims.nx) || !parse_number(tokens[2], h.dims.ny) ||
        !parse_number(tokens[3], h.dims.nz) || !parse_number(tokens[4], h.dims.voxel_mm)) {
        throw VolumeParseError(Kind::malformed_header, name + ": unparseable header field");
    }
    if (h.dims.nx == 0 || h.dims.ny == 0 || h.dims.nz == 0 || !(h.dims.voxel_mm > 0.0) ||
        !std::isfinite(h.dims.voxel_mm)) {
        throw VolumeParseError(Kind::malformed_header, name + ": invalid dimensions in header");
    }
    h.payload_offset = static_cast<std::size_t>(nl - bytes.begin()) + 1;
    return h;
}

void write_bytes(const std::filesystem::path& path, const std::string& header, const char* data, std::size_t n,
                 const std::string& trailer = {}) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(data, static_cast<std::streamsize>(n));
    out.write(trailer.data(), static_cast<std::streamsize>(trailer.size()));
    if (!out) {
        throw std::runtime_error("write failed for " + path.string());
    }
}

std::uint64_t to_little(std::uint64_t v) {
    if constexpr (std::endian::native == std::endian::little) {
        return v;
    } else {
        return __builtin_bswap64(v);
    }
}

}  // namespace

void write_volume(const std::filesystem::path& path, const Volume& volume) {
    std::vector<std::uint64_t> payload(volume.size());
    for (std::size_t i = 0; i < volume.size(); ++i) {
        payload[i] = to_little(std::bit_cast<std::uint64_t>(volume[i]));
    }
    write_bytes(path, header_line("CAVOL1", volume.dims()), reinterpret_cast<const char*>(payload.data()),
                payload.size() * sizeof(std::uint64_t));
}

Volume read_volume(const std::filesystem::path& path) {
    const auto bytes = slurp(path);
    const Header h = parse_header(bytes, "CAVOL1", path.string());
    const std::size_t n = h.dims.size();
    const std::size_t have = bytes.size() - h.payload_offset;
    if (have < n * sizeof(double)) {
        throw VolumeParseError(Kind::truncated, path.string() + ": payload holds " +
                                                    std::to_string(have / sizeof(double)) + " values, header needs " +
                                                    std::to_string(n));
    }
    if (have > n * sizeof(double)) {
        throw VolumeParseError(Kind::dimension_mismatch,
                               path.string() + ": payload longer than header dimensions imply");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t raw = 0;
        std::memcpy(&raw, bytes.data() + h.payload_offset + i * sizeof(double), sizeof(raw));
        values[i] = std::bit_cast<double>(to_little(raw));
    }
    return Volume(h.dims, std::move(values));
}

Volume read_volume(const std::filesystem::path& path, const GridDims& expected) {
    Volume v = read_volume(path);
    if (!(v.dims() == expected)) {
        throw VolumeParseError(Kind::dimension_mismatch, path.string() + ": dims differ from expected grid");
    }
    return v;
}

void write_tissue(const std::filesystem::path& path, const TissueMap& tissue) {
    nlohmann::json table = nlohmann::json::object();
    for (const auto& [code, name] : tissue.classes()) {
        table[std::to_string(code)] = name;
    }
    write_bytes(path, header_line("CATIS1", tissue.dims()), reinterpret_cast<const char*>(tissue.labels().data()),
                tissue.size(), table.dump() + '\n');
}

TissueMap read_tissue(const std::filesystem::path& path) {
    const auto bytes = slurp(path);
    const Header h = parse_header(bytes, "CATIS1", path.string());
    const std::size_t n = h.dims.size();
    const std::size_t have = bytes.size() - h.payload_offset;
    if (have < n) {
        throw VolumeParseError(Kind::truncated, path.string() + ": label payload truncated");
    }
    std::vector<std::uint8_t> labels(bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset),
                                     bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset + n));
    std::string trailer(bytes.begin() + static_cast<std::ptrdiff_t>(h.payload_offset + n), bytes.end());
    if (trailer.empty() || trailer.back() != '\n') {
        throw VolumeParseError(Kind::truncated, path.string() + ": missing class table line");
    }
    std::map<std::uint8_t, std::string> classes;
    try {
        const auto table = nlohmann::json::parse(trailer);
        for (const auto& [key, value] : table.items()) {
            int code = 0;
            if (!parse_number(key, code) || code < 0 || code > 255) {
                throw VolumeParseError(Kind::malformed_header, path.string() + ": bad class code '" + key + "'");
            }
            classes[static_cast<std::uint8_t>(code)] = value.get<std::string>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw VolumeParseError(Kind::malformed_header, path.string() + ": class table: " + e.what());
    }
    try {
        return TissueMap(h.dims, std::move(labels), std::move(classes));
    } catch (const ConfigError& e) {
        throw VolumeParseError(Kind::malformed_header, path.string() + ": " + e.what());
    }
}

}  // namespace caq
