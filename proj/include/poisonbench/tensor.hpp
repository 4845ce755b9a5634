#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "poisonbench/errors.hpp"

namespace poisonbench {

/// Pixel grid in [0,1], row-major (height, width, channels).
/// Producers quantize pixels to float32 precision so the on-disk
/// float32 representation round-trips losslessly.
struct ImageTensor {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;

    int pixel_count() const { return height * width * channels; }

    bool same_geometry(const ImageTensor& other) const {
        return height == other.height && width == other.width && channels == other.channels;
    }
};

inline double quantize_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void validate(const ImageTensor& t) {
    if (t.height <= 0 || t.width <= 0 || t.channels <= 0)
        throw ConfigError("tensor: non-positive geometry");
    if (static_cast<int>(t.data.size()) != t.pixel_count())
        throw DimensionError("tensor: data length does not match geometry");
    for (double v : t.data)
        if (!(v >= 0.0 && v <= 1.0))
            throw ConfigError("tensor: pixel outside [0,1]");
}

// ---------------------------------------------------------------------------
// Binary float32 container, shared by encoder weights and image blobs.
//
//   bytes  0..7   magic "PBENCH32"
//   bytes  8..11  uint32 LE version (currently 1)
//   bytes 12..15  uint32 LE element count
//   bytes 16..    count little-endian IEEE-754 float32 values, row-major
// ---------------------------------------------------------------------------

inline constexpr std::array<char, 8> kBlobMagic = {'P', 'B', 'E', 'N', 'C', 'H', '3', '2'};
inline constexpr std::uint32_t kBlobVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little,
              "blob i/o assumes a little-endian host");

inline void put_u32(std::ofstream& out, std::uint32_t v) {
    out.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t get_u32(std::ifstream& in) {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
}

} // namespace detail

inline void write_f32_blob(const std::filesystem::path& path, std::span<const double> values) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw FormatError("blob: cannot open for writing: " + path.string());
    out.write(kBlobMagic.data(), kBlobMagic.size());
    detail::put_u32(out, kBlobVersion);
    detail::put_u32(out, static_cast<std::uint32_t>(values.size()));
    std::vector<float> f(values.begin(), values.end());
    out.write(reinterpret_cast<const char*>(f.data()),
              static_cast<std::streamsize>(sizeof(float) * f.size()));
    if (!out)
        throw FormatError("blob: write failed: " + path.string());
}

inline std::vector<double> read_f32_blob(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw FormatError("blob: cannot open: " + path.string());
    std::array<char, 8> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kBlobMagic)
        throw FormatError("blob: bad magic: " + path.string());
    const std::uint32_t version = detail::get_u32(in);
    if (!in || version != kBlobVersion)
        throw FormatError("blob: unsupported version: " + path.string());
    const std::uint32_t count = detail::get_u32(in);
    if (!in)
        throw FormatError("blob: truncated header: " + path.string());
    std::vector<float> f(count);
    in.read(reinterpret_cast<char*>(f.data()), static_cast<std::streamsize>(sizeof(float) * count));
    if (in.gcount() != static_cast<std::streamsize>(sizeof(float) * count))
        throw FormatError("blob: truncated payload: " + path.string());
    return {f.begin(), f.end()};
}

inline void save_image(const std::filesystem::path& path, const ImageTensor& t) {
    write_f32_blob(path, t.data);
}

inline ImageTensor load_image(const std::filesystem::path& path, int height, int width, int channels) {
    ImageTensor t{height, width, channels, read_f32_blob(path)};
    if (static_cast<int>(t.data.size()) != t.pixel_count())
        throw FormatError("blob: element count does not match geometry: " + path.string());
    return t;
}

} // namespace poisonbench
