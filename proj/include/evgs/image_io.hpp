#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <png.h>

#include "evgs/binary_io.hpp"
#include "evgs/common.hpp"

namespace evgs {

/// 8-bit grayscale PNG; values are clamped to [0, 1] and rounded.
inline void write_png(const std::string& path, const Image& img) {
    std::vector<std::uint8_t> buf(img.size());
    for (std::size_t i = 0; i < img.size(); ++i)
        buf[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
        throw IoError("cannot write PNG " + path + ": " + pi.message);
}

/// Reads any PNG as 8-bit gray and scales to [0, 1].
inline Image read_png(const std::string& path) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.c_str())) throw IoError("cannot read PNG " + path + ": " + pi.message);
    pi.format = PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&pi);
        throw IoError("cannot decode PNG " + path + ": " + pi.message);
    }
    Image img(static_cast<int>(pi.width), static_cast<int>(pi.height));
    for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = buf[i] / 255.0;
    return img;
}

/// 32-bit float grayscale PFM ("Pf", little-endian scale -1, rows bottom-up).
inline void write_pfm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "Pf\n" << img.width << ' ' << img.height << "\n-1.0\n";
    for (int y = img.height - 1; y >= 0; --y)
        for (int x = 0; x < img.width; ++x) bin::put<float>(os, static_cast<float>(img(x, y)));
    if (!os) throw IoError("write failed: " + path);
}

inline Image read_pfm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open PFM " + path);
    std::string tag;
    int w = 0, h = 0;
    double scale = 0;
    is >> tag >> w >> h >> scale;
    is.get();
    if (tag != "Pf" || w <= 0 || h <= 0 || scale >= 0) throw ParseError("unsupported PFM header in " + path, -1);
    Image img(w, h);
    for (int y = h - 1; y >= 0; --y)
        for (int x = 0; x < w; ++x) img(x, y) = bin::get<float>(is, "pixel");
    return img;
}

/// Exact dump: "EVGSF64\0" | u32 width | u32 height | f64 pixels row-major.
inline constexpr char kF64Magic[9] = {'E', 'V', 'G', 'S', 'F', '6', '4', '\0', '\0'};

inline void write_f64(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path + " for writing");
    bin::put_magic(os, kF64Magic);
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(img.width));
    bin::put<std::uint32_t>(os, static_cast<std::uint32_t>(img.height));
    for (double v : img.data) bin::put<double>(os, v);
    if (!os) throw IoError("write failed: " + path);
}

inline Image read_f64(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    bin::expect_magic(is, kF64Magic, "f64 image");
    const auto w = bin::get<std::uint32_t>(is, "width");
    const auto h = bin::get<std::uint32_t>(is, "height");
    Image img(static_cast<int>(w), static_cast<int>(h));
    for (double& v : img.data) v = bin::get<double>(is, "pixel");
    return img;
}

}  // namespace evgs
