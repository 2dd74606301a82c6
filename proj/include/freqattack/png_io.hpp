// 8-bit PNG import/export. Pixels map to unit reals as v / 255 and back as
// round(v * 255), clamped.
#pragma once

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "freqattack/errors.hpp"
#include "freqattack/tensor.hpp"

namespace freqattack {

inline std::uint8_t to_byte(double v) noexcept {
    const double r = std::round(v * 255.0);
    return static_cast<std::uint8_t>(r < 0.0 ? 0.0 : (r > 255.0 ? 255.0 : r));
}

inline void write_png(const std::string& path, const Tensor& img) {
    const int c = img.channels();
    if (c != 1 && c != 3) throw DimensionError("write_png: only 1 or 3 channels are supported");
    std::vector<std::uint8_t> bytes(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) {
        if (std::isnan(img[i])) throw NumericError("write_png: NaN pixel");
        bytes[i] = to_byte(img[i]);
    }
    png_image pi;
    std::memset(&pi, 0, sizeof pi);
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width());
    pi.height = static_cast<png_uint_32>(img.height());
    pi.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&pi, path.c_str(), 0, bytes.data(), 0, nullptr)) {
        const std::string msg = pi.message;
        png_image_free(&pi);
        throw IoError("write_png " + path + ": " + msg);
    }
}

/// Grayscale files load as one channel, everything else as RGB.
inline Image read_png(const std::string& path) {
    png_image pi;
    std::memset(&pi, 0, sizeof pi);
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.c_str())) {
        throw IoError("read_png " + path + ": " + std::string(pi.message));
    }
    const bool gray = (pi.format & PNG_FORMAT_FLAG_COLOR) == 0;
    pi.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    std::vector<std::uint8_t> bytes(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, bytes.data(), 0, nullptr)) {
        const std::string msg = pi.message;
        png_image_free(&pi);
        throw IoError("read_png " + path + ": " + msg);
    }
    const Shape shape{static_cast<int>(pi.height), static_cast<int>(pi.width), gray ? 1 : 3};
    std::vector<double> data(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) data[i] = bytes[i] / 255.0;
    return Image(shape, std::move(data));
}

} // namespace freqattack
