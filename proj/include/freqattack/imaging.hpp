// Block partitioning, range clamping and L-infinity projection.
#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "freqattack/errors.hpp"
#include "freqattack/tensor.hpp"

namespace freqattack {

/// Tiles of an H x W x C tensor, each block_size x block_size, stored as
/// [channel][block row][block col][i][j]. The Tag distinguishes pixel tiles
/// from coefficient tiles at compile time.
template <class Tag>
class BlockArray {
public:
    BlockArray() = default;

    BlockArray(int block_size, int rows, int cols, int channels, double fill = 0.0)
        : n_(block_size), rows_(rows), cols_(cols), channels_(channels),
          data_(static_cast<std::size_t>(block_size) * block_size * rows * cols * channels, fill) {
        if (block_size <= 0 || rows <= 0 || cols <= 0 || channels <= 0) {
            throw DimensionError("block array dimensions must be positive");
        }
    }

    int block_size() const noexcept { return n_; }
    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    int channels() const noexcept { return channels_; }
    int block_count() const noexcept { return rows_ * cols_; }
    std::size_t tile_count() const noexcept { return static_cast<std::size_t>(rows_) * cols_ * channels_; }
    std::size_t tile_area() const noexcept { return static_cast<std::size_t>(n_) * n_; }
    Shape image_shape() const noexcept { return {rows_ * n_, cols_ * n_, channels_}; }

    std::size_t tile_offset(int channel, int block_row, int block_col) const noexcept {
        return ((static_cast<std::size_t>(channel) * rows_ + block_row) * cols_ + block_col) * tile_area();
    }

    std::span<double> tile(int channel, int block_row, int block_col) noexcept {
        return {data_.data() + tile_offset(channel, block_row, block_col), tile_area()};
    }
    std::span<const double> tile(int channel, int block_row, int block_col) const noexcept {
        return {data_.data() + tile_offset(channel, block_row, block_col), tile_area()};
    }
    /// Tile by flat index in storage order.
    std::span<double> tile(std::size_t t) noexcept { return {data_.data() + t * tile_area(), tile_area()}; }
    std::span<const double> tile(std::size_t t) const noexcept {
        return {data_.data() + t * tile_area(), tile_area()};
    }
    /// Channel of the tile with flat index t.
    int tile_channel(std::size_t t) const noexcept {
        return static_cast<int>(t / (static_cast<std::size_t>(rows_) * cols_));
    }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    std::size_t size() const noexcept { return data_.size(); }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    bool same_layout(const BlockArray& o) const noexcept {
        return n_ == o.n_ && rows_ == o.rows_ && cols_ == o.cols_ && channels_ == o.channels_;
    }
    void require_same_layout(const BlockArray& o, const char* what) const {
        if (!same_layout(o)) throw ShapeMismatch(std::string(what) + ": block layouts differ");
    }

    bool operator==(const BlockArray&) const = default;

private:
    int n_ = 0;
    int rows_ = 0;
    int cols_ = 0;
    int channels_ = 0;
    std::vector<double> data_;
};

struct PixelTileTag {};
using BlockGrid = BlockArray<PixelTileTag>;

inline void require_divisible(const Shape& s, int block_size) {
    if (block_size <= 0) throw DimensionError("block size must be positive");
    if (s.height % block_size != 0 || s.width % block_size != 0) {
        throw DimensionError("image " + s.str() + " is not divisible into " + std::to_string(block_size) + "x" +
                             std::to_string(block_size) + " blocks");
    }
}

inline BlockGrid split_blocks(const Tensor& img, int block_size) {
    require_divisible(img.shape(), block_size);
    const int n = block_size;
    BlockGrid grid(n, img.height() / n, img.width() / n, img.channels());
    for (int c = 0; c < grid.channels(); ++c) {
        for (int br = 0; br < grid.rows(); ++br) {
            for (int bc = 0; bc < grid.cols(); ++bc) {
                auto t = grid.tile(c, br, bc);
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < n; ++j) t[i * n + j] = img(br * n + i, bc * n + j, c);
                }
            }
        }
    }
    return grid;
}

inline Tensor merge_blocks(const BlockGrid& grid) {
    const int n = grid.block_size();
    Tensor img(grid.image_shape());
    for (int c = 0; c < grid.channels(); ++c) {
        for (int br = 0; br < grid.rows(); ++br) {
            for (int bc = 0; bc < grid.cols(); ++bc) {
                auto t = grid.tile(c, br, bc);
                for (int i = 0; i < n; ++i) {
                    for (int j = 0; j < n; ++j) img(br * n + i, bc * n + j, c) = t[i * n + j];
                }
            }
        }
    }
    return img;
}

inline Image clamp_pixels(const Tensor& t) {
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        const double v = t[i];
        if (std::isnan(v)) throw NumericError("clamp_pixels: NaN at index " + std::to_string(i));
        out[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
    return Image(t.shape(), std::move(out));
}

/// Clamp into the eps-ball around init, then into [0, 1].
inline Image project_linf(const Tensor& adv, const Tensor& init, double eps) {
    adv.require_same_shape(init, "project_linf");
    if (!(eps >= 0.0)) throw RangeError("project_linf: eps must be >= 0");
    std::vector<double> out(adv.size());
    for (std::size_t i = 0; i < adv.size(); ++i) {
        double v = adv[i];
        if (std::isnan(v)) throw NumericError("project_linf: NaN at index " + std::to_string(i));
        const double lo = init[i] - eps;
        const double hi = init[i] + eps;
        v = v < lo ? lo : (v > hi ? hi : v);
        out[i] = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
    return Image(adv.shape(), std::move(out));
}

/// sign(0) == 0.
inline double sign(double v) noexcept { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

inline Tensor sign(const Tensor& t) {
    Tensor s(t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) s[i] = sign(t[i]);
    return s;
}

inline double linf_distance(const Tensor& a, const Tensor& b) { return max_abs_diff(a, b); }

/// Round to the nearest 8-bit level: round(v * 255) / 255.
inline Image quantize8(const Tensor& t) {
    Image clamped = clamp_pixels(t);
    std::vector<double> out(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) out[i] = std::round(clamped[i] * 255.0) / 255.0;
    return Image(t.shape(), std::move(out));
}

} // namespace freqattack
