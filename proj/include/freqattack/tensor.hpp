// Dense H x W x C real tensors and the range-checked Image wrapper.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "freqattack/errors.hpp"

namespace freqattack {

struct Shape {
    int height = 0;
    int width = 0;
    int channels = 0;

    std::size_t size() const noexcept {
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
               static_cast<std::size_t>(channels);
    }
    bool operator==(const Shape&) const = default;

    std::string str() const {
        return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
    }
};

/// Unconstrained real tensor, row-major and channel-last.
/// Used for gradients, unclipped intermediate iterates and difference images.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(checked_size(shape), fill) {}

    Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
        if (data_.size() != checked_size(shape)) {
            throw ShapeMismatch("tensor data length " + std::to_string(data_.size()) +
                                " does not match shape " + shape.str());
        }
    }

    const Shape& shape() const noexcept { return shape_; }
    int height() const noexcept { return shape_.height; }
    int width() const noexcept { return shape_.width; }
    int channels() const noexcept { return shape_.channels; }
    std::size_t size() const noexcept { return data_.size(); }

    std::size_t index(int y, int x, int c) const noexcept {
        return (static_cast<std::size_t>(y) * static_cast<std::size_t>(shape_.width) +
                static_cast<std::size_t>(x)) * static_cast<std::size_t>(shape_.channels) +
               static_cast<std::size_t>(c);
    }

    double& operator()(int y, int x, int c) noexcept { return data_[index(y, x, c)]; }
    double operator()(int y, int x, int c) const noexcept { return data_[index(y, x, c)]; }
    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& raw() const noexcept { return data_; }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    Tensor& operator+=(const Tensor& o) {
        require_same_shape(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
        return *this;
    }
    Tensor& operator-=(const Tensor& o) {
        require_same_shape(o, "-=");
        for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
        return *this;
    }
    Tensor& operator*=(double s) noexcept {
        for (double& v : data_) v *= s;
        return *this;
    }

    friend Tensor operator+(Tensor a, const Tensor& b) { return a += b; }
    friend Tensor operator-(Tensor a, const Tensor& b) { return a -= b; }
    friend Tensor operator*(Tensor a, double s) { return a *= s; }
    friend Tensor operator*(double s, Tensor a) { return a *= s; }

    bool operator==(const Tensor&) const = default;

    void require_same_shape(const Tensor& o, const char* what) const {
        if (shape_ != o.shape_) {
            throw ShapeMismatch(std::string(what) + ": shape " + shape_.str() + " vs " + o.shape_.str());
        }
    }

private:
    static std::size_t checked_size(const Shape& s) {
        if (s.height <= 0 || s.width <= 0 || s.channels <= 0) {
            throw DimensionError("tensor dimensions must be positive, got " + s.str());
        }
        return s.size();
    }

    Shape shape_{};
    std::vector<double> data_;
};

/// Pixel tensor whose every element is finite and inside [0, 1].
class Image {
public:
    explicit Image(Tensor t) : t_(std::move(t)) { validate(); }
    Image(Shape shape, std::vector<double> data) : t_(shape, std::move(data)) { validate(); }
    Image(Shape shape, double fill) : t_(shape, fill) { validate(); }

    const Tensor& tensor() const noexcept { return t_; }
    operator const Tensor&() const noexcept { return t_; }  // NOLINT: images are tensors

    const Shape& shape() const noexcept { return t_.shape(); }
    int height() const noexcept { return t_.height(); }
    int width() const noexcept { return t_.width(); }
    int channels() const noexcept { return t_.channels(); }
    std::size_t size() const noexcept { return t_.size(); }
    double operator()(int y, int x, int c) const noexcept { return t_(y, x, c); }
    double operator[](std::size_t i) const noexcept { return t_[i]; }
    std::span<const double> values() const noexcept { return t_.values(); }

    bool operator==(const Image&) const = default;

private:
    void validate() const {
        for (std::size_t i = 0; i < t_.size(); ++i) {
            const double v = t_[i];
            if (!std::isfinite(v)) throw NumericError("image contains a non-finite value at index " + std::to_string(i));
            if (v < 0.0 || v > 1.0) {
                throw RangeError("image value " + std::to_string(v) + " outside [0,1] at index " + std::to_string(i));
            }
        }
    }

    Tensor t_;
};

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    a.require_same_shape(b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double dot(const Tensor& a, const Tensor& b) {
    a.require_same_shape(b, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

} // namespace freqattack
