#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cutout/error.hpp"

namespace cutout {

struct Shape3 {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;

    std::size_t size() const noexcept { return channels * height * width; }
    friend bool operator==(const Shape3&, const Shape3&) = default;
};

inline std::string to_string(const Shape3& s) {
    return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

template <typename T>
bool all_finite(std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

/// Single-precision planar image. Element (c, y, x) lives at c*H*W + y*W + x.
///
/// Construction validates the shape and that every value is finite, so an
/// Image that exists is always well formed.
class Image {
public:
    Image() = default;

    Image(Shape3 shape, std::vector<float> data) : shape_(shape), data_(std::move(data)) {
        if (shape_.channels == 0 || shape_.height == 0 || shape_.width == 0)
            throw ShapeError("image dimensions must be >= 1, got " + to_string(shape_));
        if (data_.size() != shape_.size())
            throw ShapeError("image data length " + std::to_string(data_.size()) +
                             " does not match shape " + to_string(shape_));
        if (!all_finite<float>(data_))
            throw ArgumentError("image contains non-finite values");
    }

    Image(std::size_t channels, std::size_t height, std::size_t width, std::vector<float> data)
        : Image(Shape3{channels, height, width}, std::move(data)) {}

    static Image zeros(Shape3 shape) { return Image(shape, std::vector<float>(shape.size(), 0.0f)); }

    const Shape3& shape() const noexcept { return shape_; }
    std::size_t channels() const noexcept { return shape_.channels; }
    std::size_t height() const noexcept { return shape_.height; }
    std::size_t width() const noexcept { return shape_.width; }
    std::size_t plane() const noexcept { return shape_.height * shape_.width; }

    std::span<const float> data() const noexcept { return data_; }
    std::span<const float> channel(std::size_t c) const { return data().subspan(c * plane(), plane()); }

    std::size_t offset(std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return c * plane() + y * shape_.width + x;
    }

    float at(std::size_t c, std::size_t y, std::size_t x) const {
        if (c >= shape_.channels || y >= shape_.height || x >= shape_.width)
            throw IndexError("image index (" + std::to_string(c) + "," + std::to_string(y) + "," +
                             std::to_string(x) + ") out of range for " + to_string(shape_));
        return data_[offset(c, y, x)];
    }

    // Unchecked; for inner loops that already iterate within bounds.
    float operator()(std::size_t c, std::size_t y, std::size_t x) const noexcept {
        return data_[offset(c, y, x)];
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    Shape3 shape_{};
    std::vector<float> data_;
};

inline float image_get(const Image& img, std::size_t c, std::size_t y, std::size_t x) {
    return img.at(c, y, x);
}

struct LabeledSample {
    Image image;
    std::size_t label = 0;

    friend bool operator==(const LabeledSample&, const LabeledSample&) = default;
};

/// Dense NCHW tensor, index ((n*C + c)*H + h)*W + w.
template <typename T>
class BasicTensor4 {
public:
    BasicTensor4() = default;

    BasicTensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w)
        : n_(n), c_(c), h_(h), w_(w), data_(n * c * h * w, T(0)) {}

    BasicTensor4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::vector<T> data)
        : n_(n), c_(c), h_(h), w_(w), data_(std::move(data)) {
        if (data_.size() != n * c * h * w)
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match " + std::to_string(n) + "x" + std::to_string(c) + "x" +
                             std::to_string(h) + "x" + std::to_string(w));
    }

    std::size_t n() const noexcept { return n_; }
    std::size_t c() const noexcept { return c_; }
    std::size_t h() const noexcept { return h_; }
    std::size_t w() const noexcept { return w_; }
    std::size_t sample_size() const noexcept { return c_ * h_ * w_; }
    std::size_t size() const noexcept { return data_.size(); }
    Shape3 sample_shape() const noexcept { return {c_, h_, w_}; }

    std::span<const T> data() const noexcept { return data_; }
    std::span<T> data() noexcept { return data_; }

    std::span<const T> sample(std::size_t i) const { return data().subspan(i * sample_size(), sample_size()); }
    std::span<T> sample(std::size_t i) { return data().subspan(i * sample_size(), sample_size()); }

    T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return data_[((n * c_ + c) * h_ + h) * w_ + w];
    }
    const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return data_[((n * c_ + c) * h_ + h) * w_ + w];
    }

    bool finite() const { return all_finite<T>(data_); }

    friend bool operator==(const BasicTensor4&, const BasicTensor4&) = default;

private:
    std::size_t n_ = 0, c_ = 0, h_ = 0, w_ = 0;
    std::vector<T> data_;
};

using Tensor4 = BasicTensor4<float>;

struct Batch {
    Tensor4 inputs;
    std::vector<std::size_t> labels;

    friend bool operator==(const Batch&, const Batch&) = default;
};

inline Batch batch_from_samples(std::span<const LabeledSample> samples) {
    if (samples.empty()) throw EmptyBatchError("cannot build a batch from zero samples");
    const Shape3 shape = samples.front().image.shape();
    std::vector<float> data;
    data.reserve(samples.size() * shape.size());
    std::vector<std::size_t> labels;
    labels.reserve(samples.size());
    for (const auto& s : samples) {
        if (s.image.shape() != shape)
            throw ShapeError("batch shape mismatch: " + to_string(s.image.shape()) + " vs " + to_string(shape));
        data.insert(data.end(), s.image.data().begin(), s.image.data().end());
        labels.push_back(s.label);
    }
    return {Tensor4(samples.size(), shape.channels, shape.height, shape.width, std::move(data)),
            std::move(labels)};
}

/// Sample i of a batch as an Image (copy).
inline Image slice_image(const Tensor4& t, std::size_t i) {
    if (i >= t.n()) throw IndexError("batch index " + std::to_string(i) + " out of range");
    auto s = t.sample(i);
    return Image(t.sample_shape(), std::vector<float>(s.begin(), s.end()));
}

} // namespace cutout
