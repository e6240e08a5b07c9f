#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cutout/datasets.hpp"
#include "cutout/error.hpp"
#include "cutout/rng.hpp"
#include "cutout/tensor.hpp"

namespace cutout {

// ---------------------------------------------------------------------------
// Photometric / geometric transforms
// ---------------------------------------------------------------------------

inline void check_stats(const Image& img, const DatasetStats& stats) {
    if (stats.mean.size() != img.channels() || stats.std.size() != img.channels())
        throw ShapeError("stats have " + std::to_string(stats.mean.size()) + " channels, image has " +
                         std::to_string(img.channels()));
}

/// out = (in - mean[c]) / std[c], evaluated in double and rounded once.
inline Image normalize(const Image& img, const DatasetStats& stats) {
    check_stats(img, stats);
    std::vector<float> out(img.data().size());
    const std::size_t plane = img.plane();
    for (std::size_t c = 0; c < img.channels(); ++c) {
        if (!(stats.std[c] > 0.0)) throw ArgumentError("normalize: std must be positive");
        const double m = stats.mean[c], s = stats.std[c];
        auto in = img.channel(c);
        for (std::size_t i = 0; i < plane; ++i)
            out[c * plane + i] = static_cast<float>((static_cast<double>(in[i]) - m) / s);
    }
    return Image(img.shape(), std::move(out));
}

inline Image denormalize(const Image& img, const DatasetStats& stats) {
    check_stats(img, stats);
    std::vector<float> out(img.data().size());
    const std::size_t plane = img.plane();
    for (std::size_t c = 0; c < img.channels(); ++c) {
        auto in = img.channel(c);
        for (std::size_t i = 0; i < plane; ++i)
            out[c * plane + i] = static_cast<float>(static_cast<double>(in[i]) * stats.std[c] + stats.mean[c]);
    }
    return Image(img.shape(), std::move(out));
}

inline Image zero_pad(const Image& img, std::size_t pad) {
    if (pad == 0) return img;
    const Shape3 out_shape{img.channels(), img.height() + 2 * pad, img.width() + 2 * pad};
    std::vector<float> out(out_shape.size(), 0.0f);
    for (std::size_t c = 0; c < img.channels(); ++c)
        for (std::size_t y = 0; y < img.height(); ++y) {
            auto row = img.data().subspan(img.offset(c, y, 0), img.width());
            std::copy(row.begin(), row.end(),
                      out.begin() + static_cast<std::ptrdiff_t>((c * out_shape.height + y + pad) * out_shape.width + pad));
        }
    return Image(out_shape, std::move(out));
}

/// Window of size out_h x out_w with top-left corner (oy, ox).
inline Image crop_at(const Image& img, std::size_t oy, std::size_t ox, std::size_t out_h, std::size_t out_w) {
    if (out_h == 0 || out_w == 0 || oy + out_h > img.height() || ox + out_w > img.width())
        throw ShapeError("crop " + std::to_string(out_h) + "x" + std::to_string(out_w) + " at (" +
                         std::to_string(oy) + "," + std::to_string(ox) + ") does not fit " + to_string(img.shape()));
    const Shape3 out_shape{img.channels(), out_h, out_w};
    std::vector<float> out;
    out.reserve(out_shape.size());
    for (std::size_t c = 0; c < img.channels(); ++c)
        for (std::size_t y = 0; y < out_h; ++y) {
            auto row = img.data().subspan(img.offset(c, oy + y, ox), out_w);
            out.insert(out.end(), row.begin(), row.end());
        }
    return Image(out_shape, std::move(out));
}

/// Offset drawn uniformly from {0..H-out_h} x {0..W-out_w} (row first).
inline Image random_crop(const Image& img, std::size_t out_h, std::size_t out_w, RngStream& rng) {
    if (out_h > img.height() || out_w > img.width() || out_h == 0 || out_w == 0)
        throw ShapeError("crop " + std::to_string(out_h) + "x" + std::to_string(out_w) + " larger than image " +
                         to_string(img.shape()));
    const auto oy = static_cast<std::size_t>(rng.uniform_below(img.height() - out_h + 1));
    const auto ox = static_cast<std::size_t>(rng.uniform_below(img.width() - out_w + 1));
    return crop_at(img, oy, ox, out_h, out_w);
}

inline Image hflip(const Image& img) {
    std::vector<float> out(img.data().begin(), img.data().end());
    const std::size_t w = img.width();
    for (std::size_t row = 0; row < img.channels() * img.height(); ++row)
        std::reverse(out.begin() + static_cast<std::ptrdiff_t>(row * w),
                     out.begin() + static_cast<std::ptrdiff_t>((row + 1) * w));
    return Image(img.shape(), std::move(out));
}

inline Image random_hflip(const Image& img, RngStream& rng) { return rng.coin() ? hflip(img) : img; }

// ---------------------------------------------------------------------------
// Cutout
// ---------------------------------------------------------------------------

enum class CutoutMode {
    always_clipped,   // center anywhere in the image, patch clipped at the border
    constrained_p50,  // patch fully inside, applied with probability 0.5
};

inline const char* to_string(CutoutMode m) {
    return m == CutoutMode::always_clipped ? "always_clipped" : "constrained_p50";
}

inline CutoutMode parse_cutout_mode(std::string_view s) {
    if (s == "always_clipped") return CutoutMode::always_clipped;
    if (s == "constrained_p50") return CutoutMode::constrained_p50;
    throw ArgumentError("unknown cutout mode '" + std::string(s) + "'");
}

struct CutoutParams {
    std::size_t length = 16;
    CutoutMode mode = CutoutMode::always_clipped;

    friend bool operator==(const CutoutParams&, const CutoutParams&) = default;
};

/// Half-open pixel rectangle [x0,x1) x [y0,y1), clipped to the image.
struct MaskRect {
    std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    std::size_t area() const noexcept { return (x1 - x0) * (y1 - y0); }
    bool empty() const noexcept { return area() == 0; }
    bool contains(std::size_t y, std::size_t x) const noexcept { return y >= y0 && y < y1 && x >= x0 && x < x1; }

    friend bool operator==(const MaskRect&, const MaskRect&) = default;
};

/// Square of side `length` with top-left at center - floor(length/2),
/// intersected with the h x w image.
inline MaskRect cutout_mask_rect(std::size_t h, std::size_t w, std::size_t length, std::size_t cx, std::size_t cy) {
    if (cx >= w || cy >= h)
        throw ArgumentError("cutout center (" + std::to_string(cx) + "," + std::to_string(cy) + ") outside " +
                            std::to_string(h) + "x" + std::to_string(w) + " image");
    if (length == 0) return MaskRect{cx, cy, cx, cy};
    const auto half = static_cast<std::ptrdiff_t>(length / 2);
    const auto L = static_cast<std::ptrdiff_t>(length);
    auto clip = [](std::ptrdiff_t v, std::size_t hi) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(hi)));
    };
    const auto top = static_cast<std::ptrdiff_t>(cy) - half;
    const auto left = static_cast<std::ptrdiff_t>(cx) - half;
    return MaskRect{clip(left, w), clip(top, h), clip(left + L, w), clip(top + L, h)};
}

/// Sets every pixel inside rect to exactly 0 in all channels.
inline Image apply_mask(const Image& img, const MaskRect& rect) {
    if (rect.empty()) return img;
    std::vector<float> out(img.data().begin(), img.data().end());
    for (std::size_t c = 0; c < img.channels(); ++c)
        for (std::size_t y = rect.y0; y < rect.y1; ++y)
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(img.offset(c, y, rect.x0)), rect.x1 - rect.x0, 0.0f);
    return Image(img.shape(), std::move(out));
}

/// Draws the mask for one application, or nullopt when the image is passed
/// through unmodified. Draw order: always_clipped takes cy then cx;
/// constrained_p50 takes the coin, then y0, then x0.
inline std::optional<MaskRect> draw_cutout_rect(std::size_t h, std::size_t w, const CutoutParams& params, RngStream& rng) {
    const std::size_t L = params.length;
    if (params.mode == CutoutMode::constrained_p50) {
        if (L > std::min(h, w))
            throw ArgumentError("constrained cutout of length " + std::to_string(L) + " cannot fit in " +
                                std::to_string(h) + "x" + std::to_string(w));
        if (!rng.coin()) return std::nullopt;
        if (L == 0) return std::nullopt;
        const auto y0 = static_cast<std::size_t>(rng.uniform_below(h - L + 1));
        const auto x0 = static_cast<std::size_t>(rng.uniform_below(w - L + 1));
        return MaskRect{x0, y0, x0 + L, y0 + L};
    }
    if (L == 0) return std::nullopt;
    const auto cy = static_cast<std::size_t>(rng.uniform_below(h));
    const auto cx = static_cast<std::size_t>(rng.uniform_below(w));
    return cutout_mask_rect(h, w, L, cx, cy);
}

struct CutoutResult {
    Image image;
    std::optional<MaskRect> rect;
};

/// apply_cutout plus the rectangle that was zeroed (nullopt: unmodified).
inline CutoutResult apply_cutout_traced(const Image& img, const CutoutParams& params, RngStream& rng) {
    auto rect = draw_cutout_rect(img.height(), img.width(), params, rng);
    if (!rect) return {img, std::nullopt};
    return {apply_mask(img, *rect), rect};
}

inline Image apply_cutout(const Image& img, const CutoutParams& params, RngStream& rng) {
    return apply_cutout_traced(img, params, rng).image;
}

// ---------------------------------------------------------------------------
// Targeted (feature-map driven) cutout
// ---------------------------------------------------------------------------

/// Single-channel h x w row-major map.
struct FeatureMapView {
    std::span<const float> values;
    std::size_t height = 0;
    std::size_t width = 0;
};

inline FeatureMapView feature_map_slice(const Tensor4& t, std::size_t n, std::size_t c) {
    if (n >= t.n() || c >= t.c()) throw IndexError("feature map slice out of range");
    return {t.data().subspan((n * t.c() + c) * t.h() * t.w(), t.h() * t.w()), t.h(), t.w()};
}

/// Nearest-neighbour upsampling: out(y,x) = in(floor(y*hf/H), floor(x*wf/W)).
inline std::vector<float> upsample_nearest(const FeatureMapView& fm, std::size_t out_h, std::size_t out_w) {
    std::vector<float> out(out_h * out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const std::size_t sy = y * fm.height / out_h;
        for (std::size_t x = 0; x < out_w; ++x) out[y * out_w + x] = fm.values[sy * fm.width + x * fm.width / out_w];
    }
    return out;
}

/// Zeroes pixels whose upsampled feature value strictly exceeds the mean of
/// the upsampled map. The rng is accepted for interface uniformity with the
/// other stochastic transforms; the operation itself is deterministic.
inline Image targeted_cutout(const Image& img, const FeatureMapView& fm, RngStream& /*rng*/) {
    if (fm.height == 0 || fm.width == 0 || fm.values.size() != fm.height * fm.width)
        throw ShapeError("targeted_cutout: empty or inconsistent feature map");
    if (fm.height > img.height() || fm.width > img.width())
        throw ShapeError("targeted_cutout: feature map larger than image");
    if (!all_finite<float>(fm.values)) throw ArgumentError("targeted_cutout: non-finite feature map");
    const auto up = upsample_nearest(fm, img.height(), img.width());
    double sum = 0.0;
    for (float v : up) sum += v;
    const double mean = sum / static_cast<double>(up.size());
    std::vector<float> out(img.data().begin(), img.data().end());
    for (std::size_t c = 0; c < img.channels(); ++c)
        for (std::size_t p = 0; p < up.size(); ++p)
            if (static_cast<double>(up[p]) > mean) out[c * img.plane() + p] = 0.0f;
    return Image(img.shape(), std::move(out));
}

// ---------------------------------------------------------------------------
// PPM (P6) dump
// ---------------------------------------------------------------------------

/// Binary P6. Pixels are denormalized with `stats` when given, then encoded
/// as round(clamp(p,0,1)*255). Single-channel images are written as gray RGB.
inline std::vector<std::uint8_t> encode_ppm(const Image& img, const DatasetStats* stats = nullptr) {
    if (img.channels() != 1 && img.channels() != 3)
        throw ShapeError("ppm: need 1 or 3 channels, got " + std::to_string(img.channels()));
    const Image px = stats ? denormalize(img, *stats) : img;
    const std::string header = "P6\n" + std::to_string(px.width()) + " " + std::to_string(px.height()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(header.size() + 3 * px.plane());
    for (std::size_t y = 0; y < px.height(); ++y)
        for (std::size_t x = 0; x < px.width(); ++x)
            for (std::size_t k = 0; k < 3; ++k) {
                const float v = px(px.channels() == 1 ? 0 : k, y, x);
                out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
            }
    return out;
}

} // namespace cutout
