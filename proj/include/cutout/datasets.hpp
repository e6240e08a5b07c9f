#pragma once

#include <algorithm>
#include <array>
#include <iterator>
#include <utility>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cutout/error.hpp"
#include "cutout/rng.hpp"
#include "cutout/tensor.hpp"

namespace cutout {

struct Dataset {
    std::vector<LabeledSample> samples;
    std::size_t class_count = 0;
    std::string name;
    Shape3 declared_shape{};  // shape reported while there are no samples (e.g. an empty raw file)

    std::size_t size() const noexcept { return samples.size(); }
    bool empty() const noexcept { return samples.empty(); }
    Shape3 shape() const { return samples.empty() ? declared_shape : samples.front().image.shape(); }

    // Throws if samples disagree on shape or a label is out of range.
    void validate() const {
        if (samples.empty()) return;
        const Shape3 s = shape();
        for (std::size_t i = 0; i < samples.size(); ++i) {
            if (samples[i].image.shape() != s)
                throw ShapeError(name + ": sample " + std::to_string(i) + " has shape " +
                                 to_string(samples[i].image.shape()) + ", expected " + to_string(s));
            if (samples[i].label >= class_count)
                throw CorruptRecordError(name + ": sample " + std::to_string(i) + " label " +
                                         std::to_string(samples[i].label) + " >= class count " +
                                         std::to_string(class_count));
        }
    }
};

/// Per-channel statistics in [0,1] pixel units. std is the population value.
struct DatasetStats {
    std::vector<double> mean;
    std::vector<double> std;

    friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

namespace format {
inline constexpr std::size_t cifar_side = 32;
inline constexpr std::size_t cifar_pixels = 3 * cifar_side * cifar_side;  // 3072
inline constexpr std::size_t cifar10_record = 1 + cifar_pixels;           // 3073
inline constexpr std::size_t cifar100_record = 2 + cifar_pixels;          // 3074
inline constexpr std::size_t stl10_side = 96;
inline constexpr std::size_t stl10_pixels = 3 * stl10_side * stl10_side;  // 27648
inline constexpr std::string_view raw_magic = "CUTRAW01";
inline constexpr std::size_t raw_header = 8 + 5 * 4;
}  // namespace format

namespace detail {

inline std::vector<float> bytes_to_unit(std::span<const std::uint8_t> bytes) {
    std::vector<float> out(bytes.size());
    for (std::size_t i = 0; i < bytes.size(); ++i) out[i] = static_cast<float>(bytes[i]) / 255.0f;
    return out;
}

inline std::uint32_t read_u32_le(const std::uint8_t* p) noexcept {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void write_u32_le(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline Dataset parse_cifar_records(std::span<const std::uint8_t> bytes, std::size_t label_bytes,
                                   std::size_t class_count, const char* name) {
    const std::size_t record = label_bytes + format::cifar_pixels;
    if (bytes.size() % record != 0)
        throw TruncatedFileError(std::string(name) + ": stream length " + std::to_string(bytes.size()) +
                                 " is not a multiple of " + std::to_string(record));
    Dataset ds{{}, class_count, name};
    const std::size_t n = bytes.size() / record;
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto rec = bytes.subspan(i * record, record);
        // CIFAR-100 stores coarse then fine; the fine label is the last label byte.
        const std::size_t label = rec[label_bytes - 1];
        if (label >= class_count)
            throw CorruptRecordError(std::string(name) + ": record " + std::to_string(i) + " has label " +
                                     std::to_string(label));
        ds.samples.push_back({Image(3, format::cifar_side, format::cifar_side,
                                    bytes_to_unit(rec.subspan(label_bytes))),
                              label});
    }
    return ds;
}

}  // namespace detail

inline Dataset parse_cifar10(std::span<const std::uint8_t> bytes) {
    return detail::parse_cifar_records(bytes, 1, 10, "cifar10");
}

inline Dataset parse_cifar100(std::span<const std::uint8_t> bytes) {
    return detail::parse_cifar_records(bytes, 2, 100, "cifar100");
}

/// STL-10 stores each channel column-major; images are transposed into
/// the planar row-major layout used everywhere else. Labels 1..10 map to 0..9.
inline Dataset parse_stl10(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
    constexpr std::size_t side = format::stl10_side;
    constexpr std::size_t plane = side * side;
    if (image_bytes.size() % format::stl10_pixels != 0)
        throw TruncatedFileError("stl10: image stream length " + std::to_string(image_bytes.size()) +
                                 " is not a multiple of " + std::to_string(format::stl10_pixels));
    const std::size_t n = image_bytes.size() / format::stl10_pixels;
    if (label_bytes.size() != n)
        throw PairingError("stl10: " + std::to_string(n) + " images but " + std::to_string(label_bytes.size()) +
                           " labels");
    Dataset ds{{}, 10, "stl10"};
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint8_t raw_label = label_bytes[i];
        if (raw_label < 1 || raw_label > 10)
            throw CorruptRecordError("stl10: image " + std::to_string(i) + " has label byte " +
                                     std::to_string(raw_label));
        auto src = image_bytes.subspan(i * format::stl10_pixels, format::stl10_pixels);
        std::vector<float> px(format::stl10_pixels);
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t x = 0; x < side; ++x)
                for (std::size_t y = 0; y < side; ++y)
                    px[c * plane + y * side + x] = static_cast<float>(src[c * plane + x * side + y]) / 255.0f;
        ds.samples.push_back({Image(3, side, side, std::move(px)), static_cast<std::size_t>(raw_label - 1)});
    }
    return ds;
}

/// Raw container: "CUTRAW01", u32le n, c, h, w, class_count, then n records
/// of (label byte, c*h*w planar pixel bytes).
inline Dataset parse_raw(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < format::raw_magic.size() ||
        std::memcmp(bytes.data(), format::raw_magic.data(), format::raw_magic.size()) != 0)
        throw FormatError("raw: bad magic");
    if (bytes.size() < format::raw_header) throw TruncatedFileError("raw: header truncated");
    const std::uint8_t* h = bytes.data() + format::raw_magic.size();
    const std::size_t n = detail::read_u32_le(h);
    const Shape3 shape{detail::read_u32_le(h + 4), detail::read_u32_le(h + 8), detail::read_u32_le(h + 12)};
    const std::size_t classes = detail::read_u32_le(h + 16);
    if (shape.channels == 0 || shape.height == 0 || shape.width == 0)
        throw FormatError("raw: zero dimension in header " + to_string(shape));
    if (classes == 0 || classes > 256) throw FormatError("raw: class count must be in 1..256");
    const std::size_t record = 1 + shape.size();
    const std::size_t payload = bytes.size() - format::raw_header;
    if (payload / record < n)
        throw TruncatedFileError("raw: header promises " + std::to_string(n) + " records, payload holds " +
                                 std::to_string(payload / record));
    if (payload != n * record)
        throw FormatError("raw: " + std::to_string(payload - n * record) + " trailing bytes after payload");
    Dataset ds{{}, classes, "raw", shape};
    ds.samples.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto rec = bytes.subspan(format::raw_header + i * record, record);
        if (rec[0] >= classes)
            throw CorruptRecordError("raw: record " + std::to_string(i) + " label " + std::to_string(rec[0]) +
                                     " >= class count " + std::to_string(classes));
        ds.samples.push_back({Image(shape, detail::bytes_to_unit(rec.subspan(1))), rec[0]});
    }
    return ds;
}

/// Encodes pixels as round(clamp(v,0,1)*255). Exact inverse of parse_raw.
inline std::vector<std::uint8_t> write_raw(const Dataset& ds) {
    if (ds.class_count == 0 || ds.class_count > 256) throw ArgumentError("raw: class count must be in 1..256");
    ds.validate();
    const Shape3 shape = ds.shape().size() == 0 ? Shape3{1, 1, 1} : ds.shape();
    std::vector<std::uint8_t> out(format::raw_magic.begin(), format::raw_magic.end());
    out.reserve(format::raw_header + ds.size() * (1 + shape.size()));
    detail::write_u32_le(out, static_cast<std::uint32_t>(ds.size()));
    detail::write_u32_le(out, static_cast<std::uint32_t>(shape.channels));
    detail::write_u32_le(out, static_cast<std::uint32_t>(shape.height));
    detail::write_u32_le(out, static_cast<std::uint32_t>(shape.width));
    detail::write_u32_le(out, static_cast<std::uint32_t>(ds.class_count));
    for (const auto& s : ds.samples) {
        out.push_back(static_cast<std::uint8_t>(s.label));
        for (float v : s.image.data())
            out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
    }
    return out;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Concatenates datasets with identical shape and class count (e.g. the five
/// CIFAR-10 training batches).
inline Dataset concat(std::vector<Dataset> parts, std::string name) {
    if (parts.empty()) return Dataset{{}, 0, std::move(name)};
    Dataset out{{}, parts.front().class_count, std::move(name)};
    for (auto& p : parts) {
        if (p.class_count != out.class_count) throw ShapeError("concat: class count mismatch");
        for (auto& s : p.samples) out.samples.push_back(std::move(s));
    }
    out.validate();
    return out;
}

/// Welford accumulation per channel.
inline DatasetStats compute_stats(const Dataset& ds) {
    if (ds.empty()) throw EmptyDatasetError("compute_stats: dataset '" + ds.name + "' is empty");
    const Shape3 shape = ds.shape();
    DatasetStats st{std::vector<double>(shape.channels, 0.0), std::vector<double>(shape.channels, 0.0)};
    for (std::size_t c = 0; c < shape.channels; ++c) {
        double mean = 0.0, m2 = 0.0;
        std::uint64_t count = 0;
        for (const auto& s : ds.samples) {
            for (float v : s.image.channel(c)) {
                ++count;
                const double d = v - mean;
                mean += d / static_cast<double>(count);
                m2 += d * (v - mean);
            }
        }
        st.mean[c] = mean;
        st.std[c] = std::sqrt(m2 / static_cast<double>(count));
        if (!(st.std[c] > 0.0))
            throw DegenerateChannelError("compute_stats: channel " + std::to_string(c) + " has zero variance");
    }
    return st;
}

/// Seeded shuffle, then the first round(n*fraction) shuffled indices become
/// the validation set. Both parts keep the shuffled order.
inline std::pair<Dataset, Dataset> split_train_val(const Dataset& ds, double val_fraction, std::uint64_t seed) {
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ArgumentError("split_train_val: fraction must be in (0,1), got " + std::to_string(val_fraction));
    RngStream rng = RngStream::derive(seed, 0, 0, RngDomain::split);
    const auto order = shuffled_indices(ds.size(), rng);
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(ds.size()) * val_fraction));
    Dataset train{{}, ds.class_count, ds.name + "-train"};
    Dataset val{{}, ds.class_count, ds.name + "-val"};
    val.samples.reserve(n_val);
    train.samples.reserve(ds.size() - n_val);
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_val ? val : train).samples.push_back(ds.samples[order[i]]);
    return {std::move(train), std::move(val)};
}

/// First n samples (or all, if fewer).
inline Dataset take(const Dataset& ds, std::size_t n) {
    Dataset out{{}, ds.class_count, ds.name, ds.declared_shape};
    const std::size_t k = std::min(n, ds.size());
    out.samples.assign(ds.samples.begin(), ds.samples.begin() + static_cast<std::ptrdiff_t>(k));
    return out;
}

} // namespace cutout
