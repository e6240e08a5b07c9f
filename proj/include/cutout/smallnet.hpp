#pragma once

// Desk-scale convolutional network trained from scratch:
//
//   conv3x3(C->c1) relu maxpool2 conv3x3(c1->c2) relu maxpool2 dropout(p) dense(->K)
//
// followed by a softmax cross-entropy head. Everything is templated on the
// scalar type so training runs in float while gradient checks reuse the same
// code in double. Layers are stateless during forward/backward: per-call
// state lives in LayerCache, which keeps inference const and shareable.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cutout/datasets.hpp"
#include "cutout/error.hpp"
#include "cutout/pipeline.hpp"
#include "cutout/rng.hpp"
#include "cutout/tensor.hpp"

namespace cutout {

template <typename T>
using Tensor = BasicTensor4<T>;

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
    if constexpr (std::is_same_v<To, From>) {
        return t;
    } else {
        std::vector<To> d(t.data().begin(), t.data().end());
        return Tensor<To>(t.n(), t.c(), t.h(), t.w(), std::move(d));
    }
}

template <typename T>
struct ParamTensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<T> values;
    bool decay = true;  // weight decay applies to weights, not biases

    std::size_t size() const noexcept { return values.size(); }
};

/// Per-call scratch a layer needs for its backward pass.
template <typename T>
struct LayerCache {
    Tensor<T> input;
    std::size_t batch = 0;
    Shape3 shape{};  // input sample shape, for layers that do not keep the input
    std::vector<T> buffer;
    std::vector<std::uint32_t> indices;
};

template <typename T>
class Layer {
public:
    virtual ~Layer() = default;

    virtual std::string kind() const = 0;
    virtual Shape3 output_shape(const Shape3& in) const = 0;
    virtual Tensor<T> forward(const Tensor<T>& x, bool train, RngStream* rng, LayerCache<T>* cache) const = 0;
    /// Returns dL/dx; writes parameter gradients (overwriting) into `grads`,
    /// one vector per entry of params().
    virtual Tensor<T> backward(const Tensor<T>& grad_out, const LayerCache<T>& cache,
                               std::span<std::vector<T>> grads) const = 0;
    virtual std::span<ParamTensor<T>> params() { return {}; }
    virtual std::span<const ParamTensor<T>> params() const { return {}; }
    virtual std::unique_ptr<Layer> clone() const = 0;
};

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

/// Stride-1 convolution with odd square kernel and "same" zero padding.
/// Lowered to a single GEMM per batch through im2col.
template <typename T>
class Conv2d final : public Layer<T> {
public:
    Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel)
        : in_(in_channels), out_(out_channels), k_(kernel) {
        if (kernel % 2 == 0) throw ArgumentError("conv kernel must be odd");
        params_[0] = {"weight", {out_, in_, k_, k_}, std::vector<T>(out_ * in_ * k_ * k_, T(0)), true};
        params_[1] = {"bias", {out_}, std::vector<T>(out_, T(0)), false};
    }

    std::string kind() const override { return "conv"; }

    Shape3 output_shape(const Shape3& in) const override {
        if (in.channels != in_)
            throw ShapeError("conv expects " + std::to_string(in_) + " channels, got " + to_string(in));
        return {out_, in.height, in.width};
    }

    Tensor<T> forward(const Tensor<T>& x, bool, RngStream*, LayerCache<T>* cache) const override {
        output_shape(x.sample_shape());
        const std::size_t N = x.n(), H = x.h(), W = x.w(), HW = H * W, R = in_ * k_ * k_;
        std::vector<T> cols(R * N * HW);
        im2col(x, cols);
        Eigen::Map<const RowMatrix<T>> Wm(params_[0].values.data(), out_, R);
        Eigen::Map<const RowMatrix<T>> C(cols.data(), R, N * HW);
        RowMatrix<T> Y = Wm * C;
        Tensor<T> y(N, out_, H, W);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < out_; ++o) {
                const T b = params_[1].values[o];
                const T* src = Y.data() + o * N * HW + n * HW;
                T* dst = &y(n, o, 0, 0);
                for (std::size_t p = 0; p < HW; ++p) dst[p] = src[p] + b;
            }
        if (cache) cache->buffer = std::move(cols);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache,
                       std::span<std::vector<T>> grads) const override {
        const std::size_t N = g.n(), H = g.h(), W = g.w(), HW = H * W, R = in_ * k_ * k_;
        RowMatrix<T> D(out_, N * HW);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < out_; ++o) {
                const T* src = &g(n, o, 0, 0);
                std::copy(src, src + HW, D.data() + o * N * HW + n * HW);
            }
        Eigen::Map<const RowMatrix<T>> C(cache.buffer.data(), R, N * HW);
        Eigen::Map<const RowMatrix<T>> Wm(params_[0].values.data(), out_, R);
        grads[0].resize(out_ * R);
        Eigen::Map<RowMatrix<T>> gW(grads[0].data(), out_, R);
        gW.noalias() = D * C.transpose();
        grads[1].resize(out_);
        for (std::size_t o = 0; o < out_; ++o) grads[1][o] = D.row(static_cast<Eigen::Index>(o)).sum();
        RowMatrix<T> dcols = Wm.transpose() * D;
        Tensor<T> dx(N, in_, H, W);
        col2im(dcols.data(), dx);
        return dx;
    }

    std::span<ParamTensor<T>> params() override { return params_; }
    std::span<const ParamTensor<T>> params() const override { return params_; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2d>(*this); }

private:
    // cols is R x (N*H*W) row-major, row r = (c*k + ky)*k + kx.
    void im2col(const Tensor<T>& x, std::vector<T>& cols) const {
        const std::size_t N = x.n(), H = x.h(), W = x.w(), HW = H * W, P = k_ / 2;
        T* out = cols.data();
        for (std::size_t c = 0; c < in_; ++c)
            for (std::size_t ky = 0; ky < k_; ++ky)
                for (std::size_t kx = 0; kx < k_; ++kx) {
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t y = 0; y < H; ++y) {
                            T* row = out + n * HW + y * W;
                            const auto sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(P);
                            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) {
                                std::fill(row, row + W, T(0));
                                continue;
                            }
                            const T* src = &x(n, c, static_cast<std::size_t>(sy), 0);
                            for (std::size_t xx = 0; xx < W; ++xx) {
                                const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(P);
                                row[xx] = (sx < 0 || sx >= static_cast<std::ptrdiff_t>(W)) ? T(0) : src[sx];
                            }
                        }
                    out += N * HW;
                }
    }

    void col2im(const T* cols, Tensor<T>& dx) const {
        const std::size_t N = dx.n(), H = dx.h(), W = dx.w(), HW = H * W, P = k_ / 2;
        for (std::size_t c = 0; c < in_; ++c)
            for (std::size_t ky = 0; ky < k_; ++ky)
                for (std::size_t kx = 0; kx < k_; ++kx) {
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t y = 0; y < H; ++y) {
                            const auto sy = static_cast<std::ptrdiff_t>(y + ky) - static_cast<std::ptrdiff_t>(P);
                            if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(H)) continue;
                            const T* row = cols + n * HW + y * W;
                            T* dst = &dx(n, c, static_cast<std::size_t>(sy), 0);
                            for (std::size_t xx = 0; xx < W; ++xx) {
                                const auto sx = static_cast<std::ptrdiff_t>(xx + kx) - static_cast<std::ptrdiff_t>(P);
                                if (sx >= 0 && sx < static_cast<std::ptrdiff_t>(W)) dst[sx] += row[xx];
                            }
                        }
                    cols += N * HW;
                }
    }

    std::size_t in_, out_, k_;
    std::array<ParamTensor<T>, 2> params_;
};

template <typename T>
class Relu final : public Layer<T> {
public:
    std::string kind() const override { return "relu"; }
    Shape3 output_shape(const Shape3& in) const override { return in; }

    Tensor<T> forward(const Tensor<T>& x, bool, RngStream*, LayerCache<T>* cache) const override {
        Tensor<T> y = x;
        for (T& v : y.data()) v = v > T(0) ? v : T(0);
        if (cache) cache->input = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache, std::span<std::vector<T>>) const override {
        Tensor<T> dx = g;
        auto in = cache.input.data();
        auto d = dx.data();
        for (std::size_t i = 0; i < d.size(); ++i)
            if (!(in[i] > T(0))) d[i] = T(0);
        return dx;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Relu>(*this); }
};

/// 2x2 max pooling, stride 2. Ties resolve to the first element in
/// row-major window order.
template <typename T>
class MaxPool2 final : public Layer<T> {
public:
    std::string kind() const override { return "maxpool"; }

    Shape3 output_shape(const Shape3& in) const override {
        if (in.height % 2 != 0 || in.width % 2 != 0)
            throw ShapeError("maxpool2 needs even spatial dims, got " + to_string(in));
        return {in.channels, in.height / 2, in.width / 2};
    }

    Tensor<T> forward(const Tensor<T>& x, bool, RngStream*, LayerCache<T>* cache) const override {
        const Shape3 os = output_shape(x.sample_shape());
        Tensor<T> y(x.n(), os.channels, os.height, os.width);
        std::vector<std::uint32_t> idx(y.size());
        std::size_t k = 0;
        for (std::size_t n = 0; n < x.n(); ++n)
            for (std::size_t c = 0; c < x.c(); ++c)
                for (std::size_t oy = 0; oy < os.height; ++oy)
                    for (std::size_t ox = 0; ox < os.width; ++ox, ++k) {
                        std::size_t best_y = 2 * oy, best_x = 2 * ox;
                        T best = x(n, c, best_y, best_x);
                        for (std::size_t dy = 0; dy < 2; ++dy)
                            for (std::size_t dx = 0; dx < 2; ++dx) {
                                const T v = x(n, c, 2 * oy + dy, 2 * ox + dx);
                                if (v > best) {
                                    best = v;
                                    best_y = 2 * oy + dy;
                                    best_x = 2 * ox + dx;
                                }
                            }
                        y.data()[k] = best;
                        idx[k] = static_cast<std::uint32_t>(best_y * x.w() + best_x);
                    }
        if (cache) {
            cache->batch = x.n();
            cache->shape = x.sample_shape();
            cache->indices = std::move(idx);
        }
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache, std::span<std::vector<T>>) const override {
        const Shape3& in = cache.shape;
        Tensor<T> dx(cache.batch, in.channels, in.height, in.width);
        const std::size_t plane_out = g.h() * g.w(), plane_in = in.height * in.width;
        for (std::size_t k = 0; k < g.size(); ++k) {
            const std::size_t nc = k / plane_out;
            dx.data()[nc * plane_in + cache.indices[k]] += g.data()[k];
        }
        return dx;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2>(*this); }
};

/// Inverted dropout: in train mode each unit is kept when a uniform draw is
/// >= p and then scaled by 1/(1-p); evaluation is the identity.
template <typename T>
class Dropout final : public Layer<T> {
public:
    explicit Dropout(double p) : p_(p) {
        if (!(p >= 0.0 && p < 1.0)) throw ArgumentError("dropout p must be in [0,1)");
    }

    double p() const noexcept { return p_; }
    std::string kind() const override { return "dropout"; }
    Shape3 output_shape(const Shape3& in) const override { return in; }

    Tensor<T> forward(const Tensor<T>& x, bool train, RngStream* rng, LayerCache<T>* cache) const override {
        if (!train || p_ == 0.0) {
            if (cache) cache->buffer.clear();
            return x;
        }
        if (!rng) throw ArgumentError("dropout in train mode needs an rng stream");
        const T scale = T(1) / static_cast<T>(1.0 - p_);
        std::vector<T> mask(x.size());
        for (T& m : mask) m = rng->uniform01_double() >= p_ ? scale : T(0);
        Tensor<T> y = x;
        for (std::size_t i = 0; i < mask.size(); ++i) y.data()[i] *= mask[i];
        if (cache) cache->buffer = std::move(mask);
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache, std::span<std::vector<T>>) const override {
        if (cache.buffer.empty()) return g;
        Tensor<T> dx = g;
        for (std::size_t i = 0; i < cache.buffer.size(); ++i) dx.data()[i] *= cache.buffer[i];
        return dx;
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dropout>(*this); }

private:
    double p_;
};

template <typename T>
class Flatten final : public Layer<T> {
public:
    std::string kind() const override { return "flatten"; }
    Shape3 output_shape(const Shape3& in) const override { return {in.size(), 1, 1}; }

    Tensor<T> forward(const Tensor<T>& x, bool, RngStream*, LayerCache<T>* cache) const override {
        if (cache) {
            cache->batch = x.n();
            cache->shape = x.sample_shape();
        }
        std::vector<T> d(x.data().begin(), x.data().end());
        return Tensor<T>(x.n(), x.sample_size(), 1, 1, std::move(d));
    }

    Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache, std::span<std::vector<T>>) const override {
        std::vector<T> d(g.data().begin(), g.data().end());
        return Tensor<T>(cache.batch, cache.shape.channels, cache.shape.height, cache.shape.width, std::move(d));
    }

    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten>(*this); }
};

/// Fully connected layer on (N, F, 1, 1) input; weight is (out x F) row-major.
template <typename T>
class Dense final : public Layer<T> {
public:
    Dense(std::size_t in_features, std::size_t out_features) : in_(in_features), out_(out_features) {
        params_[0] = {"weight", {out_, in_}, std::vector<T>(out_ * in_, T(0)), true};
        params_[1] = {"bias", {out_}, std::vector<T>(out_, T(0)), false};
    }

    std::string kind() const override { return "dense"; }

    Shape3 output_shape(const Shape3& in) const override {
        if (in.size() != in_)
            throw ShapeError("dense expects " + std::to_string(in_) + " features, got " + to_string(in));
        return {out_, 1, 1};
    }

    Tensor<T> forward(const Tensor<T>& x, bool, RngStream*, LayerCache<T>* cache) const override {
        output_shape(x.sample_shape());
        const std::size_t N = x.n();
        Eigen::Map<const RowMatrix<T>> X(x.data().data(), N, in_);
        Eigen::Map<const RowMatrix<T>> Wm(params_[0].values.data(), out_, in_);
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> b(params_[1].values.data(), out_);
        Tensor<T> y(N, out_, 1, 1);
        Eigen::Map<RowMatrix<T>> Y(y.data().data(), N, out_);
        Y.noalias() = X * Wm.transpose();
        Y.rowwise() += b;
        if (cache) cache->input = x;
        return y;
    }

    Tensor<T> backward(const Tensor<T>& g, const LayerCache<T>& cache,
                       std::span<std::vector<T>> grads) const override {
        const auto& x = cache.input;
        const std::size_t N = x.n();
        Eigen::Map<const RowMatrix<T>> X(x.data().data(), N, in_);
        Eigen::Map<const RowMatrix<T>> G(g.data().data(), N, out_);
        Eigen::Map<const RowMatrix<T>> Wm(params_[0].values.data(), out_, in_);
        grads[0].resize(out_ * in_);
        Eigen::Map<RowMatrix<T>> gW(grads[0].data(), out_, in_);
        gW.noalias() = G.transpose() * X;
        grads[1].resize(out_);
        for (std::size_t o = 0; o < out_; ++o) grads[1][o] = G.col(static_cast<Eigen::Index>(o)).sum();
        Tensor<T> dx(x.n(), x.c(), x.h(), x.w());
        Eigen::Map<RowMatrix<T>> DX(dx.data().data(), N, in_);
        DX.noalias() = G * Wm;
        return dx;
    }

    std::span<ParamTensor<T>> params() override { return params_; }
    std::span<const ParamTensor<T>> params() const override { return params_; }
    std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

private:
    std::size_t in_, out_;
    std::array<ParamTensor<T>, 2> params_;
};

// ---------------------------------------------------------------------------
// Network container
// ---------------------------------------------------------------------------

/// Fixed architecture parameters; also the checkpoint header.
struct ArchDescriptor {
    std::uint32_t in_channels = 3;
    std::uint32_t in_height = 32;
    std::uint32_t in_width = 32;
    std::uint32_t conv1_channels = 32;
    std::uint32_t conv2_channels = 64;
    std::uint32_t class_count = 10;
    std::uint32_t kernel = 3;
    float dropout_p = 0.3f;

    Shape3 input_shape() const { return {in_channels, in_height, in_width}; }
    friend bool operator==(const ArchDescriptor&, const ArchDescriptor&) = default;
};

template <typename T>
class Sequential {
public:
    Sequential() = default;
    Sequential(Shape3 input, std::size_t class_count) : input_(input), classes_(class_count) {}

    Sequential(const Sequential& other) : input_(other.input_), classes_(other.classes_), names_(other.names_) {
        for (const auto& l : other.layers_) layers_.push_back(l->clone());
    }
    Sequential& operator=(const Sequential& other) {
        if (this != &other) {
            Sequential tmp(other);
            swap(tmp);
        }
        return *this;
    }
    Sequential(Sequential&&) noexcept = default;
    Sequential& operator=(Sequential&&) noexcept = default;

    void swap(Sequential& o) noexcept {
        std::swap(input_, o.input_);
        std::swap(classes_, o.classes_);
        std::swap(names_, o.names_);
        std::swap(layers_, o.layers_);
    }

    Sequential& add(std::string name, std::unique_ptr<Layer<T>> layer) {
        Shape3 s = output_shape();
        layer->output_shape(s);  // validate chain
        names_.push_back(std::move(name));
        layers_.push_back(std::move(layer));
        return *this;
    }

    Shape3 input_shape() const noexcept { return input_; }
    std::size_t class_count() const noexcept { return classes_; }
    std::size_t layer_count() const noexcept { return layers_.size(); }
    const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }
    Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
    const std::string& layer_name(std::size_t i) const { return names_.at(i); }

    std::optional<std::size_t> find_layer(std::string_view name) const {
        for (std::size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return i;
        return std::nullopt;
    }

    Shape3 output_shape() const {
        Shape3 s = input_;
        for (const auto& l : layers_) s = l->output_shape(s);
        return s;
    }

    Shape3 layer_output_shape(std::size_t i) const {
        Shape3 s = input_;
        for (std::size_t k = 0; k <= i; ++k) s = layers_.at(k)->output_shape(s);
        return s;
    }

    /// All parameter tensors in layer order.
    std::vector<ParamTensor<T>*> parameters() {
        std::vector<ParamTensor<T>*> out;
        for (auto& l : layers_)
            for (auto& p : l->params()) out.push_back(&p);
        return out;
    }
    std::vector<const ParamTensor<T>*> parameters() const {
        std::vector<const ParamTensor<T>*> out;
        for (const auto& l : layers_)
            for (const auto& p : std::as_const(*l).params()) out.push_back(&p);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto* p : parameters()) n += p->size();
        return n;
    }

private:
    Shape3 input_{};
    std::size_t classes_ = 0;
    std::vector<std::string> names_;
    std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// The fixed desk-scale architecture. Layer names: conv1 relu1 pool1 conv2
/// relu2 pool2 dropout flatten dense.
template <typename T>
class SmallCnn : public Sequential<T> {
public:
    SmallCnn() = default;

    explicit SmallCnn(const ArchDescriptor& arch) : Sequential<T>(arch.input_shape(), arch.class_count), arch_(arch) {
        if (arch.in_height % 4 != 0 || arch.in_width % 4 != 0)
            throw ArgumentError("SmallCnn input height/width must be multiples of 4");
        if (arch.class_count < 1) throw ArgumentError("SmallCnn needs at least one class");
        this->add("conv1", std::make_unique<Conv2d<T>>(arch.in_channels, arch.conv1_channels, arch.kernel));
        this->add("relu1", std::make_unique<Relu<T>>());
        this->add("pool1", std::make_unique<MaxPool2<T>>());
        this->add("conv2", std::make_unique<Conv2d<T>>(arch.conv1_channels, arch.conv2_channels, arch.kernel));
        this->add("relu2", std::make_unique<Relu<T>>());
        this->add("pool2", std::make_unique<MaxPool2<T>>());
        this->add("dropout", std::make_unique<Dropout<T>>(arch.dropout_p));
        this->add("flatten", std::make_unique<Flatten<T>>());
        const std::size_t features =
            std::size_t{arch.conv2_channels} * (arch.in_height / 4) * (arch.in_width / 4);
        this->add("dense", std::make_unique<Dense<T>>(features, arch.class_count));
    }

    const ArchDescriptor& arch() const noexcept { return arch_; }

private:
    ArchDescriptor arch_{};
};

/// Kaiming fan-in initialization: weights ~ N(0, 2/fan_in), biases zero.
/// fan_in is the product of all weight dims except the first.
template <typename T>
void kaiming_init(Sequential<T>& net, std::uint64_t seed) {
    RngStream rng = RngStream::derive(seed, 0, 0, RngDomain::init);
    for (auto* p : net.parameters()) {
        if (!p->decay) {
            std::fill(p->values.begin(), p->values.end(), T(0));
            continue;
        }
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < p->shape.size(); ++i) fan_in *= p->shape[i];
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (T& v : p->values) v = static_cast<T>(rng.normal() * sd);
    }
}

template <typename T>
SmallCnn<T> make_small_cnn(const ArchDescriptor& arch, std::uint64_t seed) {
    SmallCnn<T> net(arch);
    kaiming_init(net, seed);
    return net;
}

template <typename T>
void zero_parameters(Sequential<T>& net) {
    for (auto* p : net.parameters()) std::fill(p->values.begin(), p->values.end(), T(0));
}

// ---------------------------------------------------------------------------
// Forward / loss / backward
// ---------------------------------------------------------------------------

template <typename T>
struct NamedActivation {
    std::string layer;
    Tensor<T> values;
};

template <typename T>
struct ForwardResult {
    Tensor<T> logits;  // (N, K, 1, 1)
    std::vector<NamedActivation<T>> activations;  // every relu output, then "logits"

    const Tensor<T>* activation(std::string_view name) const {
        for (const auto& a : activations)
            if (a.layer == name) return &a.values;
        return nullptr;
    }
};

namespace detail {

template <typename T>
void check_input(const Sequential<T>& net, const Tensor<T>& batch) {
    if (batch.sample_shape() != net.input_shape())
        throw ShapeError("network expects input " + to_string(net.input_shape()) + ", got " +
                         to_string(batch.sample_shape()));
    if (batch.n() == 0) throw EmptyBatchError("empty batch");
}

template <typename T>
std::string first_nonfinite_layer(const Sequential<T>& net, const std::vector<Tensor<T>>& outputs) {
    for (std::size_t i = 0; i < outputs.size(); ++i)
        if (!outputs[i].finite()) return net.layer_name(i);
    return "loss";
}

}  // namespace detail

/// Runs the network. Dropout is active only when `train` is set (and then
/// `rng` is required).
template <typename T>
ForwardResult<T> forward(const Sequential<T>& net, const Tensor<T>& batch, bool train, RngStream* rng = nullptr) {
    detail::check_input(net, batch);
    ForwardResult<T> out;
    Tensor<T> x = batch;
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        x = net.layer(i).forward(x, train, rng, nullptr);
        if (net.layer(i).kind() == "relu") out.activations.push_back({net.layer_name(i), x});
    }
    out.activations.push_back({"logits", x});
    out.logits = std::move(x);
    return out;
}

template <typename T>
struct LossAndGrads {
    double loss = 0.0;           // mean cross-entropy + weight-decay term
    double cross_entropy = 0.0;  // mean cross-entropy alone
    std::size_t correct = 0;     // argmax hits in this batch
    std::vector<std::vector<T>> grads;  // aligned with net.parameters()
};

template <typename T>
std::size_t argmax_row(std::span<const T> row) {
    return static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
}

/// Mean softmax cross-entropy plus (weight_decay/2)*sum ||w||^2 over
/// weight tensors, and its gradient by backpropagation. The decay
/// gradient weight_decay*w is folded into the returned weight gradients.
template <typename T>
LossAndGrads<T> loss_and_grads(const Sequential<T>& net, const Tensor<T>& batch, std::span<const std::size_t> labels,
                               double weight_decay, RngStream* dropout_rng = nullptr) {
    detail::check_input(net, batch);
    const std::size_t N = batch.n(), K = net.class_count();
    if (labels.size() != N) throw ShapeError("label count does not match batch size");
    for (auto l : labels)
        if (l >= K) throw ArgumentError("label " + std::to_string(l) + " >= class count " + std::to_string(K));
    const bool train = dropout_rng != nullptr;

    std::vector<LayerCache<T>> caches(net.layer_count());
    std::vector<Tensor<T>> outputs;
    outputs.reserve(net.layer_count());
    Tensor<T> x = batch;
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        x = net.layer(i).forward(x, train, dropout_rng, &caches[i]);
        outputs.push_back(x);
    }
    const Tensor<T>& logits = outputs.back();
    if (logits.sample_size() != K) throw ShapeError("network output does not match class count");

    LossAndGrads<T> r;
    Tensor<T> dlogits(N, K, 1, 1);
    double ce = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
        auto row = logits.sample(n);
        const T mx = *std::max_element(row.begin(), row.end());
        double z = 0.0;
        for (T v : row) z += std::exp(static_cast<double>(v - mx));
        const double log_z = std::log(z) + static_cast<double>(mx);
        ce += log_z - static_cast<double>(row[labels[n]]);
        if (argmax_row<T>(row) == labels[n]) ++r.correct;
        auto d = dlogits.sample(n);
        for (std::size_t k = 0; k < K; ++k) {
            const double p = std::exp(static_cast<double>(row[k]) - log_z);
            d[k] = static_cast<T>((p - (k == labels[n] ? 1.0 : 0.0)) / static_cast<double>(N));
        }
    }
    r.cross_entropy = ce / static_cast<double>(N);
    double decay = 0.0;
    for (const auto* p : net.parameters())
        if (p->decay)
            for (T v : p->values) decay += static_cast<double>(v) * static_cast<double>(v);
    r.loss = r.cross_entropy + 0.5 * weight_decay * decay;
    if (!std::isfinite(r.loss))
        throw NumericError("non-finite loss at layer " + detail::first_nonfinite_layer(net, outputs));

    // Backward pass, collecting per-layer gradients in parameter order.
    std::vector<std::vector<std::vector<T>>> per_layer(net.layer_count());
    Tensor<T> g = std::move(dlogits);
    for (std::size_t i = net.layer_count(); i-- > 0;) {
        per_layer[i].resize(net.layer(i).params().size());
        g = net.layer(i).backward(g, caches[i], per_layer[i]);
    }
    for (std::size_t i = 0; i < net.layer_count(); ++i) {
        auto ps = net.layer(i).params();
        for (std::size_t j = 0; j < ps.size(); ++j) {
            auto& grad = per_layer[i][j];
            if (ps[j].decay && weight_decay != 0.0)
                for (std::size_t k = 0; k < grad.size(); ++k)
                    grad[k] += static_cast<T>(weight_decay) * ps[j].values[k];
            r.grads.push_back(std::move(grad));
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

template <typename T>
struct OptimizerState {
    std::vector<std::vector<T>> velocity;

    static OptimizerState zeros_like(const Sequential<T>& net) {
        OptimizerState s;
        for (const auto* p : net.parameters()) s.velocity.emplace_back(p->size(), T(0));
        return s;
    }
};

/// v <- mu*v + g; w <- w - lr*(g + mu*v)   (Nesterov)
/// v <- mu*v + g; w <- w - lr*v            (classical, nesterov = false)
/// Weight decay is expected to be folded into g already.
template <typename T>
void sgd_nesterov_step(std::span<T> w, std::span<const T> g, std::span<T> v, double lr, double momentum,
                       bool nesterov = true) {
    if (w.size() != g.size() || w.size() != v.size()) throw ShapeError("sgd step: size mismatch");
    const T mu = static_cast<T>(momentum), eta = static_cast<T>(lr);
    for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = mu * v[i] + g[i];
        w[i] -= eta * (nesterov ? g[i] + mu * v[i] : v[i]);
    }
}

template <typename T>
void sgd_nesterov_step(Sequential<T>& net, const std::vector<std::vector<T>>& grads, OptimizerState<T>& state,
                       double lr, double momentum, bool nesterov = true) {
    auto params = net.parameters();
    if (grads.size() != params.size() || state.velocity.size() != params.size())
        throw ShapeError("sgd step: parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i)
        sgd_nesterov_step<T>(params[i]->values, grads[i], state.velocity[i], lr, momentum, nesterov);
}

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 128;
    double lr0 = 0.1;
    std::vector<std::size_t> milestones{60, 120, 160};
    double factor = 5.0;
    double momentum = 0.9;
    bool nesterov = true;
    double weight_decay = 5e-4;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(factor > 1.0)) throw ArgumentError("factor must be > 1");
        if (!(momentum >= 0.0 && momentum < 1.0)) throw ArgumentError("momentum must be in [0,1)");
        if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
        if (!(lr0 >= 0.0)) throw ArgumentError("lr0 must be >= 0");
        if (!(weight_decay >= 0.0)) throw ArgumentError("weight_decay must be >= 0");
        for (std::size_t i = 1; i < milestones.size(); ++i)
            if (milestones[i] <= milestones[i - 1]) throw ArgumentError("milestones must be strictly increasing");
    }

    /// CIFAR recipe: 200 epochs, lr 0.1 divided by 5 at 60/120/160.
    static TrainConfig cifar() { return {}; }
    /// SVHN recipe: 160 epochs, lr 0.01 divided by 10 at 80/120.
    static TrainConfig svhn() {
        TrainConfig c;
        c.epochs = 160;
        c.lr0 = 0.01;
        c.milestones = {80, 120};
        c.factor = 10.0;
        return c;
    }
    /// STL-10 recipe: 1000 epochs, lr 0.1 divided by 5 at 300/400/600/800.
    static TrainConfig stl10() {
        TrainConfig c;
        c.epochs = 1000;
        c.milestones = {300, 400, 600, 800};
        return c;
    }
};

/// lr0 / factor^(number of milestones <= epoch)
inline double lr_at_epoch(const TrainConfig& cfg, std::size_t epoch) {
    const auto passed = std::count_if(cfg.milestones.begin(), cfg.milestones.end(),
                                      [&](std::size_t m) { return m <= epoch; });
    return cfg.lr0 / std::pow(cfg.factor, static_cast<double>(passed));
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double lr = 0.0;
    double train_loss = 0.0;  // sample-weighted mean of the batch objectives
    double train_acc = 0.0;   // on the augmented batches, dropout active
    double eval_acc = 0.0;

    friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainReport {
    std::vector<EpochRecord> epochs;

    static constexpr std::string_view csv_header = "epoch,lr,train_loss,train_acc,eval_acc";

    static std::string csv_row(const EpochRecord& r) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g", r.epoch, r.lr, r.train_loss, r.train_acc,
                      r.eval_acc);
        return buf;
    }

    std::string to_csv() const {
        std::string out(csv_header);
        out += '\n';
        for (const auto& r : epochs) out += csv_row(r) + '\n';
        return out;
    }

    friend bool operator==(const TrainReport&, const TrainReport&) = default;
};

/// Fraction of samples whose argmax logit equals the label. Only the
/// chain's normalization stages are applied; dropout is off.
template <typename T>
double evaluate(const Sequential<T>& net, const Dataset& ds, std::size_t batch_size,
                const TransformChain& chain = TransformChain{}) {
    if (ds.empty()) throw EmptyDatasetError("evaluate: dataset '" + ds.name + "' is empty");
    if (batch_size == 0) throw ArgumentError("evaluate: batch_size must be >= 1");
    const TransformChain eval = chain.eval_chain();
    std::size_t correct = 0;
    std::vector<LabeledSample> buf;
    for (std::size_t begin = 0; begin < ds.size(); begin += batch_size) {
        const std::size_t end = std::min(begin + batch_size, ds.size());
        buf.clear();
        for (std::size_t i = begin; i < end; ++i) buf.push_back(apply_chain(ds.samples[i], eval, 0, i, 0));
        Batch b = batch_from_samples(buf);
        auto fr = forward(net, tensor_cast<T>(b.inputs), false);
        for (std::size_t n = 0; n < b.labels.size(); ++n)
            if (argmax_row<T>(fr.logits.sample(n)) == b.labels[n]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

struct TrainOptions {
    std::size_t workers = 1;
    std::size_t queue_capacity = 4;
    std::function<void(const EpochRecord&)> on_epoch;  // called after each epoch
};

/// Trains in place. Batches come from the parallel loader (bit-identical for
/// any worker count); the optimizer runs single-threaded in batch order.
/// Dropout masks use the stream derived from (seed, epoch, batch index).
template <typename T>
TrainReport train(Sequential<T>& net, const Dataset& train_ds, const TransformChain& chain, const TrainConfig& cfg,
                  const Dataset& eval_ds, const TrainOptions& opts = {}) {
    cfg.validate();
    if (train_ds.empty() || eval_ds.empty()) throw EmptyDatasetError("train: datasets must be non-empty");
    if (chain.output_shape(train_ds.shape()) != net.input_shape())
        throw ShapeError("train: chain output does not match network input");
    LoaderConfig lc{cfg.batch_size, cfg.seed, std::max<std::size_t>(opts.workers, 1),
                    std::max<std::size_t>(opts.queue_capacity, 1), false};
    OptimizerState<T> state = OptimizerState<T>::zeros_like(net);
    TrainReport report;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg, epoch);
        double loss_sum = 0.0;
        std::size_t correct = 0, seen = 0, batch_index = 0;
        EpochLoader loader(train_ds, chain, lc, epoch);
        while (auto batch = loader.next()) {
            RngStream drop = RngStream::derive(cfg.seed, epoch, batch_index++, RngDomain::dropout);
            LossAndGrads<T> lg;
            try {
                lg = loss_and_grads(net, tensor_cast<T>(batch->inputs), batch->labels, cfg.weight_decay, &drop);
            } catch (const NumericError& e) {
                throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ")",
                                   static_cast<int>(epoch));
            }
            sgd_nesterov_step(net, lg.grads, state, lr, cfg.momentum, cfg.nesterov);
            loss_sum += lg.loss * static_cast<double>(batch->labels.size());
            correct += lg.correct;
            seen += batch->labels.size();
        }
        EpochRecord rec{epoch, lr, loss_sum / static_cast<double>(seen),
                        static_cast<double>(correct) / static_cast<double>(seen),
                        evaluate(net, eval_ds, cfg.batch_size, chain)};
        report.epochs.push_back(rec);
        if (opts.on_epoch) opts.on_epoch(rec);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace format {
inline constexpr std::string_view checkpoint_magic = "CUTNET01";
}

/// "CUTNET01", descriptor as seven u32le fields (in_c, in_h, in_w, c1, c2,
/// classes, kernel) plus dropout p as f32le, then every parameter tensor in
/// layer order as raw f32le.
template <typename T>
std::vector<std::uint8_t> save_checkpoint(const SmallCnn<T>& net) {
    std::vector<std::uint8_t> out(format::checkpoint_magic.begin(), format::checkpoint_magic.end());
    const auto& a = net.arch();
    for (std::uint32_t v : {a.in_channels, a.in_height, a.in_width, a.conv1_channels, a.conv2_channels,
                            a.class_count, a.kernel})
        detail::write_u32_le(out, v);
    auto put_f32 = [&](float f) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail::write_u32_le(out, bits);
    };
    put_f32(a.dropout_p);
    for (const auto* p : net.parameters())
        for (T v : p->values) put_f32(static_cast<float>(v));
    return out;
}

template <typename T>
SmallCnn<T> load_checkpoint(std::span<const std::uint8_t> bytes) {
    constexpr std::size_t header = 8 + 7 * 4 + 4;
    if (bytes.size() < 8 || std::memcmp(bytes.data(), format::checkpoint_magic.data(), 8) != 0)
        throw FormatError("checkpoint: bad magic");
    if (bytes.size() < header) throw TruncatedFileError("checkpoint: header truncated");
    const std::uint8_t* p = bytes.data() + 8;
    auto get_f32 = [](const std::uint8_t* q) {
        const std::uint32_t bits = detail::read_u32_le(q);
        float f;
        std::memcpy(&f, &bits, 4);
        return f;
    };
    ArchDescriptor a;
    a.in_channels = detail::read_u32_le(p);
    a.in_height = detail::read_u32_le(p + 4);
    a.in_width = detail::read_u32_le(p + 8);
    a.conv1_channels = detail::read_u32_le(p + 12);
    a.conv2_channels = detail::read_u32_le(p + 16);
    a.class_count = detail::read_u32_le(p + 20);
    a.kernel = detail::read_u32_le(p + 24);
    a.dropout_p = get_f32(p + 28);
    SmallCnn<T> net(a);
    std::size_t need = header;
    for (auto* t : net.parameters()) need += 4 * t->size();
    if (bytes.size() < need) throw TruncatedFileError("checkpoint: parameter payload truncated");
    if (bytes.size() > need) throw FormatError("checkpoint: trailing bytes");
    const std::uint8_t* q = bytes.data() + header;
    for (auto* t : net.parameters())
        for (T& v : t->values) {
            v = static_cast<T>(get_f32(q));
            q += 4;
        }
    return net;
}

} // namespace cutout
