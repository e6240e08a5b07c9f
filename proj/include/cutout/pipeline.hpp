#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <exception>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <unordered_map>
#include <variant>
#include <vector>

#include "cutout/augment.hpp"
#include "cutout/datasets.hpp"
#include "cutout/rng.hpp"
#include "cutout/tensor.hpp"

namespace cutout {

// ---------------------------------------------------------------------------
// Transform stages
// ---------------------------------------------------------------------------

struct NormalizeStage {
    DatasetStats stats;
};

struct PadStage {
    std::size_t pad = 0;
};

struct CropStage {
    std::size_t height = 0;
    std::size_t width = 0;
};

struct HFlipStage {};

struct CutoutStage {
    CutoutParams params;
};

/// Feature maps for targeted cutout, keyed by dataset sample index.
struct FeatureMapBank {
    std::size_t height = 0;
    std::size_t width = 0;
    std::unordered_map<std::size_t, std::vector<float>> maps;
};

struct TargetedCutoutStage {
    std::shared_ptr<const FeatureMapBank> bank;
};

using Transform = std::variant<NormalizeStage, PadStage, CropStage, HFlipStage, CutoutStage, TargetedCutoutStage>;

inline std::string stage_name(const Transform& t) {
    return std::visit(
        [](const auto& s) -> std::string {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, NormalizeStage>) return "normalize";
            else if constexpr (std::is_same_v<S, PadStage>) return "pad" + std::to_string(s.pad);
            else if constexpr (std::is_same_v<S, CropStage>)
                return "crop" + std::to_string(s.height) + "x" + std::to_string(s.width);
            else if constexpr (std::is_same_v<S, HFlipStage>) return "hflip";
            else if constexpr (std::is_same_v<S, CutoutStage>)
                return std::string("cutout") + std::to_string(s.params.length) + "/" + to_string(s.params.mode);
            else return "targeted_cutout";
        },
        t);
}

namespace detail {

inline Shape3 stage_output_shape(const Transform& t, const Shape3& in) {
    return std::visit(
        [&](const auto& s) -> Shape3 {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, NormalizeStage>) {
                if (s.stats.mean.size() != in.channels || s.stats.std.size() != in.channels)
                    throw ShapeError("stats cover " + std::to_string(s.stats.mean.size()) + " channels, input has " +
                                     std::to_string(in.channels));
                return in;
            } else if constexpr (std::is_same_v<S, PadStage>) {
                return {in.channels, in.height + 2 * s.pad, in.width + 2 * s.pad};
            } else if constexpr (std::is_same_v<S, CropStage>) {
                if (s.height == 0 || s.width == 0 || s.height > in.height || s.width > in.width)
                    throw ShapeError("crop " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                                     " does not fit input " + to_string(in));
                return {in.channels, s.height, s.width};
            } else if constexpr (std::is_same_v<S, CutoutStage>) {
                if (s.params.mode == CutoutMode::constrained_p50 && s.params.length > std::min(in.height, in.width))
                    throw ArgumentError("constrained cutout length exceeds input " + to_string(in));
                return in;
            } else if constexpr (std::is_same_v<S, TargetedCutoutStage>) {
                if (!s.bank) throw ArgumentError("targeted cutout has no feature-map bank");
                if (s.bank->height > in.height || s.bank->width > in.width)
                    throw ShapeError("feature maps larger than input " + to_string(in));
                return in;
            } else {
                return in;
            }
        },
        t);
}

inline Image apply_stage(const Transform& t, const Image& img, RngStream& rng, std::size_t index) {
    return std::visit(
        [&](const auto& s) -> Image {
            using S = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<S, NormalizeStage>) return normalize(img, s.stats);
            else if constexpr (std::is_same_v<S, PadStage>) return zero_pad(img, s.pad);
            else if constexpr (std::is_same_v<S, CropStage>) return random_crop(img, s.height, s.width, rng);
            else if constexpr (std::is_same_v<S, HFlipStage>) return random_hflip(img, rng);
            else if constexpr (std::is_same_v<S, CutoutStage>) return apply_cutout(img, s.params, rng);
            else {
                auto it = s.bank->maps.find(index);
                // Samples without a stored map pass through (first epoch).
                if (it == s.bank->maps.end()) return img;
                return targeted_cutout(img, FeatureMapView{it->second, s.bank->height, s.bank->width}, rng);
            }
        },
        t);
}

}  // namespace detail

/// Ordered list of transforms. The canonical training order is
/// normalize, pad, crop, hflip, cutout.
class TransformChain {
public:
    TransformChain() = default;
    explicit TransformChain(std::vector<Transform> stages) : stages_(std::move(stages)) {}

    TransformChain& add(Transform t) {
        stages_.push_back(std::move(t));
        return *this;
    }

    const std::vector<Transform>& stages() const noexcept { return stages_; }
    bool empty() const noexcept { return stages_.empty(); }
    std::size_t size() const noexcept { return stages_.size(); }

    /// Output shape for the given input; throws ChainError naming the first
    /// incompatible stage.
    Shape3 output_shape(Shape3 in) const {
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            try {
                in = detail::stage_output_shape(stages_[i], in);
            } catch (const ChainError&) {
                throw;
            } catch (const Error& e) {
                throw ChainError(i, stage_name(stages_[i]), e.what());
            }
        }
        return in;
    }

    /// The deterministic subset used at evaluation time (normalization only).
    TransformChain eval_chain() const {
        TransformChain out;
        for (const auto& s : stages_)
            if (std::holds_alternative<NormalizeStage>(s)) out.add(s);
        return out;
    }

    std::string describe() const {
        std::string out;
        for (std::size_t i = 0; i < stages_.size(); ++i) out += (i ? "," : "") + stage_name(stages_[i]);
        return out;
    }

private:
    std::vector<Transform> stages_;
};

/// Standard recipe: normalize, zero-pad by `pad`, crop back to the input
/// size, random mirror, then cutout when length > 0.
inline TransformChain standard_chain(const DatasetStats& stats, Shape3 input, std::size_t pad, bool flip,
                                     CutoutParams cutout) {
    TransformChain chain;
    chain.add(NormalizeStage{stats});
    if (pad > 0) chain.add(PadStage{pad}).add(CropStage{input.height, input.width});
    if (flip) chain.add(HFlipStage{});
    if (cutout.length > 0) chain.add(CutoutStage{cutout});
    return chain;
}

/// Runs the chain with all randomness drawn from the stream derived from
/// (global_seed, epoch, index). The label is passed through.
inline LabeledSample apply_chain(const LabeledSample& sample, const TransformChain& chain, std::uint64_t epoch,
                                 std::uint64_t index, std::uint64_t global_seed) {
    RngStream rng = RngStream::derive(global_seed, epoch, index, RngDomain::augment);
    Image img = sample.image;
    const auto& stages = chain.stages();
    for (std::size_t i = 0; i < stages.size(); ++i) {
        try {
            detail::stage_output_shape(stages[i], img.shape());
            img = detail::apply_stage(stages[i], img, rng, static_cast<std::size_t>(index));
        } catch (const Error& e) {
            throw ChainError(i, stage_name(stages[i]), e.what());
        }
    }
    return {std::move(img), sample.label};
}

// ---------------------------------------------------------------------------
// Loader
// ---------------------------------------------------------------------------

struct LoaderConfig {
    std::size_t batch_size = 128;
    // Seeds both the per-epoch shuffle and the per-sample augmentation
    // streams (separate RNG domains).
    std::uint64_t shuffle_seed = 0;
    std::size_t worker_count = 1;
    std::size_t queue_capacity = 4;
    bool drop_last = false;

    void validate() const {
        if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
        if (worker_count == 0) throw ArgumentError("worker_count must be >= 1");
        if (queue_capacity == 0) throw ArgumentError("queue_capacity must be >= 1");
    }
};

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t shuffle_seed, std::uint64_t epoch) {
    RngStream rng = RngStream::derive(shuffle_seed, epoch, 0, RngDomain::shuffle);
    return shuffled_indices(n, rng);
}

inline std::size_t batch_count(std::size_t n, std::size_t batch_size, bool drop_last) {
    return drop_last ? n / batch_size : (n + batch_size - 1) / batch_size;
}

/// Streams the batches of one epoch in a fixed order.
///
/// Workers claim batch numbers in sequence and may run at most
/// queue_capacity batches ahead of the consumer; completed batches wait in a
/// reorder buffer until their turn. Every sample's randomness comes from its
/// own derived stream, so the emitted sequence does not depend on the
/// number of workers or on scheduling.
class EpochLoader {
public:
    EpochLoader(const Dataset& ds, const TransformChain& chain, const LoaderConfig& cfg, std::uint64_t epoch)
        : ds_(ds), chain_(chain), cfg_(cfg), epoch_(epoch) {
        cfg_.validate();
        if (ds_.empty()) throw EmptyDatasetError("epoch_batches: dataset '" + ds_.name + "' is empty");
        out_shape_ = chain_.output_shape(ds_.shape());
        order_ = epoch_order(ds_.size(), cfg_.shuffle_seed, epoch_);
        total_ = cutout::batch_count(ds_.size(), cfg_.batch_size, cfg_.drop_last);
        workers_.reserve(cfg_.worker_count);
        for (std::size_t i = 0; i < cfg_.worker_count; ++i) workers_.emplace_back([this] { work(); });
    }

    EpochLoader(const EpochLoader&) = delete;
    EpochLoader& operator=(const EpochLoader&) = delete;

    ~EpochLoader() {
        {
            std::lock_guard lock(mu_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : workers_) t.join();
    }

    std::size_t batch_count() const noexcept { return total_; }

    /// Next batch in order, or nullopt at the end of the epoch. Rethrows any
    /// worker failure.
    std::optional<Batch> next() {
        std::unique_lock lock(mu_);
        if (consumed_ >= total_) return std::nullopt;
        cv_.wait(lock, [&] { return error_ || ready_.count(consumed_) != 0; });
        if (error_) std::rethrow_exception(error_);
        auto node = ready_.extract(consumed_);
        ++consumed_;
        lock.unlock();
        cv_.notify_all();
        return std::move(node.mapped());
    }

    /// Largest number of batches claimed by workers but not yet consumed.
    std::size_t peak_outstanding() const {
        std::lock_guard lock(mu_);
        return peak_outstanding_;
    }

private:
    void work() {
        for (;;) {
            std::size_t b = 0;
            {
                std::unique_lock lock(mu_);
                cv_.wait(lock, [&] {
                    return stop_ || error_ || claimed_ >= total_ || claimed_ < consumed_ + cfg_.queue_capacity;
                });
                if (stop_ || error_ || claimed_ >= total_) return;
                b = claimed_++;
                peak_outstanding_ = std::max(peak_outstanding_, claimed_ - consumed_);
            }
            try {
                Batch batch = build(b);
                std::lock_guard lock(mu_);
                ready_.emplace(b, std::move(batch));
            } catch (...) {
                std::lock_guard lock(mu_);
                if (!error_) error_ = std::current_exception();
            }
            cv_.notify_all();
        }
    }

    Batch build(std::size_t b) const {
        const std::size_t begin = b * cfg_.batch_size;
        const std::size_t end = std::min(begin + cfg_.batch_size, ds_.size());
        Batch batch{Tensor4(end - begin, out_shape_.channels, out_shape_.height, out_shape_.width), {}};
        batch.labels.reserve(end - begin);
        for (std::size_t i = begin; i < end; ++i) {
            const std::size_t idx = order_[i];
            LabeledSample s = apply_chain(ds_.samples[idx], chain_, epoch_, idx, cfg_.shuffle_seed);
            std::copy(s.image.data().begin(), s.image.data().end(), batch.inputs.sample(i - begin).begin());
            batch.labels.push_back(s.label);
        }
        return batch;
    }

    const Dataset& ds_;
    const TransformChain& chain_;
    LoaderConfig cfg_;
    std::uint64_t epoch_;
    Shape3 out_shape_{};
    std::vector<std::size_t> order_;
    std::size_t total_ = 0;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::size_t, Batch> ready_;
    std::size_t claimed_ = 0;
    std::size_t consumed_ = 0;
    std::size_t peak_outstanding_ = 0;
    bool stop_ = false;
    std::exception_ptr error_;
    std::vector<std::thread> workers_;
};

/// Materializes every batch of an epoch (convenient for tests and small data).
inline std::vector<Batch> epoch_batches(const Dataset& ds, const TransformChain& chain, const LoaderConfig& cfg,
                                        std::uint64_t epoch) {
    EpochLoader loader(ds, chain, cfg, epoch);
    std::vector<Batch> out;
    out.reserve(loader.batch_count());
    while (auto b = loader.next()) out.push_back(std::move(*b));
    return out;
}

struct ThroughputReport {
    std::size_t workers = 1;
    double samples_per_sec = 0.0;           // at `workers`
    double baseline_samples_per_sec = 0.0;  // at one worker
    double speedup = 0.0;

    std::string to_json() const {
        std::ostringstream os;
        os.precision(6);
        os << "{\"workers\":" << workers << ",\"samples_per_sec\":" << std::fixed << samples_per_sec
           << ",\"speedup\":" << speedup << "}";
        return os.str();
    }
};

/// Times one full epoch at a single worker and at cfg.worker_count.
inline ThroughputReport throughput_probe(const Dataset& ds, const TransformChain& chain, const LoaderConfig& cfg) {
    auto time_epoch = [&](std::size_t workers) {
        LoaderConfig c = cfg;
        c.worker_count = workers;
        const auto t0 = std::chrono::steady_clock::now();
        std::size_t seen = 0;
        {
            EpochLoader loader(ds, chain, c, 0);
            while (auto b = loader.next()) seen += b->labels.size();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return static_cast<double>(seen) / std::max(secs, 1e-9);
    };
    ThroughputReport r;
    r.workers = cfg.worker_count;
    r.baseline_samples_per_sec = time_epoch(1);
    r.samples_per_sec = cfg.worker_count == 1 ? r.baseline_samples_per_sec : time_epoch(cfg.worker_count);
    r.speedup = r.samples_per_sec / r.baseline_samples_per_sec;
    return r;
}

} // namespace cutout
