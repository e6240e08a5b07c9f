#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cutout/datasets.hpp"
#include "cutout/pipeline.hpp"
#include "cutout/smallnet.hpp"

namespace cutout {

enum class ProfileScope { single_sample, dataset_mean };

/// Per-layer activation magnitudes: |activation| sorted in descending order
/// per sample, then averaged position-wise over the samples in scope.
struct ActivationProfile {
    std::string layer;
    std::vector<double> magnitudes;
    ProfileScope scope = ProfileScope::dataset_mean;
    std::optional<std::size_t> sample_id;

    std::string to_csv() const {
        std::string out = "rank,magnitude\n";
        char buf[64];
        for (std::size_t i = 0; i < magnitudes.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i + 1, magnitudes[i]);
            out += buf;
        }
        return out;
    }
};

/// Layers a profile can be taken at: every relu output plus "logits".
template <typename T>
std::vector<std::string> profile_layers(const Sequential<T>& net) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < net.layer_count(); ++i)
        if (net.layer(i).kind() == "relu") out.push_back(net.layer_name(i));
    out.push_back("logits");
    return out;
}

template <typename T>
std::size_t profile_length(const Sequential<T>& net, const std::string& layer) {
    if (layer == "logits") return net.class_count();
    auto idx = net.find_layer(layer);
    if (!idx || net.layer(*idx).kind() != "relu")
        throw ArgumentError("unknown profile layer '" + layer + "'");
    return net.layer_output_shape(*idx).size();
}

namespace detail {

inline void add_sorted_magnitudes(std::span<const float> acts, std::vector<double>& sums, std::vector<float>& scratch) {
    scratch.resize(acts.size());
    for (std::size_t i = 0; i < acts.size(); ++i) scratch[i] = std::fabs(acts[i]);
    std::sort(scratch.begin(), scratch.end(), std::greater<>());
    for (std::size_t i = 0; i < scratch.size(); ++i) sums[i] += scratch[i];
}

}  // namespace detail

/// Fixed-size chunks of `chunk` samples are profiled independently (possibly
/// on several threads) and reduced in chunk order, so the result does not
/// depend on the thread count.
inline ActivationProfile profile_dataset(const Sequential<float>& net, const Dataset& ds, const std::string& layer,
                                         const TransformChain& chain = {}, std::size_t threads = 1,
                                         std::size_t chunk = 64) {
    if (ds.empty()) throw EmptyDatasetError("profile_dataset: dataset '" + ds.name + "' is empty");
    const std::size_t units = profile_length(net, layer);
    const TransformChain eval = chain.eval_chain();
    const std::size_t chunks = (ds.size() + chunk - 1) / chunk;
    std::vector<std::vector<double>> partial(chunks);
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        std::vector<float> scratch;
        std::vector<LabeledSample> buf;
        for (std::size_t c = next++; c < chunks; c = next++) {
            buf.clear();
            const std::size_t begin = c * chunk, end = std::min(begin + chunk, ds.size());
            for (std::size_t i = begin; i < end; ++i) buf.push_back(apply_chain(ds.samples[i], eval, 0, i, 0));
            Batch b = batch_from_samples(buf);
            auto fr = forward(net, b.inputs, false);
            const Tensor<float>* acts = fr.activation(layer);
            std::vector<double> sums(units, 0.0);
            for (std::size_t n = 0; n < b.labels.size(); ++n) detail::add_sorted_magnitudes(acts->sample(n), sums, scratch);
            partial[c] = std::move(sums);
        }
    };
    const std::size_t nthreads = std::clamp<std::size_t>(threads, 1, chunks);
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    ActivationProfile p{layer, std::vector<double>(units, 0.0), ProfileScope::dataset_mean, std::nullopt};
    for (const auto& s : partial)
        for (std::size_t i = 0; i < units; ++i) p.magnitudes[i] += s[i];
    for (double& m : p.magnitudes) m /= static_cast<double>(ds.size());
    return p;
}

inline ActivationProfile profile_sample(const Sequential<float>& net, const LabeledSample& sample,
                                        const std::string& layer, const TransformChain& chain = {},
                                        std::optional<std::size_t> sample_id = std::nullopt) {
    Dataset one{{sample}, std::max<std::size_t>(net.class_count(), sample.label + 1), "sample"};
    ActivationProfile p = profile_dataset(net, one, layer, chain);
    p.scope = ProfileScope::single_sample;
    p.sample_id = sample_id;
    return p;
}

struct ProfileComparison {
    std::string layer;
    double head_ratio = 1.0;  // sum(b)/sum(a) over the top 10% of ranks
    double tail_ratio = 1.0;  // sum(b)/sum(a) over the bottom 50% of ranks

    std::string to_json() const {
        char buf[256];
        std::snprintf(buf, sizeof buf, "{\"layer\":\"%s\",\"head_ratio\":%.9g,\"tail_ratio\":%.9g}", layer.c_str(),
                      head_ratio, tail_ratio);
        return buf;
    }
};

/// Head is the first max(1, floor(n/10)) ranks, tail the last max(1, floor(n/2)).
inline ProfileComparison compare_profiles(const ActivationProfile& a, const ActivationProfile& b) {
    const std::size_t n = a.magnitudes.size();
    if (n != b.magnitudes.size())
        throw ArgumentError("compare_profiles: lengths differ (" + std::to_string(n) + " vs " +
                            std::to_string(b.magnitudes.size()) + ")");
    if (n == 0) throw ArgumentError("compare_profiles: empty profiles");
    const std::size_t head = std::max<std::size_t>(1, n / 10);
    const std::size_t tail = std::max<std::size_t>(1, n / 2);
    auto ratio = [&](std::size_t begin, std::size_t end) {
        double sa = 0.0, sb = 0.0;
        for (std::size_t i = begin; i < end; ++i) {
            sa += a.magnitudes[i];
            sb += b.magnitudes[i];
        }
        if (sa == 0.0) return sb == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
        return sb / sa;
    };
    return {a.layer, ratio(0, head), ratio(n - tail, n)};
}

} // namespace cutout
