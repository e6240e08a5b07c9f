#pragma once

// Procedural "occlusion" image classification task for desk-scale
// experiments when no real dataset is on disk.
//
// Every class owns a few small colored part templates. An image shows a
// subset of its class's parts at random positions over a noisy background,
// a few class-neutral distractor parts, and sometimes a flat occluder
// square. Each part alone identifies the class, so a model that
// keys on only one of them is brittle when it is hidden.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "cutout/datasets.hpp"
#include "cutout/rng.hpp"

namespace cutout {

struct SyntheticConfig {
    std::size_t samples = 4000;
    std::size_t classes = 10;
    std::size_t side = 16;
    std::size_t parts_per_class = 4;
    std::size_t part_size = 4;
    double part_keep = 0.75;         // probability each class part is drawn (at least one is)
    std::size_t distractors = 2;     // neutral parts per image, drawn from a shared pool
    std::size_t distractor_pool = 10;
    double occluder_prob = 0.3;
    double background_noise = 0.05;  // std of per-pixel background noise
    double pixel_noise = 0.03;       // std of noise added on top of everything
    double label_noise = 0.0;        // probability the label is replaced by a uniformly random other class
    std::uint64_t template_seed = 7; // fixes the part templates (the task itself)
    std::uint64_t sample_seed = 0;   // draws the individual images
};

namespace detail {

struct PartTemplate {
    std::size_t size = 0;
    std::vector<float> pixels;  // 3 x size x size, values in [0,1]
};

inline std::vector<PartTemplate> make_part_templates(const SyntheticConfig& cfg) {
    std::vector<PartTemplate> parts;
    const std::size_t total = cfg.classes * cfg.parts_per_class + cfg.distractor_pool;
    for (std::size_t t = 0; t < total; ++t) {
        RngStream rng = RngStream::derive(cfg.template_seed, 1, t, RngDomain::synthetic);
        PartTemplate p{cfg.part_size, std::vector<float>(3 * cfg.part_size * cfg.part_size)};
        // A binary shape in two random colours.
        float fg[3], bg[3];
        for (auto& v : fg) v = rng.uniform01();
        for (auto& v : bg) v = rng.uniform01();
        for (std::size_t y = 0; y < cfg.part_size; ++y)
            for (std::size_t x = 0; x < cfg.part_size; ++x) {
                const bool on = rng.coin();
                for (std::size_t c = 0; c < 3; ++c)
                    p.pixels[(c * cfg.part_size + y) * cfg.part_size + x] = on ? fg[c] : bg[c];
            }
        parts.push_back(std::move(p));
    }
    return parts;
}

inline void stamp(std::vector<float>& img, std::size_t side, const PartTemplate& p, std::size_t oy, std::size_t ox) {
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < p.size; ++y)
            for (std::size_t x = 0; x < p.size; ++x)
                img[(c * side + oy + y) * side + ox + x] = p.pixels[(c * p.size + y) * p.size + x];
}

}  // namespace detail

inline Dataset make_synthetic_occlusion(const SyntheticConfig& cfg) {
    if (cfg.classes < 2 || cfg.parts_per_class < 1 || cfg.part_size == 0 || cfg.part_size > cfg.side)
        throw ArgumentError("synthetic: invalid configuration");
    const auto parts = detail::make_part_templates(cfg);
    const std::size_t side = cfg.side, span = side - cfg.part_size + 1;
    Dataset ds{{}, cfg.classes, "synthetic"};
    ds.samples.reserve(cfg.samples);
    for (std::size_t i = 0; i < cfg.samples; ++i) {
        RngStream rng = RngStream::derive(cfg.sample_seed, 0, i, RngDomain::synthetic);
        const std::size_t label = static_cast<std::size_t>(rng.uniform_below(cfg.classes));
        std::vector<float> img(3 * side * side);
        float base[3];
        for (auto& b : base) b = 0.3f + 0.4f * rng.uniform01();
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t p = 0; p < side * side; ++p)
                img[c * side * side + p] = base[c] + static_cast<float>(cfg.background_noise * rng.normal());

        std::vector<std::size_t> chosen;
        for (std::size_t k = 0; k < cfg.parts_per_class; ++k)
            if (rng.bernoulli(cfg.part_keep)) chosen.push_back(label * cfg.parts_per_class + k);
        if (chosen.empty())
            chosen.push_back(label * cfg.parts_per_class + rng.uniform_below(cfg.parts_per_class));
        // Distractors go underneath the class parts.
        const std::size_t first_neutral = cfg.classes * cfg.parts_per_class;
        for (std::size_t d = 0; d < cfg.distractors && cfg.distractor_pool > 0; ++d)
            chosen.insert(chosen.begin(), first_neutral + rng.uniform_below(cfg.distractor_pool));
        for (std::size_t t : chosen) {
            const auto oy = static_cast<std::size_t>(rng.uniform_below(span));
            const auto ox = static_cast<std::size_t>(rng.uniform_below(span));
            detail::stamp(img, side, parts[t], oy, ox);
        }
        if (rng.bernoulli(cfg.occluder_prob)) {
            const std::size_t len = side / 4 + static_cast<std::size_t>(rng.uniform_below(side / 4 + 1));
            const auto oy = static_cast<std::size_t>(rng.uniform_below(side - len + 1));
            const auto ox = static_cast<std::size_t>(rng.uniform_below(side - len + 1));
            const float v = rng.uniform01();
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t y = oy; y < oy + len; ++y)
                    std::fill_n(img.begin() + static_cast<std::ptrdiff_t>((c * side + y) * side + ox), len, v);
        }
        for (float& v : img) v = std::clamp(v + static_cast<float>(cfg.pixel_noise * rng.normal()), 0.0f, 1.0f);
        // Quantize like an 8-bit image so the raw container round-trips exactly.
        for (float& v : img) v = static_cast<float>(std::lround(v * 255.0f)) / 255.0f;
        std::size_t shown = label;
        if (cfg.label_noise > 0.0 && rng.bernoulli(cfg.label_noise)) {
            shown = static_cast<std::size_t>(rng.uniform_below(cfg.classes - 1));
            if (shown >= label) ++shown;
        }
        ds.samples.push_back({Image(3, side, side, std::move(img)), shown});
    }
    return ds;
}

} // namespace cutout
