#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "cutout/augment.hpp"
#include "cutout/datasets.hpp"
#include "cutout/pipeline.hpp"
#include "cutout/smallnet.hpp"

namespace cutout {

/// Augmentation applied in every grid cell before the cutout stage.
/// Normalization statistics come from each cell's own training split.
struct ChainRecipe {
    std::size_t pad = 0;
    bool flip = false;
    CutoutMode mode = CutoutMode::always_clipped;

    TransformChain build(const DatasetStats& stats, Shape3 input, std::size_t cutout_length) const {
        return standard_chain(stats, input, pad, flip, CutoutParams{cutout_length, mode});
    }
};

struct GridCell {
    std::size_t length = 0;
    std::size_t run = 0;
    std::optional<double> val_acc;  // nullopt: training diverged
};

struct GridRow {
    std::size_t length = 0;
    std::vector<double> accuracies;  // successful runs only
    std::size_t failed_runs = 0;
    double mean = std::numeric_limits<double>::quiet_NaN();
    double ci_half_width = 0.0;  // 1.96 * s / sqrt(n), s the sample std
    bool single_run = false;

    std::string flag() const {
        if (accuracies.empty()) return "no_valid_runs";
        std::string f = single_run ? "single_run" : "";
        if (failed_runs) f += std::string(f.empty() ? "" : ";") + "failed_runs=" + std::to_string(failed_runs);
        return f;
    }
};

struct GridSearchReport {
    std::vector<GridRow> rows;
    std::vector<GridCell> cells;
    std::size_t selected_length = 0;
    bool has_selection = false;  // false when every run of every length failed

    std::string runs_csv() const {
        std::string out = "length,run,val_acc\n";
        char buf[96];
        for (const auto& c : cells) {
            if (c.val_acc) std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g\n", c.length, c.run, *c.val_acc);
            else std::snprintf(buf, sizeof buf, "%zu,%zu,nan\n", c.length, c.run);
            out += buf;
        }
        return out;
    }

    std::string summary_csv() const {
        std::string out = "length,mean,ci_half_width,n,flag\n";
        char buf[160];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%zu,%s\n", r.length, r.mean, r.ci_half_width,
                          r.accuracies.size(), r.flag().c_str());
            out += buf;
        }
        return out;
    }
};

inline GridRow summarize_row(std::size_t length, const std::vector<GridCell>& cells) {
    GridRow row;
    row.length = length;
    for (const auto& c : cells) {
        if (c.length != length) continue;
        if (c.val_acc) row.accuracies.push_back(*c.val_acc);
        else ++row.failed_runs;
    }
    const std::size_t n = row.accuracies.size();
    if (n == 0) return row;
    double sum = 0.0;
    for (double a : row.accuracies) sum += a;
    row.mean = sum / static_cast<double>(n);
    row.single_run = n == 1;
    if (n > 1) {
        double ss = 0.0;
        for (double a : row.accuracies) ss += (a - row.mean) * (a - row.mean);
        row.ci_half_width = 1.96 * std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
    }
    return row;
}

/// Length with the highest mean validation accuracy; ties go to the smaller
/// length. Rows without a successful run are ignored.
inline std::size_t select_length(const GridSearchReport& report) {
    std::optional<std::size_t> best;
    double best_mean = 0.0;
    for (const auto& r : report.rows) {
        if (r.accuracies.empty() || std::isnan(r.mean)) continue;
        if (!best || r.mean > best_mean || (r.mean == best_mean && r.length < *best)) {
            best = r.length;
            best_mean = r.mean;
        }
    }
    if (!best) throw ArgumentError("select_length: report has no usable rows");
    return *best;
}

struct GridOptions {
    std::size_t threads = 1;        // concurrent (length, run) cells
    std::size_t loader_workers = 1; // per-cell data loading workers
    double val_fraction = 0.1;
};

/// Seeds for run r: the split and the network initialization both vary with
/// the run and are shared across lengths, so each length sees the same five
/// (split, init) pairs.
inline std::uint64_t grid_split_seed(std::uint64_t seed, std::size_t run) {
    return derive_seed(seed, run, 0, RngDomain::split);
}
inline std::uint64_t grid_train_seed(std::uint64_t seed, std::size_t run) {
    return derive_seed(seed, run, 1, RngDomain::init);
}

/// One grid cell: split, compute stats on the training part, train, and
/// return the validation accuracy.
inline double run_grid_cell(const Dataset& ds, std::size_t length, std::size_t run, const ChainRecipe& recipe,
                            const TrainConfig& cfg, const ArchDescriptor& arch, const GridOptions& opts) {
    auto [train_part, val_part] = split_train_val(ds, opts.val_fraction, grid_split_seed(cfg.seed, run));
    const DatasetStats stats = compute_stats(train_part);
    const TransformChain chain = recipe.build(stats, ds.shape(), length);
    TrainConfig c = cfg;
    c.seed = grid_train_seed(cfg.seed, run);
    auto net = make_small_cnn<float>(arch, c.seed);
    train(net, train_part, chain, c, val_part, TrainOptions{opts.loader_workers, 4, {}});
    return evaluate(net, val_part, c.batch_size, chain);
}

inline GridSearchReport run_grid(const Dataset& ds, const std::vector<std::size_t>& lengths,
                                 std::size_t runs_per_length, const ChainRecipe& recipe, const TrainConfig& cfg,
                                 const ArchDescriptor& arch, const GridOptions& opts = {}) {
    if (lengths.empty()) throw ArgumentError("run_grid: lengths must be non-empty");
    if (runs_per_length == 0) throw ArgumentError("run_grid: runs_per_length must be >= 1");
    if (ds.empty()) throw EmptyDatasetError("run_grid: dataset is empty");
    cfg.validate();

    GridSearchReport report;
    for (std::size_t l : lengths)
        for (std::size_t r = 0; r < runs_per_length; ++r) report.cells.push_back({l, r, std::nullopt});

    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&] {
        for (std::size_t i = next++; i < report.cells.size(); i = next++) {
            auto& cell = report.cells[i];
            try {
                cell.val_acc = run_grid_cell(ds, cell.length, cell.run, recipe, cfg, arch, opts);
            } catch (const NumericError&) {
                cell.val_acc.reset();
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!error) error = std::current_exception();
            }
        }
    };
    const std::size_t nthreads = std::clamp<std::size_t>(opts.threads, 1, report.cells.size());
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);

    for (std::size_t l : lengths) report.rows.push_back(summarize_row(l, report.cells));
    const bool any_valid = std::any_of(report.rows.begin(), report.rows.end(),
                                       [](const GridRow& r) { return !r.accuracies.empty(); });
    if (any_valid) {
        report.selected_length = select_length(report);
        report.has_selection = true;
    }
    return report;
}

} // namespace cutout
