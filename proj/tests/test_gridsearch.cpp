#include <gtest/gtest.h>

#include <cmath>

#include "cutout/gridsearch.hpp"
#include "cutout/synthetic.hpp"

using namespace cutout;

namespace {

GridSearchReport report_with_means(const std::vector<std::size_t>& lengths, const std::vector<double>& means) {
    GridSearchReport r;
    for (std::size_t i = 0; i < lengths.size(); ++i) {
        r.cells.push_back({lengths[i], 0, means[i]});
        r.rows.push_back(summarize_row(lengths[i], r.cells));
    }
    return r;
}

Dataset grid_dataset() {
    SyntheticConfig sc;
    sc.samples = 120;
    sc.side = 8;
    sc.part_size = 3;
    return make_synthetic_occlusion(sc);
}

ArchDescriptor grid_arch() {
    ArchDescriptor a;
    a.in_height = a.in_width = 8;
    a.conv1_channels = 4;
    a.conv2_channels = 4;
    a.class_count = 10;
    return a;
}

TrainConfig grid_config() {
    TrainConfig c;
    c.epochs = 2;
    c.batch_size = 32;
    c.lr0 = 0.05;
    c.milestones = {1};
    c.seed = 11;
    return c;
}

}  // namespace

TEST(SelectLength, Examples) {
    EXPECT_EQ(select_length(report_with_means({0, 8, 16}, {0.80, 0.85, 0.83})), 8u);
    EXPECT_EQ(select_length(report_with_means({16, 8, 0}, {0.5, 0.5, 0.5})), 0u);
    EXPECT_EQ(select_length(report_with_means({12}, {0.3})), 12u);
    EXPECT_THROW(select_length(GridSearchReport{}), ArgumentError);
}

TEST(SelectLength, AffineInvariance) {
    RngStream rng(1);
    for (int t = 0; t < 100; ++t) {
        std::vector<std::size_t> lengths{0, 4, 8, 12, 16};
        std::vector<double> means(5), scaled(5);
        for (auto& m : means) m = static_cast<double>(rng.uniform_below(8)) / 8.0;  // ties are common
        const double a = 0.25 + 4 * rng.uniform01_double(), b = rng.uniform01_double() - 0.5;
        for (std::size_t i = 0; i < 5; ++i) scaled[i] = a * means[i] + b;
        ASSERT_EQ(select_length(report_with_means(lengths, means)), select_length(report_with_means(lengths, scaled)));
    }
}

TEST(Summary, ConfidenceInterval) {
    std::vector<GridCell> cells{{4, 0, 0.8}, {4, 1, 0.9}, {4, 2, std::nullopt}, {8, 0, 0.7}};
    GridRow r = summarize_row(4, cells);
    EXPECT_DOUBLE_EQ(r.mean, 0.85);
    EXPECT_NEAR(r.ci_half_width, 1.96 * std::sqrt(0.005) / std::sqrt(2.0), 1e-12);
    EXPECT_EQ(r.failed_runs, 1u);
    EXPECT_EQ(r.flag(), "failed_runs=1");
    GridRow single = summarize_row(8, cells);
    EXPECT_EQ(single.ci_half_width, 0.0);
    EXPECT_TRUE(single.single_run);
    EXPECT_EQ(single.flag(), "single_run");
}

TEST(RunGrid, SingleBaselineMatchesOneTraining) {
    Dataset ds = grid_dataset();
    ChainRecipe recipe;
    GridSearchReport r = run_grid(ds, {0}, 1, recipe, grid_config(), grid_arch());
    ASSERT_EQ(r.rows.size(), 1u);
    ASSERT_EQ(r.rows[0].accuracies.size(), 1u);
    EXPECT_EQ(r.rows[0].accuracies[0], run_grid_cell(ds, 0, 0, recipe, grid_config(), grid_arch(), {}));
    EXPECT_EQ(r.selected_length, 0u);
    EXPECT_TRUE(r.has_selection);
    EXPECT_NE(r.summary_csv().find("single_run"), std::string::npos);
}

TEST(RunGrid, DeterministicThreadAndOrderIndependent) {
    Dataset ds = grid_dataset();
    ChainRecipe recipe{1, true, CutoutMode::always_clipped};
    GridSearchReport a = run_grid(ds, {0, 4}, 2, recipe, grid_config(), grid_arch());
    GridSearchReport b = run_grid(ds, {0, 4}, 2, recipe, grid_config(), grid_arch(), GridOptions{2, 2, 0.1});
    EXPECT_EQ(a.runs_csv(), b.runs_csv());
    EXPECT_EQ(a.summary_csv(), b.summary_csv());
    ASSERT_EQ(a.rows[0].accuracies.size(), 2u);

    GridSearchReport swapped = run_grid(ds, {4, 0}, 2, recipe, grid_config(), grid_arch());
    EXPECT_EQ(swapped.rows[0].accuracies, a.rows[1].accuracies);
    EXPECT_EQ(swapped.rows[1].accuracies, a.rows[0].accuracies);
    EXPECT_EQ(swapped.rows[0].ci_half_width, a.rows[1].ci_half_width);
    EXPECT_EQ(swapped.selected_length, a.selected_length);
}

TEST(RunGrid, DivergenceIsFlagged) {
    Dataset ds = grid_dataset();
    TrainConfig cfg = grid_config();
    cfg.lr0 = 1e30;
    GridSearchReport r = run_grid(ds, {0, 4}, 1, ChainRecipe{}, cfg, grid_arch());
    EXPECT_FALSE(r.has_selection);
    EXPECT_EQ(r.rows[0].failed_runs, 1u);
    EXPECT_EQ(r.rows[0].flag(), "no_valid_runs");
    EXPECT_NE(r.runs_csv().find("0,0,nan"), std::string::npos);
}

TEST(RunGrid, Preconditions) {
    Dataset ds = grid_dataset();
    EXPECT_THROW(run_grid(ds, {}, 1, ChainRecipe{}, grid_config(), grid_arch()), ArgumentError);
    EXPECT_THROW(run_grid(ds, {0}, 0, ChainRecipe{}, grid_config(), grid_arch()), ArgumentError);
}

TEST(RunGrid, CsvHeaders) {
    GridSearchReport r = report_with_means({0, 8}, {0.5, 0.75});
    EXPECT_EQ(r.runs_csv(), "length,run,val_acc\n0,0,0.5\n8,0,0.75\n");
    EXPECT_EQ(r.summary_csv().substr(0, r.summary_csv().find('\n')), "length,mean,ci_half_width,n,flag");
}
