#include <gtest/gtest.h>

#include <algorithm>
#include <cstring>
#include <regex>

#include "cutout/pipeline.hpp"
#include "test_helpers.hpp"

using namespace cutout;

namespace {

Dataset small_dataset(std::size_t n, Shape3 shape = {3, 8, 8}) { return fixtures::random_byte_dataset(n, shape, 10, 77); }

bool same_stream(const std::vector<Batch>& a, const std::vector<Batch>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].labels != b[i].labels || a[i].inputs.size() != b[i].inputs.size()) return false;
        if (std::memcmp(a[i].inputs.data().data(), b[i].inputs.data().data(), a[i].inputs.size() * sizeof(float)) != 0)
            return false;
    }
    return true;
}

TransformChain recipe(const Dataset& ds, std::size_t length) {
    return standard_chain(compute_stats(ds), ds.shape(), 2, true, {length});
}

}  // namespace

TEST(ApplyChain, EmptyChainIsIdentity) {
    Dataset ds = small_dataset(3);
    LabeledSample out = apply_chain(ds.samples[1], TransformChain{}, 0, 1, 0);
    EXPECT_EQ(out.image, ds.samples[1].image);
    EXPECT_EQ(out.label, ds.samples[1].label);
}

TEST(ApplyChain, CifarRecipeKeepsShape) {
    Dataset ds = small_dataset(2, {3, 32, 32});
    TransformChain chain;
    chain.add(PadStage{4}).add(CropStage{32, 32}).add(HFlipStage{}).add(CutoutStage{{16}});
    EXPECT_EQ(chain.output_shape({3, 32, 32}), (Shape3{3, 32, 32}));
    LabeledSample out = apply_chain(ds.samples[0], chain, 3, 0, 9);
    EXPECT_EQ(out.image.shape(), (Shape3{3, 32, 32}));
    EXPECT_EQ(out.label, ds.samples[0].label);
}

TEST(ApplyChain, Deterministic) {
    Dataset ds = small_dataset(4);
    TransformChain chain = recipe(ds, 4);
    for (std::uint64_t i = 0; i < 4; ++i)
        EXPECT_EQ(apply_chain(ds.samples[i], chain, 2, i, 5).image, apply_chain(ds.samples[i], chain, 2, i, 5).image);
    EXPECT_NE(apply_chain(ds.samples[0], chain, 2, 0, 5).image, apply_chain(ds.samples[0], chain, 3, 0, 5).image);
}

TEST(ApplyChain, IncompatibleStageNamed) {
    Dataset ds = small_dataset(1);
    TransformChain chain;
    chain.add(HFlipStage{}).add(CropStage{10, 10});
    try {
        apply_chain(ds.samples[0], chain, 0, 0, 0);
        FAIL() << "expected ChainError";
    } catch (const ChainError& e) {
        EXPECT_EQ(e.stage(), 1u);
        EXPECT_EQ(e.stage_name(), "crop10x10");
    }
    EXPECT_THROW(chain.output_shape({3, 8, 8}), ChainError);

    TransformChain wrong_stats;
    wrong_stats.add(NormalizeStage{{{0.5}, {0.5}}});
    EXPECT_THROW(apply_chain(ds.samples[0], wrong_stats, 0, 0, 0), ChainError);
}

TEST(ApplyChain, EvalChainKeepsOnlyNormalize) {
    Dataset ds = small_dataset(5);
    TransformChain chain = recipe(ds, 4);
    TransformChain ev = chain.eval_chain();
    ASSERT_EQ(ev.size(), 1u);
    EXPECT_TRUE(std::holds_alternative<NormalizeStage>(ev.stages()[0]));
    EXPECT_EQ(chain.describe(), "normalize,pad2,crop8x8,hflip,cutout4/always_clipped");
}

TEST(ApplyChain, TargetedStageUsesBank) {
    Dataset ds = small_dataset(2, {1, 4, 4});
    auto bank = std::make_shared<FeatureMapBank>();
    bank->height = bank->width = 2;
    bank->maps[0] = {10, 0, 0, 0};
    TransformChain chain;
    chain.add(TargetedCutoutStage{bank});
    Image out0 = apply_chain(ds.samples[0], chain, 0, 0, 0).image;
    EXPECT_EQ(out0(0, 0, 0), 0.0f);
    EXPECT_EQ(out0(0, 1, 1), 0.0f);
    EXPECT_EQ(out0(0, 3, 3), ds.samples[0].image(0, 3, 3));
    EXPECT_EQ(apply_chain(ds.samples[1], chain, 0, 1, 0).image, ds.samples[1].image);
}

TEST(EpochBatches, PartialLastBatch) {
    Dataset ds = small_dataset(10);
    LoaderConfig cfg;
    cfg.batch_size = 3;
    auto batches = epoch_batches(ds, TransformChain{}, cfg, 0);
    std::vector<std::size_t> sizes;
    for (const auto& b : batches) sizes.push_back(b.labels.size());
    EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 3, 1}));
    cfg.drop_last = true;
    EXPECT_EQ(epoch_batches(ds, TransformChain{}, cfg, 0).size(), 3u);
}

TEST(EpochBatches, CifarBatchCount) {
    EXPECT_EQ(batch_count(50000, 128, false), 391u);
    EXPECT_EQ(batch_count(50000, 128, true), 390u);
    EXPECT_EQ(50000 - 390 * 128, 80);
}

TEST(EpochBatches, WorkerCountInvariance) {
    Dataset ds = small_dataset(203);
    TransformChain chain = recipe(ds, 5);
    LoaderConfig cfg;
    cfg.batch_size = 16;
    cfg.shuffle_seed = 12;
    auto ref = epoch_batches(ds, chain, cfg, 1);
    for (std::size_t w : {2u, 4u}) {
        cfg.worker_count = w;
        for (std::size_t cap : {1u, 3u}) {
            cfg.queue_capacity = cap;
            EXPECT_TRUE(same_stream(ref, epoch_batches(ds, chain, cfg, 1))) << w << " workers, capacity " << cap;
        }
    }
}

TEST(EpochBatches, ShuffleIsPermutationAndVaries) {
    const std::size_t n = 150;
    Dataset ds{{}, 1, "ids"};
    for (std::size_t i = 0; i < n; ++i) ds.samples.push_back({Image(1, 1, 1, {static_cast<float>(i)}), 0});
    LoaderConfig cfg;
    cfg.batch_size = 7;
    auto ids = [&](std::uint64_t epoch) {
        std::vector<float> v;
        for (const auto& b : epoch_batches(ds, TransformChain{}, cfg, epoch))
            v.insert(v.end(), b.inputs.data().begin(), b.inputs.data().end());
        return v;
    };
    auto e0 = ids(0), e1 = ids(1);
    EXPECT_NE(e0, e1);
    std::sort(e0.begin(), e0.end());
    for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(e0[i], static_cast<float>(i));
    EXPECT_EQ(epoch_order(n, 0, 1), epoch_order(n, 0, 1));
}

TEST(EpochBatches, BoundedOutstanding) {
    Dataset ds = small_dataset(200);
    TransformChain chain = recipe(ds, 3);
    for (std::size_t cap : {1u, 2u, 5u}) {
        LoaderConfig cfg;
        cfg.batch_size = 4;
        cfg.worker_count = 4;
        cfg.queue_capacity = cap;
        EpochLoader loader(ds, chain, cfg, 0);
        std::size_t seen = 0;
        while (auto b = loader.next()) {
            ++seen;
            std::this_thread::yield();
        }
        EXPECT_EQ(seen, 50u);
        EXPECT_LE(loader.peak_outstanding(), cap);
        EXPECT_GE(loader.peak_outstanding(), 1u);
    }
}

TEST(EpochBatches, ConfigValidation) {
    Dataset ds = small_dataset(4);
    LoaderConfig cfg;
    cfg.batch_size = 0;
    EXPECT_THROW(epoch_batches(ds, TransformChain{}, cfg, 0), ArgumentError);
    cfg = LoaderConfig{};
    EXPECT_THROW(epoch_batches(Dataset{{}, 10, "e"}, TransformChain{}, cfg, 0), EmptyDatasetError);
}

TEST(EpochBatches, WorkerErrorsPropagate) {
    Dataset ds = small_dataset(8);
    TransformChain chain;
    chain.add(CutoutStage{{9, CutoutMode::constrained_p50}});
    LoaderConfig cfg;
    cfg.worker_count = 2;
    EXPECT_THROW(epoch_batches(ds, chain, cfg, 0), ChainError);
}

TEST(Throughput, ReportSchema) {
    Dataset ds = small_dataset(64);
    LoaderConfig cfg;
    cfg.batch_size = 8;
    cfg.worker_count = 2;
    ThroughputReport r = throughput_probe(ds, TransformChain{}, cfg);
    EXPECT_EQ(r.workers, 2u);
    EXPECT_GT(r.samples_per_sec, 0.0);
    EXPECT_GT(r.speedup, 0.0);
    const std::string json = r.to_json();
    EXPECT_TRUE(std::regex_match(json, std::regex(R"(\{"workers":2,"samples_per_sec":[0-9.]+,"speedup":[0-9.]+\})")))
        << json;
}
