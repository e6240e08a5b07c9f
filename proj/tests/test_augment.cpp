#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <string>

#include "cutout/augment.hpp"
#include "test_helpers.hpp"

using namespace cutout;

namespace {

// Pixels covered by the L x L patch around (cx, cy), counted one by one.
std::size_t brute_area(std::size_t h, std::size_t w, std::size_t L, std::size_t cx, std::size_t cy) {
    std::size_t n = 0;
    const long top = static_cast<long>(cy) - static_cast<long>(L / 2);
    const long left = static_cast<long>(cx) - static_cast<long>(L / 2);
    for (long y = top; y < top + static_cast<long>(L); ++y)
        for (long x = left; x < left + static_cast<long>(L); ++x)
            if (y >= 0 && x >= 0 && y < static_cast<long>(h) && x < static_cast<long>(w)) ++n;
    return n;
}

double enumerated_mean_area(std::size_t h, std::size_t w, std::size_t L) {
    double total = 0;
    for (std::size_t cy = 0; cy < h; ++cy)
        for (std::size_t cx = 0; cx < w; ++cx) total += static_cast<double>(brute_area(h, w, L, cx, cy));
    return total / static_cast<double>(h * w);
}

std::size_t count_zeros(const Image& img, std::size_t channel) {
    std::size_t n = 0;
    for (float v : img.channel(channel)) n += v == 0.0f;
    return n;
}

}  // namespace

// --- normalize / pad / crop / flip ------------------------------------------

TEST(Normalize, Examples) {
    DatasetStats st{{0.5}, {0.25}};
    EXPECT_EQ(normalize(Image(1, 1, 1, {0.5f}), st).data()[0], 0.0f);

    RngStream rng(1);
    Image img = fixtures::random_image({3, 4, 4}, rng);
    EXPECT_EQ(normalize(img, DatasetStats{{0, 0, 0}, {1, 1, 1}}), img);
    EXPECT_THROW(normalize(img, st), ShapeError);
}

TEST(Normalize, DenormalizeInverts) {
    RngStream rng(2);
    for (int t = 0; t < 100; ++t) {
        Image img = fixtures::random_image({3, 6, 6}, rng, 0.0f, 1.0f);
        DatasetStats st{{rng.uniform01(), rng.uniform01(), rng.uniform01()},
                        {0.05 + rng.uniform01(), 0.05 + rng.uniform01(), 0.05 + rng.uniform01()}};
        Image back = denormalize(normalize(img, st), st);
        for (std::size_t i = 0; i < img.data().size(); ++i) ASSERT_NEAR(back.data()[i], img.data()[i], 1e-6);
    }
}

TEST(ZeroPad, PaperSizes) {
    EXPECT_EQ(zero_pad(Image::zeros({3, 32, 32}), 4).shape(), (Shape3{3, 40, 40}));
    EXPECT_EQ(zero_pad(Image::zeros({3, 96, 96}), 12).shape(), (Shape3{3, 120, 120}));
}

TEST(ZeroPad, BorderZeroInteriorCopied) {
    RngStream rng(3);
    Image img = fixtures::random_image({2, 5, 7}, rng, 0.5f, 1.0f);
    EXPECT_EQ(zero_pad(img, 0), img);
    Image p = zero_pad(img, 3);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < p.height(); ++y)
            for (std::size_t x = 0; x < p.width(); ++x) {
                const bool inside = y >= 3 && y < 8 && x >= 3 && x < 10;
                ASSERT_EQ(p(c, y, x), inside ? img(c, y - 3, x - 3) : 0.0f);
            }
}

TEST(Crop, FullSizeIsIdentity) {
    RngStream rng(4);
    Image img = fixtures::random_image({3, 8, 8}, rng);
    for (int i = 0; i < 10; ++i) EXPECT_EQ(random_crop(img, 8, 8, rng), img);
}

TEST(Crop, ForcedCorner) {
    Image img(1, 2, 2, {1, 2, 3, 4});
    EXPECT_EQ(crop_at(img, 1, 1, 1, 1).data()[0], 4.0f);
    RngStream rng(0);
    EXPECT_THROW(random_crop(img, 3, 1, rng), ShapeError);
}

TEST(Crop, OffsetsUniform) {
    Image img = fixtures::iota_image({1, 40, 40}, 0.0f);
    RngStream rng(5);
    std::vector<int> counts(81, 0);
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) {
        const auto v = static_cast<std::size_t>(random_crop(img, 32, 32, rng).data()[0]);
        const std::size_t oy = v / 40, ox = v % 40;
        ASSERT_LE(oy, 8u);
        ASSERT_LE(ox, 8u);
        ++counts[oy * 9 + ox];
    }
    const double expected = draws / 81.0;
    double chi2 = 0;
    for (int c : counts) {
        EXPECT_GT(c, 0);
        chi2 += (c - expected) * (c - expected) / expected;
    }
    // 80 degrees of freedom; 124.8 is the 0.999 quantile.
    EXPECT_LT(chi2, 124.8);
}

TEST(HFlip, Examples) {
    Image img(1, 1, 2, {1.5f, -2.0f});
    EXPECT_EQ(hflip(img), Image(1, 1, 2, {-2.0f, 1.5f}));
    RngStream rng(6);
    Image any = fixtures::random_image({3, 5, 6}, rng);
    EXPECT_EQ(hflip(hflip(any)), any);
    Image f = hflip(any);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < 5; ++y)
            for (std::size_t x = 0; x < 6; ++x) ASSERT_EQ(f(c, y, x), any(c, y, 5 - x));
}

TEST(HFlip, RandomFrequency) {
    Image img(1, 1, 2, {0.0f, 1.0f});
    RngStream rng(7);
    int flips = 0;
    for (int i = 0; i < 10000; ++i) flips += random_hflip(img, rng).data()[0] == 1.0f;
    EXPECT_GE(flips / 10000.0, 0.48);
    EXPECT_LE(flips / 10000.0, 0.52);
}

// --- cutout geometry ---------------------------------------------------------

TEST(CutoutRect, CornerClipping) {
    MaskRect r = cutout_mask_rect(4, 4, 2, 0, 0);
    EXPECT_EQ(r, (MaskRect{0, 0, 1, 1}));
    EXPECT_EQ(r.area(), 1u);
    EXPECT_TRUE(cutout_mask_rect(4, 4, 0, 2, 2).empty());
    EXPECT_EQ(cutout_mask_rect(32, 32, 16, 16, 16).area(), 256u);
    EXPECT_EQ(cutout_mask_rect(9, 9, 3, 4, 4), (MaskRect{3, 3, 6, 6}));
    EXPECT_THROW(cutout_mask_rect(4, 4, 2, 4, 0), ArgumentError);
    EXPECT_THROW(cutout_mask_rect(4, 4, 2, 0, 4), ArgumentError);
}

TEST(CutoutRect, AreaMatchesEnumerationForEveryCenter) {
    for (std::size_t h = 1; h <= 8; ++h)
        for (std::size_t w = 1; w <= 8; ++w) {
            Image ones(Shape3{1, h, w}, std::vector<float>(h * w, 1.0f));
            for (std::size_t L = 0; L <= 8; ++L)
                for (std::size_t cy = 0; cy < h; ++cy)
                    for (std::size_t cx = 0; cx < w; ++cx) {
                        const MaskRect r = cutout_mask_rect(h, w, L, cx, cy);
                        const std::size_t want = brute_area(h, w, L, cx, cy);
                        ASSERT_EQ(r.area(), want);
                        ASSERT_EQ(count_zeros(apply_mask(ones, r), 0), want);
                        if (L >= 1 && L <= std::min(h, w)) {
                            ASSERT_GE(want, ((L + 1) / 2) * ((L + 1) / 2));
                            ASSERT_LE(want, L * L);
                        }
                    }
        }
}

TEST(CutoutRect, ExpectedAreaOracle) {
    EXPECT_DOUBLE_EQ(enumerated_mean_area(4, 4, 2), 49.0 / 16.0);

    Image ones(Shape3{1, 4, 4}, std::vector<float>(16, 1.0f));
    RngStream rng(8);
    double total = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) total += static_cast<double>(count_zeros(apply_cutout(ones, {2}, rng), 0));
    EXPECT_NEAR(total / draws / 16.0, 49.0 / 256.0, 0.005);
    EXPECT_NEAR(total / draws, 49.0 / 16.0, 0.01 * 49.0 / 16.0);
}

TEST(CutoutRect, MonteCarloMatchesEnumerationAllSmallShapes) {
    RngStream rng(9);
    for (std::size_t h = 1; h <= 8; h += 3)
        for (std::size_t w = 2; w <= 8; w += 3)
            for (std::size_t L = 1; L <= 8; L += 2) {
                double total = 0;
                const int draws = 100000;
                for (int i = 0; i < draws; ++i) total += static_cast<double>(draw_cutout_rect(h, w, {L}, rng)->area());
                ASSERT_NEAR(total / draws, enumerated_mean_area(h, w, L), 0.01 * enumerated_mean_area(h, w, L))
                    << h << "x" << w << " L=" << L;
            }
}

// --- cutout application ------------------------------------------------------

TEST(Cutout, CifarSettingBounds) {
    RngStream rng(10);
    for (int i = 0; i < 500; ++i) {
        Image img = fixtures::random_image({3, 32, 32}, rng, 0.5f, 1.0f);
        Image out = apply_cutout(img, {16}, rng);
        const std::size_t z = count_zeros(out, 0);
        ASSERT_GE(z, 64u);
        ASSERT_LE(z, 256u);
        ASSERT_EQ(count_zeros(out, 1), z);
        ASSERT_EQ(count_zeros(out, 2), z);
    }
}

TEST(Cutout, LengthZeroIsIdentity) {
    RngStream rng(11);
    Image img = fixtures::random_image({3, 8, 8}, rng);
    EXPECT_EQ(apply_cutout(img, {0}, rng), img);
    EXPECT_EQ(apply_cutout(img, {0, CutoutMode::constrained_p50}, rng), img);
}

TEST(Cutout, ZeroMaskExactnessAndBitIdentityOutside) {
    RngStream rng(12);
    for (int i = 0; i < 2000; ++i) {
        const Shape3 shape{1 + rng.uniform_below(3), 4 + rng.uniform_below(20), 4 + rng.uniform_below(20)};
        Image img = fixtures::random_image(shape, rng);
        const CutoutMode mode = i % 2 ? CutoutMode::always_clipped : CutoutMode::constrained_p50;
        const std::size_t L = rng.uniform_below(std::min(shape.height, shape.width) + 1);
        CutoutResult res = apply_cutout_traced(img, {L, mode}, rng);
        const MaskRect r = res.rect.value_or(MaskRect{});
        for (std::size_t c = 0; c < shape.channels; ++c)
            for (std::size_t y = 0; y < shape.height; ++y)
                for (std::size_t x = 0; x < shape.width; ++x) {
                    const float got = res.image(c, y, x);
                    if (r.contains(y, x)) {
                        ASSERT_EQ(std::memcmp(&got, "\0\0\0\0", 4), 0);
                    } else {
                        const float want = img(c, y, x);
                        ASSERT_EQ(std::memcmp(&got, &want, sizeof(float)), 0);
                    }
                }
    }
}

TEST(Cutout, ConstrainedIdentityRate) {
    RngStream rng(13);
    int identity = 0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) {
        auto r = draw_cutout_rect(32, 32, {16, CutoutMode::constrained_p50}, rng);
        if (!r) {
            ++identity;
            continue;
        }
        ASSERT_EQ(r->area(), 256u);
        ASSERT_LE(r->x1, 32u);
        ASSERT_LE(r->y1, 32u);
    }
    EXPECT_GE(identity / double(draws), 0.49);
    EXPECT_LE(identity / double(draws), 0.51);
}

TEST(Cutout, ConstrainedPatchMustFit) {
    RngStream rng(14);
    Image img = Image::zeros({1, 4, 6});
    EXPECT_THROW(apply_cutout(img, {5, CutoutMode::constrained_p50}, rng), ArgumentError);
    EXPECT_NO_THROW(apply_cutout(img, {5, CutoutMode::always_clipped}, rng));
}

TEST(Cutout, DeterministicForSameDerivation) {
    RngStream src(15);
    Image img = fixtures::random_image({3, 16, 16}, src);
    for (std::uint64_t idx = 0; idx < 20; ++idx) {
        RngStream a = RngStream::derive(3, 1, idx), b = RngStream::derive(3, 1, idx);
        ASSERT_EQ(apply_cutout(img, {8}, a), apply_cutout(img, {8}, b));
    }
}

TEST(Cutout, ModeNames) {
    EXPECT_EQ(parse_cutout_mode("always_clipped"), CutoutMode::always_clipped);
    EXPECT_EQ(parse_cutout_mode(to_string(CutoutMode::constrained_p50)), CutoutMode::constrained_p50);
    EXPECT_THROW(parse_cutout_mode("sometimes"), ArgumentError);
}

// --- targeted cutout ---------------------------------------------------------

TEST(Targeted, ConstantMapIsIdentity) {
    RngStream rng(16);
    Image img = fixtures::random_image({3, 4, 4}, rng);
    std::vector<float> fm(4, 3.0f);
    EXPECT_EQ(targeted_cutout(img, {fm, 2, 2}, rng), img);
}

TEST(Targeted, HandComputedBlock) {
    RngStream rng(17);
    Image img = fixtures::random_image({2, 4, 4}, rng, 0.5f, 1.0f);
    std::vector<float> fm{10, 0, 0, 0};
    Image out = targeted_cutout(img, {fm, 2, 2}, rng);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) ASSERT_EQ(out(c, y, x), (y < 2 && x < 2) ? 0.0f : img(c, y, x));
}

TEST(Targeted, MatchesScalarLoopOnRandomMaps) {
    RngStream rng(18);
    for (int t = 0; t < 200; ++t) {
        const std::size_t H = 2 + rng.uniform_below(14), W = 2 + rng.uniform_below(14);
        const std::size_t hf = 1 + rng.uniform_below(H), wf = 1 + rng.uniform_below(W);
        std::vector<float> fm(hf * wf);
        for (float& v : fm) v = static_cast<float>(rng.uniform_below(5));
        Image img = fixtures::random_image({1, H, W}, rng, 0.5f, 1.0f);
        Image out = targeted_cutout(img, {fm, hf, wf}, rng);

        double mean = 0;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) mean += fm[(y * hf / H) * wf + x * wf / W];
        mean /= static_cast<double>(H * W);
        std::size_t expect_masked = 0;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const bool masked = fm[(y * hf / H) * wf + x * wf / W] > mean;
                expect_masked += masked;
                ASSERT_EQ(out(0, y, x), masked ? 0.0f : img(0, y, x));
            }
        ASSERT_EQ(count_zeros(out, 0), expect_masked);
    }
}

TEST(Targeted, Errors) {
    RngStream rng(19);
    Image img = Image::zeros({1, 4, 4});
    EXPECT_THROW(targeted_cutout(img, {{}, 0, 0}, rng), ShapeError);
    std::vector<float> big(25, 1.0f);
    EXPECT_THROW(targeted_cutout(img, {big, 5, 5}, rng), ShapeError);
}

TEST(Targeted, FeatureMapSlice) {
    Tensor4 t(2, 3, 2, 2);
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = static_cast<float>(i);
    FeatureMapView v = feature_map_slice(t, 1, 2);
    EXPECT_EQ(v.values[0], t(1, 2, 0, 0));
    EXPECT_EQ(v.height, 2u);
    EXPECT_THROW(feature_map_slice(t, 2, 0), IndexError);
}

// --- PPM ---------------------------------------------------------------------

TEST(Ppm, EncodesHeaderAndPixels) {
    Image img(3, 1, 2, {0.0f, 1.0f, 0.5f, 2.0f, -1.0f, 0.25f});
    auto bytes = encode_ppm(img);
    const std::string header = "P6\n2 1\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + 6);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
    const std::vector<std::uint8_t> px(bytes.begin() + static_cast<long>(header.size()), bytes.end());
    EXPECT_EQ(px, (std::vector<std::uint8_t>{0, 128, 0, 255, 255, 64}));
}

TEST(Ppm, DenormalizesAndReplicatesGray) {
    DatasetStats st{{0.5}, {0.5}};
    auto bytes = encode_ppm(Image(1, 1, 1, {1.0f}), &st);  // 1*0.5+0.5 = 1.0
    EXPECT_EQ(std::vector<std::uint8_t>(bytes.end() - 3, bytes.end()), (std::vector<std::uint8_t>{255, 255, 255}));
    EXPECT_THROW(encode_ppm(Image::zeros({2, 1, 1})), ShapeError);
}
