#include "cdsr/contrast.hpp"
#include "cdsr/convert.hpp"
#include "cdsr/data.hpp"
#include "cdsr/errors.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace cdsr;
using cdsr::test::random_image;
using cdsr::test::random_tensor;

namespace {

double masked_mean(const ImageBuffer& map, const ImageBuffer& mask, bool inside) {
    double s = 0.0;
    int n = 0;
    for (int y = 0; y < map.height(); ++y)
        for (int x = 0; x < map.width(); ++x)
            if ((mask.at(y, x) > 0.5f) == inside) {
                s += map.at(y, x);
                ++n;
            }
    return n ? s / n : 0.0;
}

ParamStore adjuster_params(std::uint64_t seed) {
    ParamStore p;
    init_params(p, adjuster_param_specs(), seed);
    return p;
}

} // namespace

TEST(Percentile, LinearInterpolation) {
    EXPECT_FLOAT_EQ(percentile({4, 1, 3, 2}, 0.5), 2.5f);
    EXPECT_FLOAT_EQ(percentile({4, 1, 3, 2}, 0.0), 1.0f);
    EXPECT_FLOAT_EQ(percentile({4, 1, 3, 2}, 1.0), 4.0f);
    EXPECT_FLOAT_EQ(percentile({0, 10}, 0.25), 2.5f);
    EXPECT_THROW(percentile({}, 0.5), ArgumentError);
}

TEST(ContrastHeatmap, ConstantImageGivesAllZeroMap) {
    for (float v : {0.0f, 0.3f, 0.9f, 1.0f}) {
        const auto rep = extract_contrast_heatmap(ImageBuffer(16, 20, 3, v));
        EXPECT_EQ(rep.stage, ContrastStage::raw);
        ASSERT_EQ(rep.heatmap.height(), 16);
        ASSERT_EQ(rep.heatmap.width(), 20);
        ASSERT_EQ(rep.heatmap.channels(), 1);
        for (float h : rep.heatmap.samples()) ASSERT_EQ(h, 0.0f);
    }
}

TEST(ContrastHeatmap, RectangularShadowSeparates) {
    ImageBuffer page(64, 64, 3, 0.9f);
    ImageBuffer mask(64, 64, 1, 0.0f);
    for (int y = 16; y < 48; ++y)
        for (int x = 8; x < 40; ++x) {
            for (int c = 0; c < 3; ++c) page.at(y, x, c) = 0.4f;
            mask.at(y, x) = 1.0f;
        }
    const auto rep = extract_contrast_heatmap(page);
    EXPECT_GE(masked_mean(rep.heatmap, mask, true), masked_mean(rep.heatmap, mask, false) + 0.3);
}

TEST(ContrastHeatmap, TwoPixelSaturation) {
    ImageBuffer img(1, 2, 1);
    img.at(0, 0) = 0.0f;
    img.at(0, 1) = 1.0f;
    ContrastConfig cfg;
    cfg.low_percentile = 0.0;
    cfg.high_percentile = 1.0;
    cfg.sigmoid_gain = 1000.0f;
    cfg.blur_sigma = 0.0f;
    const auto rep = extract_contrast_heatmap(img, cfg);
    EXPECT_NEAR(rep.heatmap.at(0, 0), 1.0f, 1e-6);
    EXPECT_NEAR(rep.heatmap.at(0, 1), 0.0f, 1e-6);
}

TEST(ContrastHeatmap, InvariantToLuminanceOffset) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const ImageBuffer img = random_image(32, 32, 3, seed, 0.2f, 0.7f);
        ImageBuffer shifted = img;
        for (float& v : shifted.samples()) v += 0.15f;
        const auto a = extract_contrast_heatmap(img);
        const auto b = extract_contrast_heatmap(shifted);
        for (std::size_t i = 0; i < a.heatmap.size(); ++i) {
            ASSERT_NEAR(a.heatmap.samples()[i], b.heatmap.samples()[i], 1e-5) << "seed " << seed << " i " << i;
        }
    }
}

TEST(ContrastHeatmap, DeterministicAndInRange) {
    const ImageBuffer img = random_image(40, 24, 3, 9);
    const auto a = extract_contrast_heatmap(img);
    const auto b = extract_contrast_heatmap(img);
    ASSERT_EQ(a.heatmap.size(), b.heatmap.size());
    for (std::size_t i = 0; i < a.heatmap.size(); ++i) {
        ASSERT_EQ(a.heatmap.samples()[i], b.heatmap.samples()[i]);
        ASSERT_GE(a.heatmap.samples()[i], 0.0f);
        ASSERT_LE(a.heatmap.samples()[i], 1.0f);
    }
}

TEST(ContrastHeatmap, SyntheticShadowsScoreHigherInsideMask) {
    for (int i = 0; i < 6; ++i) {
        const TrainSample s = synth_pair(synth_item_config(64, 11, i));
        const auto rep = extract_contrast_heatmap(s.shadow);
        EXPECT_GE(masked_mean(rep.heatmap, *s.shadow_mask, true), masked_mean(rep.heatmap, *s.shadow_mask, false) + 0.2)
            << s.provenance;
    }
}

TEST(ContrastHeatmap, RejectsInvalidConfig) {
    ContrastConfig cfg;
    cfg.low_percentile = 0.9;
    cfg.high_percentile = 0.1;
    EXPECT_THROW(extract_contrast_heatmap(ImageBuffer(8, 8, 3, 0.5f), cfg), ArgumentError);
}

TEST(Adjuster, OutputStrictlyInsideUnitInterval) {
    const ParamStore p = adjuster_params(3);
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
        ContrastRepresentation raw{random_image(24, 24, 1, seed), ContrastStage::raw};
        const auto adj = adjust_contrast(raw, p);
        EXPECT_EQ(adj.stage, ContrastStage::adjusted);
        for (float v : adj.heatmap.samples()) {
            ASSERT_GT(v, 0.0f);
            ASSERT_LT(v, 1.0f);
        }
    }
}

TEST(Adjuster, PreservesSpatialDims) {
    const ParamStore p = adjuster_params(4);
    for (int n : {64, 96}) {
        const auto adj = adjust_contrast({ImageBuffer(n, n, 1, 0.3f), ContrastStage::raw}, p);
        EXPECT_EQ(adj.heatmap.height(), n);
        EXPECT_EQ(adj.heatmap.width(), n);
        EXPECT_EQ(adj.heatmap.channels(), 1);
    }
}

TEST(Adjuster, ZeroFinalLayerGivesHalf) {
    ParamStore p = adjuster_params(5);
    p.set("adjust.conv3.weight", Tensor(p.get("adjust.conv3.weight").shape()));
    p.set("adjust.conv3.bias", Tensor(p.get("adjust.conv3.bias").shape()));
    const auto adj = adjust_contrast({random_image(16, 16, 1, 6), ContrastStage::raw}, p);
    for (float v : adj.heatmap.samples()) ASSERT_EQ(v, 0.5f);
}

TEST(Adjuster, RejectsAdjustedInputAndBadShapes) {
    ParamStore p = adjuster_params(7);
    const ContrastRepresentation adjusted{ImageBuffer(8, 8, 1, 0.5f), ContrastStage::adjusted};
    EXPECT_THROW(adjust_contrast(adjusted, p), ArgumentError);
    p.set("adjust.conv2.weight", Tensor({16, 8, 3, 3}));
    EXPECT_THROW(adjust_contrast({ImageBuffer(8, 8, 1, 0.5f), ContrastStage::raw}, p), ShapeError);
}

TEST(Adjuster, GradientCheckOn8x8) {
    ParamStore p = adjuster_params(8);
    const Tensor heat = image_to_tensor(random_image(8, 8, 1, 9));
    const Tensor target = image_to_tensor(random_image(8, 8, 1, 10));
    const auto f = [&](ParamBinding& b) {
        return ag::mse(adjuster_forward(b, ag::Var::constant(heat)), ag::Var::constant(target));
    };
    const auto r = nn::grad_check(f, p, p.names(), {1e-3f, 60, 1});
    EXPECT_LT(r.max_rel_error, 1e-2) << r.worst_name << "[" << r.worst_index << "] fd=" << r.worst_numeric
                                     << " ad=" << r.worst_analytic;
}
