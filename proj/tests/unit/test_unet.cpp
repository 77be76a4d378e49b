#include "cdsr/convert.hpp"
#include "cdsr/data.hpp"
#include "cdsr/errors.hpp"
#include "cdsr/metrics.hpp"
#include "cdsr/model.hpp"
#include "cdsr/optim.hpp"
#include "cdsr/unet.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

using namespace cdsr;
using cdsr::test::random_image;
using cdsr::test::random_tensor;

namespace {

const BaseUNetConfig& desk_base() {
    static const BaseUNetConfig cfg = ModelConfig::desk().base;
    return cfg;
}

ParamStore base_params(std::uint64_t seed) {
    ParamStore p;
    init_params(p, base_param_specs(desk_base()), seed);
    return p;
}

} // namespace

TEST(BaseUNet, OutputShapeMatchesInput) {
    const ParamStore p = base_params(0);
    for (int n : {64, 128}) {
        const Tensor out = base_forward(p, desk_base(), random_tensor({1, 3, n, n}, n));
        EXPECT_EQ(out.shape(), (Shape{1, 3, n, n}));
    }
}

TEST(BaseUNet, OutputInUnitRangeForAnyFiniteInput) {
    const ParamStore p = base_params(1);
    for (float scale : {1.0f, 10.0f, 1000.0f}) {
        const Tensor out = base_forward(p, desk_base(), random_tensor({2, 3, 16, 16}, 7, scale));
        for (float v : out.values()) {
            ASSERT_GE(v, 0.0f);
            ASSERT_LE(v, 1.0f);
        }
    }
}

TEST(BaseUNet, DeterministicForward) {
    const ParamStore p = base_params(2);
    const Tensor x = image_to_tensor(random_image(32, 32, 3, 3));
    EXPECT_EQ(base_forward(p, desk_base(), x).storage(), base_forward(p, desk_base(), x).storage());
}

TEST(BaseUNet, RejectsIndivisibleDims) {
    const ParamStore p = base_params(3);
    EXPECT_THROW(base_forward(p, desk_base(), Tensor({1, 3, 18, 16})), ShapeError);
    EXPECT_THROW(base_forward(p, desk_base(), Tensor({1, 4, 16, 16})), ShapeError);
}

TEST(BaseUNet, RejectsParameterShapeMismatch) {
    ParamStore p = base_params(4);
    const std::string name = p.names().front();
    Shape s = p.get(name).shape();
    s[0] += 1;
    p.set(name, Tensor(s));
    EXPECT_THROW(base_forward(p, desk_base(), Tensor({1, 3, 16, 16})), ShapeError);
}

TEST(BaseLoss, ClosedForms) {
    const Tensor y = random_tensor({2, 3, 8, 8}, 5);
    EXPECT_EQ(base_loss(y, y), 0.0);
    Tensor shifted = y;
    for (float& v : shifted.values()) v += 1.0f;
    EXPECT_NEAR(base_loss(shifted, y), 1.0, 1e-6);
}

TEST(BaseLoss, MatchesDoubleLoop) {
    const Tensor a = random_tensor({2, 3, 9, 7}, 6);
    const Tensor b = random_tensor({2, 3, 9, 7}, 7);
    double ref = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = static_cast<double>(a[i]) - b[i];
        ref += d * d;
    }
    ref /= static_cast<double>(a.size());
    EXPECT_NEAR(base_loss(a, b), ref, 1e-6);
    EXPECT_NEAR(base_loss(ag::Var::constant(a), ag::Var::constant(b)).scalar(), ref, 1e-6);
}

TEST(BaseLoss, NonNegativeAndZeroOnlyWhenEqual) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Tensor a = random_tensor({1, 3, 4, 4}, seed);
        Tensor b = a;
        EXPECT_EQ(base_loss(a, b), 0.0);
        b[seed] += 1e-3f;
        EXPECT_GT(base_loss(a, b), 0.0);
    }
}

TEST(BaseLoss, RejectsShapeMismatch) {
    EXPECT_THROW(base_loss(Tensor({1, 3, 4, 4}), Tensor({1, 3, 4, 5})), ShapeError);
}

TEST(BaseUNet, GradientCheckOn8x8) {
    ParamStore p = base_params(8);
    const TrainSample s = synth_pair(synth_item_config(8, 0, 0));
    const Tensor x = image_to_tensor(s.shadow), y = image_to_tensor(s.clean);
    const auto f = [&](ParamBinding& b) {
        return base_loss(base_forward(b, desk_base(), ag::Var::constant(x)), ag::Var::constant(y));
    };
    const auto r = nn::grad_check(f, p, p.names(), {1e-3f, 50, 0});
    EXPECT_LT(r.max_rel_error, 1e-2) << r.worst_name << "[" << r.worst_index << "] fd=" << r.worst_numeric
                                     << " ad=" << r.worst_analytic;
}

TEST(BaseUNet, GradientDirectionDerivativeOn8x8) {
    ParamStore p = base_params(8);
    const TrainSample s = synth_pair(synth_item_config(8, 0, 0));
    const Tensor x = image_to_tensor(s.shadow), y = image_to_tensor(s.clean);
    const auto f = [&](ParamBinding& b) {
        return base_loss(base_forward(b, desk_base(), ag::Var::constant(x)), ag::Var::constant(y));
    };
    const auto r = nn::gradient_direction_check(f, p, p.names(), 1e-3f);
    EXPECT_GT(r.analytic, 0.0);
    EXPECT_LT(r.rel_error, 1e-3) << "fd=" << r.numeric << " |g|=" << r.analytic;
}

TEST(BaseUNet, OverfitsSinglePairIn500Steps) {
    ParamStore p = base_params(9);
    const TrainSample s = synth_pair(synth_item_config(64, 0, 0));
    const Tensor x = image_to_tensor(s.shadow), y = image_to_tensor(s.clean);
    AdamWState opt = AdamWState::zeros_like(p);
    const AdamWConfig cfg{1e-4, 0.9, 0.999, 1e-4, 1e-8};
    for (int step = 0; step < 500; ++step) {
        ParamBinding b(p, true);
        ag::backward(base_loss(base_forward(b, desk_base(), ag::Var::constant(x)), ag::Var::constant(y)));
        adamw_step(p, b.gradients(), opt, cfg);
    }
    const ImageBuffer x_hat = tensor_to_image(base_forward(p, desk_base(), x));
    EXPECT_GT(psnr(x_hat, s.clean), psnr(s.shadow, s.clean));
}
