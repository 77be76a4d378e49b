#include "cdsr/contrast.hpp"

#include "cdsr/convert.hpp"
#include "cdsr/errors.hpp"

#include <algorithm>
#include <cmath>

namespace cdsr {

void ContrastConfig::validate() const {
    if (!(0.0 <= low_percentile && low_percentile < high_percentile && high_percentile <= 1.0)) {
        throw ArgumentError("ContrastConfig: need 0 <= low_percentile < high_percentile <= 1");
    }
    if (!(sigmoid_gain > 0.0f)) throw ArgumentError("ContrastConfig: sigmoid_gain must be > 0");
    if (!(blur_sigma >= 0.0f)) throw ArgumentError("ContrastConfig: blur_sigma must be >= 0");
}

float percentile(std::vector<float> values, double p) {
    if (values.empty()) throw ArgumentError("percentile of empty set");
    const double pos = std::clamp(p, 0.0, 1.0) * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    std::nth_element(values.begin(), values.begin() + lo, values.end());
    const float a = values[lo];
    if (hi == lo) return a;
    const float b = *std::min_element(values.begin() + lo + 1, values.end());
    return static_cast<float>(a + (pos - lo) * (b - a));
}

std::optional<ImageBuffer> percentile_stretch(const ImageBuffer& gray, double low, double high) {
    if (gray.channels() != 1) throw ShapeError("percentile_stretch: expected single channel");
    std::vector<float> v(gray.samples().begin(), gray.samples().end());
    const float lo = percentile(v, low);
    const float hi = percentile(std::move(v), high);
    if (!(hi - lo > 1e-12f)) return std::nullopt;
    ImageBuffer out = gray;
    const float inv = 1.0f / (hi - lo);
    for (float& s : out.samples()) s = std::clamp((s - lo) * inv, 0.0f, 1.0f);
    return out;
}

ContrastRepresentation extract_contrast_heatmap(const ImageBuffer& img, const ContrastConfig& cfg) {
    cfg.validate();
    if (img.empty()) throw ShapeError("extract_contrast_heatmap: empty image");
    const ImageBuffer lum = to_luminance(img);
    auto stretched = percentile_stretch(lum, cfg.low_percentile, cfg.high_percentile);
    if (!stretched) return {ImageBuffer(img.height(), img.width(), 1, 0.0f), ContrastStage::raw};

    ImageBuffer map = std::move(*stretched);
    for (float& v : map.samples()) {
        const float boosted = 1.0f / (1.0f + std::exp(-cfg.sigmoid_gain * (v - 0.5f)));
        v = 1.0f - boosted;
    }
    map = gaussian_blur(map, cfg.blur_sigma);
    clamp_unit(map);
    return {std::move(map), ContrastStage::raw};
}

nn::ParamSpecs adjuster_param_specs() {
    nn::ParamSpecs specs;
    nn::add_conv_specs(specs, "adjust.conv1", 1, kAdjusterHidden, 3);
    nn::add_conv_specs(specs, "adjust.conv2", kAdjusterHidden, kAdjusterHidden, 3);
    nn::add_conv_specs(specs, "adjust.conv3", kAdjusterHidden, 1, 3);
    return specs;
}

ag::Var adjuster_forward(ParamBinding& p, const ag::Var& heatmap) {
    if (heatmap.value().rank() != 4 || heatmap.dim(1) != 1) {
        throw ShapeError("adjuster: expected [N,1,H,W] heatmap, got " + shape_str(heatmap.shape()));
    }
    ag::Var h = ag::leaky_relu(nn::conv(p, "adjust.conv1", heatmap, 1, 1), kAdjusterSlope);
    h = ag::leaky_relu(nn::conv(p, "adjust.conv2", h, 1, 1), kAdjusterSlope);
    return ag::sigmoid(nn::conv(p, "adjust.conv3", h, 1, 1));
}

ContrastRepresentation adjust_contrast(const ContrastRepresentation& raw, const ParamStore& params) {
    if (raw.stage != ContrastStage::raw) throw ArgumentError("adjust_contrast: input must be a raw heatmap");
    ParamBinding p(params, false);
    const ag::Var out = adjuster_forward(p, ag::Var::constant(image_to_tensor(raw.heatmap)));
    return {tensor_to_image(out.value()), ContrastStage::adjusted};
}

} // namespace cdsr
