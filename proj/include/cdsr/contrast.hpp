#pragma once

#include "cdsr/autograd.hpp"
#include "cdsr/image.hpp"
#include "cdsr/nn.hpp"
#include "cdsr/param_store.hpp"

#include <optional>
#include <vector>

namespace cdsr {

enum class ContrastStage { raw, adjusted };

/// Single-channel heatmap in [0, 1] with the source image's spatial dims.
/// High values mark shadow.
struct ContrastRepresentation {
    ImageBuffer heatmap;
    ContrastStage stage = ContrastStage::raw;
};

struct ContrastConfig {
    double low_percentile = 0.02;
    double high_percentile = 0.98;
    float sigmoid_gain = 10.0f;
    float blur_sigma = 2.0f;

    void validate() const;
};

/// Linear-interpolated percentile (p in [0, 1]) of the values.
float percentile(std::vector<float> values, double p);

/// Maps the low/high percentiles of a single-channel image to 0/1 and
/// clamps. Empty when the two percentiles coincide (no contrast).
std::optional<ImageBuffer> percentile_stretch(const ImageBuffer& gray, double low, double high);

/// Classical heatmap: luminance, percentile stretch, sigmoid boost
/// 1/(1+exp(-gain(v-0.5))), inversion, Gaussian blur, clamp. Degenerate
/// images (no spread between the percentiles) give an all-zero map.
ContrastRepresentation extract_contrast_heatmap(const ImageBuffer& img, const ContrastConfig& cfg = {});

/// Learned adjuster: three 3x3 convs 1->16->16->1, leaky slope 0.2 between
/// layers, sigmoid output. Parameters live under "adjust.".
inline constexpr int kAdjusterHidden = 16;
inline constexpr float kAdjusterSlope = 0.2f;
nn::ParamSpecs adjuster_param_specs();
ag::Var adjuster_forward(ParamBinding& p, const ag::Var& heatmap);

/// c = a(c_h); requires a raw representation.
ContrastRepresentation adjust_contrast(const ContrastRepresentation& raw, const ParamStore& params);

} // namespace cdsr
