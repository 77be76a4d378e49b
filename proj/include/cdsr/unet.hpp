#pragma once

#include "cdsr/autograd.hpp"
#include "cdsr/nn.hpp"
#include "cdsr/param_store.hpp"

#include <functional>
#include <set>
#include <string>

namespace cdsr {

/// Encoder-decoder with skip connections. Level l has base_width * 2^l
/// channels; every level runs [conv3x3 -> group norm -> SiLU] x 2, the
/// encoder downsamples with a stride-2 conv and the decoder upsamples with
/// nearest-neighbour 2x followed by a conv, then concatenates the skip.
struct UNetConfig {
    int in_channels = 3;
    int out_channels = 3;
    int base_width = 16;
    int depth = 3;
    int norm_groups = 8;

    void validate() const;
    int width(int level) const { return base_width << level; }
    /// Spatial dims must be divisible by this.
    int size_multiple() const { return 1 << (depth - 1); }
};

using BaseUNetConfig = UNetConfig;

/// Optional time and cross-attention hooks used by the denoiser.
struct UNetExtras {
    int time_embed_dim = 0;             // 0 disables per-level time injection
    std::set<int> attn_levels;          // levels carrying cross-attention
    int context_dim = 0;
    std::string attn_prefix = "attn";   // attention params: <attn_prefix>.l<level>.*
};

/// Per-forward inputs matching UNetExtras.
struct UNetInputs {
    const ag::Var* time_embedding = nullptr;   // [N, time_embed_dim]
    const ag::Var* context = nullptr;          // [N, L, context_dim]; null skips attention
    int capture_level = -1;                    // attention weights to capture
    Tensor* captured = nullptr;
};

nn::ParamSpecs unet_param_specs(const std::string& prefix, const UNetConfig& cfg, const UNetExtras& extras = {});
/// Names that must start at zero (attention output projections).
std::vector<std::string> unet_zero_init(const UNetConfig& cfg, const UNetExtras& extras);

/// Raw head output (before any output nonlinearity).
ag::Var unet_forward(ParamBinding& p, const std::string& prefix, const UNetConfig& cfg, const ag::Var& x,
                     const UNetExtras& extras = {}, const UNetInputs& inputs = {});

/// Coarse remover: sigmoid(unet(x)) with parameters under "base.".
inline const std::string kBasePrefix = "base";
nn::ParamSpecs base_param_specs(const BaseUNetConfig& cfg);
ag::Var base_forward(ParamBinding& p, const BaseUNetConfig& cfg, const ag::Var& x);
Tensor base_forward(const ParamStore& params, const BaseUNetConfig& cfg, const Tensor& x);

/// Mean of (y - x_hat)^2 over every element of the batch.
ag::Var base_loss(const ag::Var& x_hat, const ag::Var& y);
double base_loss(const Tensor& x_hat, const Tensor& y);

} // namespace cdsr
