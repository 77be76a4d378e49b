#include "cdsr/unet.hpp"

#include "cdsr/errors.hpp"

#include <vector>

namespace cdsr {

void UNetConfig::validate() const {
    if (in_channels < 1 || out_channels < 1) throw ArgumentError("UNetConfig: channel counts must be >= 1");
    if (depth < 1) throw ArgumentError("UNetConfig: depth must be >= 1");
    if (base_width < 1 || norm_groups < 1 || base_width % norm_groups != 0) {
        throw ArgumentError("UNetConfig: base_width must be divisible by norm_groups");
    }
}

namespace {

std::string level_name(const std::string& prefix, const char* part, int level) {
    return prefix + "." + part + std::to_string(level);
}

std::string attn_name(const UNetExtras& extras, int level) { return extras.attn_prefix + ".l" + std::to_string(level); }

nn::AttentionBlockConfig attn_config(const UNetConfig& cfg, const UNetExtras& extras, int level) {
    return {cfg.width(level), extras.context_dim, cfg.width(level), level};
}

void add_block_specs(nn::ParamSpecs& s, const std::string& name, int in, int out, int time_dim) {
    nn::add_conv_specs(s, name + ".conv1", in, out, 3);
    nn::add_norm_specs(s, name + ".norm1", out);
    if (time_dim > 0) nn::add_linear_specs(s, name + ".temb", time_dim, out);
    nn::add_conv_specs(s, name + ".conv2", out, out, 3);
    nn::add_norm_specs(s, name + ".norm2", out);
}

ag::Var block(ParamBinding& p, const std::string& name, const ag::Var& x, int groups, const ag::Var* temb) {
    ag::Var h = ag::silu(nn::norm(p, name + ".norm1", nn::conv(p, name + ".conv1", x, 1, 1), groups));
    if (temb) h = ag::add_channel(h, nn::dense(p, name + ".temb", *temb));
    return ag::silu(nn::norm(p, name + ".norm2", nn::conv(p, name + ".conv2", h, 1, 1), groups));
}

} // namespace

nn::ParamSpecs unet_param_specs(const std::string& prefix, const UNetConfig& cfg, const UNetExtras& extras) {
    cfg.validate();
    nn::ParamSpecs s;
    const int td = extras.time_embed_dim;
    for (int l = 0; l < cfg.depth; ++l) {
        add_block_specs(s, level_name(prefix, "enc", l), l == 0 ? cfg.in_channels : cfg.width(l - 1), cfg.width(l), td);
        if (l + 1 < cfg.depth) nn::add_conv_specs(s, level_name(prefix, "down", l), cfg.width(l), cfg.width(l), 3);
    }
    for (int l = cfg.depth - 2; l >= 0; --l) {
        const std::string dec = level_name(prefix, "dec", l);
        nn::add_conv_specs(s, dec + ".up", cfg.width(l + 1), cfg.width(l), 3);
        add_block_specs(s, dec, 2 * cfg.width(l), cfg.width(l), td);
    }
    nn::add_conv_specs(s, prefix + ".head", cfg.width(0), cfg.out_channels, 1);
    for (int l : extras.attn_levels) {
        if (l < 0 || l >= cfg.depth) throw ArgumentError("attention level " + std::to_string(l) + " out of range");
        nn::add_cross_attention_specs(s, attn_name(extras, l), attn_config(cfg, extras, l));
    }
    return s;
}

std::vector<std::string> unet_zero_init(const UNetConfig&, const UNetExtras& extras) {
    std::vector<std::string> out;
    for (int l : extras.attn_levels) {
        for (auto& n : nn::cross_attention_zero_init(attn_name(extras, l))) out.push_back(std::move(n));
    }
    return out;
}

ag::Var unet_forward(ParamBinding& p, const std::string& prefix, const UNetConfig& cfg, const ag::Var& x,
                     const UNetExtras& extras, const UNetInputs& inputs) {
    cfg.validate();
    if (x.value().rank() != 4 || x.dim(1) != cfg.in_channels) {
        throw ShapeError(prefix + ": expected [N," + std::to_string(cfg.in_channels) + ",H,W] input, got " +
                         shape_str(x.shape()));
    }
    const int m = cfg.size_multiple();
    if (x.dim(2) % m != 0 || x.dim(3) % m != 0) {
        throw ShapeError(prefix + ": spatial dims " + std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)) +
                         " not divisible by " + std::to_string(m));
    }
    const ag::Var* temb = extras.time_embed_dim > 0 ? inputs.time_embedding : nullptr;
    if (extras.time_embed_dim > 0 && !temb) throw ArgumentError(prefix + ": time embedding required");

    auto attend = [&](const ag::Var& h, int level) {
        if (!inputs.context || !extras.attn_levels.count(level)) return h;
        Tensor* sink = level == inputs.capture_level ? inputs.captured : nullptr;
        return nn::cross_attention(p, attn_name(extras, level), h, *inputs.context, attn_config(cfg, extras, level),
                                   sink);
    };

    std::vector<ag::Var> skips;
    ag::Var h = x;
    for (int l = 0; l < cfg.depth; ++l) {
        h = block(p, level_name(prefix, "enc", l), h, nn::norm_groups_for(cfg.width(l), cfg.norm_groups), temb);
        if (l + 1 < cfg.depth) {
            skips.push_back(h);
            h = nn::conv(p, level_name(prefix, "down", l), h, 2, 1);
        } else {
            h = attend(h, l);
        }
    }
    for (int l = cfg.depth - 2; l >= 0; --l) {
        const std::string dec = level_name(prefix, "dec", l);
        h = nn::conv(p, dec + ".up", ag::upsample_nearest2x(h), 1, 1);
        h = ag::concat_channels(h, skips[l]);
        h = block(p, dec, h, nn::norm_groups_for(cfg.width(l), cfg.norm_groups), temb);
        h = attend(h, l);
    }
    return nn::conv(p, prefix + ".head", h, 1, 0);
}

nn::ParamSpecs base_param_specs(const BaseUNetConfig& cfg) { return unet_param_specs(kBasePrefix, cfg); }

ag::Var base_forward(ParamBinding& p, const BaseUNetConfig& cfg, const ag::Var& x) {
    return ag::sigmoid(unet_forward(p, kBasePrefix, cfg, x));
}

Tensor base_forward(const ParamStore& params, const BaseUNetConfig& cfg, const Tensor& x) {
    ParamBinding p(params, false);
    return base_forward(p, cfg, ag::Var::constant(x)).value();
}

ag::Var base_loss(const ag::Var& x_hat, const ag::Var& y) { return ag::mse(x_hat, y); }

double base_loss(const Tensor& x_hat, const Tensor& y) {
    return base_loss(ag::Var::constant(x_hat), ag::Var::constant(y)).item();
}

} // namespace cdsr
