#include "cdsr/diffusion.hpp"

#include "cdsr/convert.hpp"
#include "cdsr/errors.hpp"
#include "cdsr/rng.hpp"

#include <algorithm>
#include <cmath>

namespace cdsr {

double NoiseSchedule::alpha_bar_at(int t) const {
    if (t == 0) return 1.0;
    if (t < 0 || t > steps) throw ArgumentError("timestep " + std::to_string(t) + " outside [0, " +
                                                std::to_string(steps) + "]");
    return alpha_bar[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule build_schedule(int steps, double beta_start, double beta_end) {
    if (steps < 1) throw ArgumentError("build_schedule: T must be >= 1");
    if (!(0.0 < beta_start && beta_start < 1.0 && beta_end < 1.0 && (steps == 1 || beta_start < beta_end))) {
        throw ArgumentError("build_schedule: need 0 < beta_start < beta_end < 1");
    }
    std::vector<double> betas;
    for (int i = 0; i < steps; ++i) {
        betas.push_back(steps == 1 ? beta_start
                                   : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (steps - 1));
    }
    return schedule_from_betas(std::move(betas));
}

NoiseSchedule schedule_from_betas(std::vector<double> betas) {
    if (betas.empty()) throw ArgumentError("schedule_from_betas: empty schedule");
    NoiseSchedule s;
    s.steps = static_cast<int>(betas.size());
    double prod = 1.0;
    for (double b : betas) {
        if (!(b > 0.0 && b < 1.0)) throw ArgumentError("schedule_from_betas: every beta must lie in (0, 1)");
        s.alpha.push_back(1.0 - b);
        prod *= 1.0 - b;
        s.alpha_bar.push_back(prod);
    }
    s.beta = std::move(betas);
    return s;
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.steps) throw ArgumentError("forward_noise: t out of range");
    if (x0.shape() != noise.shape()) throw ShapeError("forward_noise: noise shape mismatch");
    const double ab = sched.alpha_bar_at(t);
    const auto a = static_cast<float>(std::sqrt(ab));
    const auto b = static_cast<float>(std::sqrt(1.0 - ab));
    Tensor out(x0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * noise[i];
    return out;
}

Tensor forward_step(const Tensor& x_prev, int t, const Tensor& noise, const NoiseSchedule& sched) {
    if (t < 1 || t > sched.steps) throw ArgumentError("forward_step: t out of range");
    if (x_prev.shape() != noise.shape()) throw ShapeError("forward_step: noise shape mismatch");
    const double a = std::sqrt(sched.alpha_at(t));
    const double b = std::sqrt(sched.beta_at(t));
    Tensor out(x_prev.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = static_cast<float>(a * x_prev[i] + b * noise[i]);
    }
    return out;
}

Posterior posterior(const NoiseSchedule& sched, int t, int t_prev) {
    if (t < 1 || t > sched.steps || t_prev < 0 || t_prev >= t) throw ArgumentError("posterior: invalid timesteps");
    const double ab_t = sched.alpha_bar_at(t);
    const double ab_prev = sched.alpha_bar_at(t_prev);
    const double beta = t_prev == t - 1 ? sched.beta_at(t) : 1.0 - ab_t / ab_prev;
    const double alpha = t_prev == t - 1 ? sched.alpha_at(t) : ab_t / ab_prev;
    Posterior p;
    p.x0_coef = std::sqrt(ab_prev) * beta / (1.0 - ab_t);
    p.xt_coef = std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t);
    p.variance = beta * (1.0 - ab_prev) / (1.0 - ab_t);
    return p;
}

std::vector<int> respaced_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) {
        throw ArgumentError("sampler steps " + std::to_string(steps) + " must lie in [1, " + std::to_string(T) + "]");
    }
    std::vector<int> out;
    for (int k = 1; k <= steps; ++k) {
        out.push_back(static_cast<int>(std::lround(static_cast<double>(k) * T / steps)));
    }
    return out;
}

void DenoiserConfig::validate() const {
    unet.validate();
    if (unet.in_channels != 2 * unet.out_channels) {
        throw ArgumentError("DenoiserConfig: in_channels must be twice the image channels");
    }
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw ArgumentError("DenoiserConfig: bad time_embed_dim");
    if (context_dim < 1) throw ArgumentError("DenoiserConfig: context_dim must be >= 1");
}

UNetExtras DenoiserConfig::extras(bool with_attention) const {
    UNetExtras e;
    e.time_embed_dim = time_embed_dim;
    e.context_dim = context_dim;
    if (with_attention) e.attn_levels = attn_levels;
    e.attn_prefix = "attn";
    return e;
}

nn::ParamSpecs context_encoder_specs(int context_dim) {
    nn::ParamSpecs s;
    nn::add_conv_specs(s, "ctx.conv1", 1, 16, 3);
    nn::add_conv_specs(s, "ctx.conv2", 16, 32, 3);
    nn::add_conv_specs(s, "ctx.conv3", 32, context_dim, 3);
    return s;
}

ag::Var encode_context(ParamBinding& p, const ag::Var& heatmap, int context_dim) {
    if (heatmap.value().rank() != 4 || heatmap.dim(1) != 1) {
        throw ShapeError("encode_context: expected [N,1,H,W], got " + shape_str(heatmap.shape()));
    }
    if (heatmap.dim(2) < kContextStride || heatmap.dim(3) < kContextStride) {
        throw ShapeError("encode_context: heatmap smaller than 8x8");
    }
    // Edge-replicating padding: a constant heatmap gives identical tokens.
    ag::Var h = ag::silu(nn::conv(p, "ctx.conv1", ag::pad_replicate(heatmap, 1), 2, 0));
    h = ag::silu(nn::conv(p, "ctx.conv2", ag::pad_replicate(h, 1), 2, 0));
    h = nn::conv(p, "ctx.conv3", ag::pad_replicate(h, 1), 2, 0);
    if (h.dim(1) != context_dim) throw ShapeError("encode_context: ctx.conv3 does not produce context_dim channels");
    return ag::to_tokens(h);
}

ContextTokens encode_context(const ContrastRepresentation& c, const ParamStore& params, int context_dim) {
    if (c.stage != ContrastStage::adjusted) throw ArgumentError("encode_context: expects an adjusted representation");
    ParamBinding p(params, false);
    const ag::Var heat = ag::Var::constant(image_to_tensor(c.heatmap));
    ContextTokens out;
    out.tokens = encode_context(p, heat, context_dim).value();
    // Each stride-2, pad-1, 3x3 conv maps n -> ceil(n / 2).
    auto reduce = [](int n) {
        for (int i = 0; i < 3; ++i) n = (n + 1) / 2;
        return n;
    };
    out.grid_height = reduce(c.heatmap.height());
    out.grid_width = reduce(c.heatmap.width());
    return out;
}

nn::ParamSpecs denoiser_param_specs(const DenoiserConfig& cfg, bool with_attention) {
    cfg.validate();
    nn::ParamSpecs s = unet_param_specs("denoise", cfg.unet, cfg.extras(with_attention));
    nn::add_linear_specs(s, "denoise.time.fc", cfg.time_embed_dim, cfg.time_embed_dim);
    return s;
}

std::vector<std::string> denoiser_zero_init(const DenoiserConfig& cfg, bool with_attention) {
    return unet_zero_init(cfg.unet, cfg.extras(with_attention));
}

Tensor timestep_embedding(std::span<const int> t, int dim) {
    const int half = dim / 2;
    Tensor out({static_cast<int>(t.size()), dim});
    for (std::size_t n = 0; n < t.size(); ++n) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            const double arg = t[n] * freq;
            out[n * dim + i] = static_cast<float>(std::sin(arg));
            out[n * dim + half + i] = static_cast<float>(std::cos(arg));
        }
    }
    return out;
}

ag::Var denoise_predict(ParamBinding& p, const DenoiserConfig& cfg, const ag::Var& x_t, std::span<const int> t,
                        const ag::Var& x_hat, const ag::Var* context, const DenoiseCapture& capture) {
    if (x_t.shape() != x_hat.shape()) {
        throw ShapeError("denoise_predict: x_t " + shape_str(x_t.shape()) + " vs condition " +
                         shape_str(x_hat.shape()));
    }
    if (static_cast<int>(t.size()) != x_t.dim(0)) throw ShapeError("denoise_predict: one timestep per batch item");
    const ag::Var temb =
        ag::silu(nn::dense(p, "denoise.time.fc", ag::Var::constant(timestep_embedding(t, cfg.time_embed_dim))));
    UNetInputs in;
    in.time_embedding = &temb;
    in.context = context;
    in.capture_level = capture.level;
    in.captured = capture.weights;
    const ag::Var input = ag::concat_channels(x_t, x_hat);
    return ag::sigmoid(unet_forward(p, "denoise", cfg.unet, input, cfg.extras(context != nullptr), in));
}

Tensor denoise_predict(const ParamStore& params, const DenoiserConfig& cfg, const Tensor& x_t, int t,
                       const Tensor& x_hat, const ContextTokens* context) {
    ParamBinding p(params, false);
    std::vector<int> ts(static_cast<std::size_t>(x_t.dim(0)), t);
    ag::Var ctx;
    if (context) ctx = ag::Var::constant(context->tokens);
    return denoise_predict(p, cfg, ag::Var::constant(x_t), ts, ag::Var::constant(x_hat), context ? &ctx : nullptr)
        .value();
}

Tensor sample(const X0Predictor& predict, const Shape& shape, const NoiseSchedule& sched, int steps,
              std::uint64_t seed) {
    const std::vector<int> ts = respaced_timesteps(sched.steps, steps);
    Rng rng(seed);
    Tensor x(shape);
    for (float& v : x.values()) v = static_cast<float>(rng.normal());
    for (int k = steps - 1; k >= 0; --k) {
        const int t = ts[k];
        const int t_prev = k > 0 ? ts[k - 1] : 0;
        const Tensor x0 = predict(x, t);
        const Posterior post = posterior(sched, t, t_prev);
        const auto c0 = static_cast<float>(post.x0_coef), ct = static_cast<float>(post.xt_coef);
        const auto sd = static_cast<float>(std::sqrt(post.variance));
        for (std::size_t i = 0; i < x.size(); ++i) {
            float v = c0 * x0[i] + ct * x[i];
            if (t_prev > 0) v += sd * static_cast<float>(rng.normal());
            x[i] = v;
        }
    }
    for (float& v : x.values()) v = std::clamp(v, 0.0f, 1.0f);
    return x;
}

Tensor sample(const Tensor& x_hat, const ContextTokens* context, const NoiseSchedule& sched, const ParamStore& params,
              const DenoiserConfig& cfg, std::uint64_t seed, int steps) {
    if (steps > sched.steps) throw ArgumentError("sample: steps exceed schedule length");
    return sample([&](const Tensor& x_t, int t) { return denoise_predict(params, cfg, x_t, t, x_hat, context); },
                  x_hat.shape(), sched, steps, seed);
}

ImageBuffer attention_weights_to_map(const Tensor& weights, int grid_height, int grid_width, int out_height,
                                     int out_width, AttentionReduction reduction) {
    if (weights.rank() != 3 || weights.dim(1) != grid_height * grid_width) {
        throw ShapeError("attention weights " + shape_str(weights.shape()) + " do not match grid");
    }
    const int L = weights.dim(2);
    ImageBuffer grid(grid_height, grid_width, 1);
    for (int q = 0; q < grid_height * grid_width; ++q) {
        const float* row = weights.data() + static_cast<std::size_t>(q) * L;
        float v = 0.0f;
        if (reduction == AttentionReduction::peak) {
            v = *std::max_element(row, row + L);
        } else {
            double s = 0.0;
            for (int j = 0; j < L; ++j) s += row[j];
            v = static_cast<float>(s / L);
        }
        grid.samples()[static_cast<std::size_t>(q)] = v;
    }
    ImageBuffer map = resize_bilinear(grid, out_height, out_width);
    const auto [mn, mx] = std::minmax_element(map.samples().begin(), map.samples().end());
    const float lo = *mn, hi = *mx;
    for (float& v : map.samples()) {
        if (hi - lo > 1e-12f) {
            v = (v - lo) / (hi - lo);
        } else {
            v = hi > 0.0f ? 1.0f : 0.0f;
        }
    }
    return map;
}

ImageBuffer export_attention_map(const Tensor& x_t, int t, const Tensor& x_hat, const ContextTokens& context,
                                 const ParamStore& params, const DenoiserConfig& cfg, int level,
                                 AttentionReduction reduction) {
    if (!cfg.attn_levels.count(level) || !params.contains("attn.l" + std::to_string(level) + ".q.weight")) {
        throw ArgumentError("level " + std::to_string(level) + " carries no cross-attention");
    }
    ParamBinding p(params, false);
    ag::Var ctx = ag::Var::constant(context.tokens);
    Tensor weights;
    std::vector<int> ts(static_cast<std::size_t>(x_t.dim(0)), t);
    denoise_predict(p, cfg, ag::Var::constant(x_t), ts, ag::Var::constant(x_hat), &ctx, {level, &weights});
    const int gh = x_t.dim(2) >> level, gw = x_t.dim(3) >> level;
    const Tensor first({1, weights.dim(1), weights.dim(2)},
                       std::vector<float>(weights.data(), weights.data() + weights.dim(1) * weights.dim(2)));
    return attention_weights_to_map(first, gh, gw, x_t.dim(2), x_t.dim(3), reduction);
}

} // namespace cdsr
