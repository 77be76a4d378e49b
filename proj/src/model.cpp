#include "cdsr/model.hpp"

#include "cdsr/convert.hpp"
#include "cdsr/errors.hpp"
#include "cdsr/rng.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace cdsr {

void ModelConfig::validate() const {
    base.validate();
    denoiser.validate();
    contrast.validate();
    if (base.in_channels != 3 || base.out_channels != 3 || denoiser.unet.out_channels != 3) {
        throw ArgumentError("ModelConfig: RGB in/out expected");
    }
    if (diffusion_steps < 1) throw ArgumentError("ModelConfig: diffusion_steps must be >= 1");
    (void)schedule();
}

int ModelConfig::size_multiple() const {
    int m = std::lcm(base.size_multiple(), denoiser.unet.size_multiple());
    if (condition) m = std::lcm(m, kContextStride);
    return m;
}

ModelConfig ModelConfig::desk(int base_width, int depth) {
    ModelConfig cfg;
    cfg.base.base_width = base_width;
    cfg.base.depth = depth;
    cfg.base.norm_groups = std::min(8, base_width);
    cfg.denoiser.unet.base_width = base_width;
    cfg.denoiser.unet.depth = depth;
    cfg.denoiser.unet.norm_groups = cfg.base.norm_groups;
    cfg.denoiser.attn_levels.clear();
    for (int l = 0; l < depth; ++l) cfg.denoiser.attn_levels.insert(l);
    return cfg;
}

nlohmann::json to_json(const ModelConfig& cfg) {
    auto unet = [](const UNetConfig& u) {
        return nlohmann::json{{"in_channels", u.in_channels},
                              {"out_channels", u.out_channels},
                              {"base_width", u.base_width},
                              {"depth", u.depth},
                              {"norm_groups", u.norm_groups}};
    };
    return {{"base", unet(cfg.base)},
            {"denoiser",
             {{"unet", unet(cfg.denoiser.unet)},
              {"time_embed_dim", cfg.denoiser.time_embed_dim},
              {"attn_levels", std::vector<int>(cfg.denoiser.attn_levels.begin(), cfg.denoiser.attn_levels.end())},
              {"context_dim", cfg.denoiser.context_dim}}},
            {"contrast",
             {{"low_percentile", cfg.contrast.low_percentile},
              {"high_percentile", cfg.contrast.high_percentile},
              {"sigmoid_gain", cfg.contrast.sigmoid_gain},
              {"blur_sigma", cfg.contrast.blur_sigma}}},
            {"diffusion_steps", cfg.diffusion_steps},
            {"beta_start", cfg.beta_start},
            {"beta_end", cfg.beta_end},
            {"condition", cfg.condition},
            {"adjustment", cfg.adjustment}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    auto unet = [](const nlohmann::json& u) {
        return UNetConfig{u.at("in_channels").get<int>(), u.at("out_channels").get<int>(),
                          u.at("base_width").get<int>(), u.at("depth").get<int>(), u.at("norm_groups").get<int>()};
    };
    try {
        ModelConfig cfg;
        cfg.base = unet(j.at("base"));
        const auto& d = j.at("denoiser");
        cfg.denoiser.unet = unet(d.at("unet"));
        cfg.denoiser.time_embed_dim = d.at("time_embed_dim").get<int>();
        const auto levels = d.at("attn_levels").get<std::vector<int>>();
        cfg.denoiser.attn_levels = std::set<int>(levels.begin(), levels.end());
        cfg.denoiser.context_dim = d.at("context_dim").get<int>();
        const auto& c = j.at("contrast");
        cfg.contrast.low_percentile = c.at("low_percentile").get<double>();
        cfg.contrast.high_percentile = c.at("high_percentile").get<double>();
        cfg.contrast.sigmoid_gain = c.at("sigmoid_gain").get<float>();
        cfg.contrast.blur_sigma = c.at("blur_sigma").get<float>();
        cfg.diffusion_steps = j.at("diffusion_steps").get<int>();
        cfg.beta_start = j.at("beta_start").get<double>();
        cfg.beta_end = j.at("beta_end").get<double>();
        cfg.condition = j.at("condition").get<bool>();
        cfg.adjustment = j.at("adjustment").get<bool>();
        cfg.validate();
        return cfg;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
}

void save_model_config(const ModelConfig& cfg, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << to_json(cfg).dump(2) << '\n';
}

ModelConfig load_model_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("model config not found: " + path.string());
    try {
        return model_config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

nn::ParamSpecs model_param_specs(const ModelConfig& cfg) {
    cfg.validate();
    nn::ParamSpecs s = base_param_specs(cfg.base);
    for (auto& e : adjuster_param_specs()) s.push_back(std::move(e));
    if (cfg.condition) {
        for (auto& e : context_encoder_specs(cfg.denoiser.context_dim)) s.push_back(std::move(e));
    }
    for (auto& e : denoiser_param_specs(cfg.denoiser, cfg.condition)) s.push_back(std::move(e));
    return s;
}

ParamStore init_model(const ModelConfig& cfg, std::uint64_t seed) {
    ParamStore store;
    init_params(store, model_param_specs(cfg), seed, denoiser_zero_init(cfg.denoiser, cfg.condition));
    return store;
}

ModelLoss model_loss(ParamBinding& p, const ModelConfig& cfg, const ModelBatch& batch, const ConditioningHook& hook) {
    const NoiseSchedule sched = cfg.schedule();
    const int N = batch.shadow.dim(0);
    if (batch.clean.shape() != batch.shadow.shape() || batch.noise.shape() != batch.shadow.shape() ||
        static_cast<int>(batch.t.size()) != N) {
        throw ShapeError("model_loss: inconsistent batch");
    }
    ModelLoss out;
    const ag::Var x = ag::Var::constant(batch.shadow);
    const ag::Var y = ag::Var::constant(batch.clean);
    out.x_hat = base_forward(p, cfg.base, x);
    out.l_base = base_loss(out.x_hat, y);

    // x_t = sqrt(ab_t) y + sqrt(1 - ab_t) eps, per item.
    Tensor x_t(batch.clean.shape());
    const std::size_t per = batch.clean.size() / N;
    for (int n = 0; n < N; ++n) {
        const Tensor yn({1, static_cast<int>(per)},
                        std::vector<float>(batch.clean.data() + n * per, batch.clean.data() + (n + 1) * per));
        const Tensor en({1, static_cast<int>(per)},
                        std::vector<float>(batch.noise.data() + n * per, batch.noise.data() + (n + 1) * per));
        const Tensor xn = forward_noise(yn, batch.t[n], en, sched);
        std::copy(xn.data(), xn.data() + per, x_t.data() + n * per);
    }

    ag::Var ctx;
    if (cfg.condition) {
        if (batch.heatmap.rank() != 4 || batch.heatmap.dim(1) != 1) {
            throw ShapeError("model_loss: heatmap must be [N,1,H,W]");
        }
        const ag::Var raw = ag::Var::constant(batch.heatmap);
        const ag::Var cond = cfg.adjustment ? adjuster_forward(p, raw) : raw;
        if (hook) hook(cond.value());
        ctx = encode_context(p, cond, cfg.denoiser.context_dim);
    }
    out.x0_pred = denoise_predict(p, cfg.denoiser, ag::Var::constant(x_t), batch.t, out.x_hat,
                                  cfg.condition ? &ctx : nullptr);
    out.l_refine = ag::mse(out.x0_pred, y);
    out.loss = ag::add(out.l_base, out.l_refine);
    return out;
}

Restoration restore(const ImageBuffer& shadow, const ParamStore& params, const ModelConfig& cfg, int steps,
                    std::uint64_t seed) {
    cfg.validate();
    if (shadow.channels() != 3) throw ShapeError("restore: expected an RGB image");
    Restoration r;
    const Tensor x = image_to_tensor(shadow);
    const Tensor x_hat = base_forward(params, cfg.base, x);
    r.coarse = tensor_to_image(x_hat);
    r.raw = extract_contrast_heatmap(shadow, cfg.contrast);
    ContextTokens ctx;
    if (cfg.condition) {
        r.conditioning = cfg.adjustment ? adjust_contrast(r.raw, params) : r.raw;
        ctx = conditioning_tokens(r.conditioning, params, cfg);
    }
    const Tensor out = sample(x_hat, cfg.condition ? &ctx : nullptr, cfg.schedule(), params, cfg.denoiser, seed, steps);
    r.output = tensor_to_image(out);
    return r;
}

ContextTokens conditioning_tokens(const ContrastRepresentation& conditioning, const ParamStore& params,
                                  const ModelConfig& cfg) {
    if (!cfg.condition) throw ArgumentError("conditioning_tokens: model is not conditioned");
    ParamBinding p(params, false);
    ContextTokens ctx;
    ctx.tokens = encode_context(p, ag::Var::constant(image_to_tensor(conditioning.heatmap)), cfg.denoiser.context_dim)
                     .value();
    ctx.grid_height = (conditioning.heatmap.height() + kContextStride - 1) / kContextStride;
    ctx.grid_width = (conditioning.heatmap.width() + kContextStride - 1) / kContextStride;
    return ctx;
}

ImageBuffer attention_map(const ImageBuffer& shadow, const ParamStore& params, const ModelConfig& cfg, int level, int t,
                          std::uint64_t seed, AttentionReduction reduction) {
    cfg.validate();
    if (!cfg.condition) throw ArgumentError("attention_map: model has no attention blocks");
    if (t < 1 || t > cfg.diffusion_steps) {
        throw ArgumentError("attention_map: t must lie in [1, " + std::to_string(cfg.diffusion_steps) + "]");
    }
    const Tensor x = image_to_tensor(shadow);
    const Tensor x_hat = base_forward(params, cfg.base, x);
    const ContrastRepresentation raw = extract_contrast_heatmap(shadow, cfg.contrast);
    const ContextTokens ctx = conditioning_tokens(cfg.adjustment ? adjust_contrast(raw, params) : raw, params, cfg);
    Rng rng(seed);
    Tensor noise(x_hat.shape());
    for (std::size_t i = 0; i < noise.size(); ++i) noise.data()[i] = static_cast<float>(rng.normal());
    const Tensor x_t = forward_noise(x_hat, t, noise, cfg.schedule());
    return export_attention_map(x_t, t, x_hat, ctx, params, cfg.denoiser, level, reduction);
}

ImageBuffer restore_any_size(const ImageBuffer& shadow, const ParamStore& params, const ModelConfig& cfg, int steps,
                             std::uint64_t seed) {
    const int m = cfg.size_multiple();
    const int H = shadow.height(), W = shadow.width();
    const int Hp = (H + m - 1) / m * m, Wp = (W + m - 1) / m * m;
    if (Hp == H && Wp == W) return restore(shadow, params, cfg, steps, seed).output;
    ImageBuffer padded(Hp, Wp, shadow.channels());
    for (int y = 0; y < Hp; ++y)
        for (int x = 0; x < Wp; ++x)
            for (int c = 0; c < shadow.channels(); ++c)
                padded.at(y, x, c) = shadow.at(std::min(y, H - 1), std::min(x, W - 1), c);
    return crop(restore(padded, params, cfg, steps, seed).output, 0, 0, H, W);
}

} // namespace cdsr
