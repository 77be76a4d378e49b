#pragma once

#include "cdsr/autograd.hpp"
#include "cdsr/contrast.hpp"
#include "cdsr/diffusion.hpp"
#include "cdsr/image.hpp"
#include "cdsr/param_store.hpp"
#include "cdsr/unet.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace cdsr {

/// Architecture and diffusion settings of the full coarse-to-fine model.
struct ModelConfig {
    BaseUNetConfig base{3, 3, 16, 3, 8};
    DenoiserConfig denoiser;
    ContrastConfig contrast;
    int diffusion_steps = 50;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    /// false drops the context encoder and every attention block.
    bool condition = true;
    /// false feeds the raw heatmap to the context encoder (adjuster unused).
    bool adjustment = true;

    void validate() const;
    NoiseSchedule schedule() const { return build_schedule(diffusion_steps, beta_start, beta_end); }
    /// Spatial dims of training crops must be divisible by this.
    int size_multiple() const;
    /// Fits base and denoiser widths/depths into one width and depth.
    static ModelConfig desk(int base_width = 16, int depth = 3);
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
void save_model_config(const ModelConfig& cfg, const std::filesystem::path& path);
ModelConfig load_model_config(const std::filesystem::path& path);

/// Parameter groups by name prefix.
inline constexpr std::array<const char*, 5> kParamGroups{"base.", "adjust.", "ctx.", "denoise.", "attn."};

nn::ParamSpecs model_param_specs(const ModelConfig& cfg);
ParamStore init_model(const ModelConfig& cfg, std::uint64_t seed);

/// One training batch, already at training resolution.
struct ModelBatch {
    Tensor shadow;          // x   [N,3,H,W]
    Tensor clean;           // y   [N,3,H,W]
    Tensor heatmap;         // c_h [N,1,H,W]
    std::vector<int> t;     // per item, in [1, T]
    Tensor noise;           // [N,3,H,W]
};

struct ModelLoss {
    ag::Var loss;
    ag::Var l_base;
    ag::Var l_refine;
    ag::Var x_hat;
    ag::Var x0_pred;
};

/// Receives the heatmap tensor that is fed to the context encoder.
using ConditioningHook = std::function<void(const Tensor&)>;

/// Loss = L_base + L_refine in one graph: x_hat = base(x); c = adjust(c_h)
/// (or c_h when adjustment is off); x_t = forward_noise(y, t, noise);
/// x0_pred = denoise(x_t, t, x_hat, ctx(c)).
ModelLoss model_loss(ParamBinding& p, const ModelConfig& cfg, const ModelBatch& batch,
                     const ConditioningHook& hook = {});

struct Restoration {
    ImageBuffer output;
    ImageBuffer coarse;
    ContrastRepresentation raw;
    ContrastRepresentation conditioning;
};

/// Full inference: base removal, contrast conditioning and ancestral
/// sampling with `steps` respaced steps. Input dims must be divisible by
/// cfg.size_multiple().
Restoration restore(const ImageBuffer& shadow, const ParamStore& params, const ModelConfig& cfg, int steps,
                    std::uint64_t seed);

/// Context tokens for the conditioning map that restore() would use.
ContextTokens conditioning_tokens(const ContrastRepresentation& conditioning, const ParamStore& params,
                                  const ModelConfig& cfg);

/// Attention heatmap of `level` for one image: x_t is the coarse estimate
/// noised to timestep t with seeded noise.
ImageBuffer attention_map(const ImageBuffer& shadow, const ParamStore& params, const ModelConfig& cfg, int level, int t,
                          std::uint64_t seed, AttentionReduction reduction = AttentionReduction::peak);

/// Pads (edge replicate) to a size the model accepts, restores, crops back.
ImageBuffer restore_any_size(const ImageBuffer& shadow, const ParamStore& params, const ModelConfig& cfg, int steps,
                             std::uint64_t seed);

} // namespace cdsr
