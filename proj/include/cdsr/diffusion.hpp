#pragma once

#include "cdsr/autograd.hpp"
#include "cdsr/contrast.hpp"
#include "cdsr/image.hpp"
#include "cdsr/nn.hpp"
#include "cdsr/param_store.hpp"
#include "cdsr/unet.hpp"

#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <vector>

namespace cdsr {

/// beta_t, alpha_t = 1 - beta_t and alpha_bar_t = prod_{s<=t} alpha_s for
/// t = 1..T (stored at index t-1).
struct NoiseSchedule {
    int steps = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    /// alpha_bar for t in [0, T]; alpha_bar(0) = 1.
    double alpha_bar_at(int t) const;
    double beta_at(int t) const { return beta.at(static_cast<std::size_t>(t - 1)); }
    double alpha_at(int t) const { return alpha.at(static_cast<std::size_t>(t - 1)); }
};

/// Linear beta from beta_start to beta_end over T steps.
NoiseSchedule build_schedule(int steps, double beta_start, double beta_end);
/// Schedule from explicit betas, each in (0, 1).
NoiseSchedule schedule_from_betas(std::vector<double> betas);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise.
Tensor forward_noise(const Tensor& x0, int t, const Tensor& noise, const NoiseSchedule& sched);

/// One step of q(x_t | x_{t-1}): sqrt(alpha_t) x_prev + sqrt(beta_t) noise.
Tensor forward_step(const Tensor& x_prev, int t, const Tensor& noise, const NoiseSchedule& sched);

/// q(x_{t_prev} | x_t, x0) = N(x0_coef x0 + xt_coef x_t, variance). With
/// t_prev = t - 1 this is the one-step posterior; larger gaps use the
/// effective beta 1 - alpha_bar_t / alpha_bar_{t_prev}.
struct Posterior {
    double x0_coef = 0.0;
    double xt_coef = 0.0;
    double variance = 0.0;
};
Posterior posterior(const NoiseSchedule& sched, int t, int t_prev);
inline Posterior posterior(const NoiseSchedule& sched, int t) { return posterior(sched, t, t - 1); }

/// `steps` evenly spaced timesteps in [1, T], ascending, always ending at T.
std::vector<int> respaced_timesteps(int T, int steps);

inline constexpr int kContextStride = 8;

struct DenoiserConfig {
    UNetConfig unet{6, 3, 16, 3, 8};
    int time_embed_dim = 64;
    std::set<int> attn_levels{0, 1, 2};
    int context_dim = 32;

    void validate() const;
    UNetExtras extras(bool with_attention) const;
};

/// [N, L, context_dim] tokens over an (H/8) x (W/8) grid.
struct ContextTokens {
    Tensor tokens;
    int grid_height = 0;
    int grid_width = 0;
};

nn::ParamSpecs context_encoder_specs(int context_dim);
/// Three stride-2 3x3 convs (1 -> 16 -> 32 -> context_dim, SiLU between),
/// flattened to tokens. Parameters under "ctx.".
ag::Var encode_context(ParamBinding& p, const ag::Var& heatmap, int context_dim);
/// Requires an adjusted representation.
ContextTokens encode_context(const ContrastRepresentation& c, const ParamStore& params, int context_dim);

/// Denoiser parameters under "denoise." (U-Net and time MLP) plus, when
/// `with_attention`, cross-attention blocks under "attn.".
nn::ParamSpecs denoiser_param_specs(const DenoiserConfig& cfg, bool with_attention);
std::vector<std::string> denoiser_zero_init(const DenoiserConfig& cfg, bool with_attention);

/// Sinusoidal embedding [N, dim] of integer timesteps.
Tensor timestep_embedding(std::span<const int> t, int dim);

/// Predicts the clean image from x_t and the coarse estimate x_hat
/// (concatenated on channels), optionally attending to context tokens.
/// Output is sigmoid-bounded.
struct DenoiseCapture {
    int level = -1;
    Tensor* weights = nullptr;
};
ag::Var denoise_predict(ParamBinding& p, const DenoiserConfig& cfg, const ag::Var& x_t, std::span<const int> t,
                        const ag::Var& x_hat, const ag::Var* context, const DenoiseCapture& capture = {});
Tensor denoise_predict(const ParamStore& params, const DenoiserConfig& cfg, const Tensor& x_t, int t,
                       const Tensor& x_hat, const ContextTokens* context);

/// x0 prediction used inside the sampler: (x_t, t) -> x0.
using X0Predictor = std::function<Tensor(const Tensor& x_t, int t)>;

/// Ancestral sampling from x_T ~ N(0, I) over `steps` respaced timesteps,
/// clamped to [0, 1]. Deterministic for a given seed.
Tensor sample(const X0Predictor& predict, const Shape& shape, const NoiseSchedule& sched, int steps,
              std::uint64_t seed);
Tensor sample(const Tensor& x_hat, const ContextTokens* context, const NoiseSchedule& sched, const ParamStore& params,
              const DenoiserConfig& cfg, std::uint64_t seed, int steps);

enum class AttentionReduction {
    peak, ///< largest softmax weight of each query
    mean, ///< mean softmax weight of each query (identically 1/L)
};

/// Attention heatmap of one level: per-query reduction of the softmax
/// weights, reshaped to the level's grid, resized to image size and
/// normalised to [0, 1] (constant maps become 1).
ImageBuffer export_attention_map(const Tensor& x_t, int t, const Tensor& x_hat, const ContextTokens& context,
                                 const ParamStore& params, const DenoiserConfig& cfg, int level,
                                 AttentionReduction reduction = AttentionReduction::peak);

/// The reduction and normalisation step of export_attention_map applied to
/// a captured [1, HW, L] weight tensor.
ImageBuffer attention_weights_to_map(const Tensor& weights, int grid_height, int grid_width, int out_height,
                                     int out_width, AttentionReduction reduction);

} // namespace cdsr
