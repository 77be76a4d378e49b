#pragma once

#include "cdsr/data.hpp"
#include "cdsr/model.hpp"
#include "cdsr/optim.hpp"
#include "cdsr/param_store.hpp"
#include "cdsr/rng.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cdsr {

struct TrainConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    int batch_size = 2;
    int resolution = 64;
    int max_iters = 2000;
    std::uint64_t seed = 0;
    bool augment = true;
    bool ablate_condition = false;
    bool ablate_adjustment = false;
    /// Held-out evaluation period in steps; 0 evaluates only at the end.
    int eval_every = 200;
    /// TrainState checkpoint period in steps; 0 writes only at the end.
    int checkpoint_every = 0;

    void validate() const;
    AdamWConfig optimizer() const { return {lr, beta1, beta2, weight_decay, 1e-8}; }
};

/// Flat JSON object; "betas" is a two-element array. Unknown keys and
/// wrong types are FormatErrors; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig load_train_config(const std::filesystem::path& path);

/// Applies the ablation flags to a model configuration.
ModelConfig ablated(ModelConfig model, const TrainConfig& cfg);

struct TrainState {
    std::int64_t step = 0;
    ParamStore params;
    AdamWState optimizer;
    std::uint64_t seed = 0;
};

TrainState init_train_state(const ModelConfig& model, std::uint64_t seed);
/// Writes params.ckpt, adam_m.ckpt, adam_v.ckpt and state.json into `dir`.
void save_train_state(const TrainState& state, const std::filesystem::path& dir);
TrainState load_train_state(const std::filesystem::path& dir);

/// Rotates x and y by the same quarter_turns, then crops the same window.
TrainSample augment_with(const TrainSample& sample, int quarter_turns, int top, int left, int size);
/// Draws a rotation from {0, 90, 180, 270} degrees and a crop position.
TrainSample augment(const TrainSample& sample, Rng& rng, int size);

struct LossBreakdown {
    double loss = 0.0;
    double l_base = 0.0;
    double l_refine = 0.0;
};

/// Builds the joint loss graph. Throws NonFiniteError naming the first
/// non-finite term (l_base, then l_refine).
ModelLoss total_loss(ParamBinding& p, const ModelConfig& model, const ModelBatch& batch, LossBreakdown& breakdown,
                     const ConditioningHook& hook = {});

struct DataSource {
    std::vector<TrainSample> train;
    std::vector<TrainSample> eval;
};

/// Batch for 0-based step `step`: items follow a per-epoch permutation, and
/// augmentation, t and noise come from streams keyed by (seed, step, item).
ModelBatch make_batch(const TrainConfig& cfg, const ModelConfig& model, const std::vector<TrainSample>& train,
                      std::int64_t step);

struct StepLog {
    std::int64_t step = 0;  // 1-based, after the update
    LossBreakdown loss;
    /// L2 norm of the gradient per parameter group present in the model.
    std::map<std::string, double> group_grad_norms;
    std::optional<double> psnr, ssim, rmse;
};

/// One optimizer step on the batch for state.step; advances state.step.
StepLog train_step(TrainState& state, const TrainConfig& cfg, const ModelConfig& model,
                   const std::vector<TrainSample>& train);

struct EvalResult {
    double psnr = 0.0;
    double ssim = 0.0;
    double rmse = 0.0;
    double input_psnr = 0.0;
};

/// Full-pipeline restoration of every sample, compared against its clean
/// image. `steps` 0 uses the model's full T.
EvalResult evaluate_model(const ParamStore& params, const ModelConfig& model, const std::vector<TrainSample>& samples,
                          int steps = 0, std::uint64_t seed = 0);

struct TrainOptions {
    /// Output directory for train_log.csv, grad_norms.csv, state/, model.ckpt
    /// and model.json. Empty keeps everything in memory.
    std::filesystem::path out_dir;
    /// Continue from this state instead of a fresh initialisation.
    std::optional<TrainState> resume;
    std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
    TrainState state;
    std::vector<StepLog> log;
};

/// Runs steps until state.step == cfg.max_iters. The model configuration
/// is ablated according to cfg before use.
TrainResult train_loop(const TrainConfig& cfg, const ModelConfig& model, const DataSource& data,
                       TrainOptions options = {});

} // namespace cdsr
