#include "cdsr/trainer.hpp"

#include "cdsr/convert.hpp"
#include "cdsr/errors.hpp"
#include "cdsr/metrics.hpp"
#include "cdsr/rng.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>

namespace cdsr {

namespace {

// Purpose tags for derived random streams.
constexpr std::uint64_t kTagPermutation = 0x7065726dull;
constexpr std::uint64_t kTagAugment = 0x61756780ull;
constexpr std::uint64_t kTagNoise = 0x6e6f6973ull;

} // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ArgumentError("TrainConfig: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ArgumentError("TrainConfig: betas must lie in [0, 1)");
    }
    if (!(weight_decay >= 0.0)) throw ArgumentError("TrainConfig: weight_decay must be >= 0");
    if (batch_size < 1) throw ArgumentError("TrainConfig: batch_size must be >= 1");
    if (resolution < 8 || resolution % 8 != 0) throw ArgumentError("TrainConfig: resolution must be a multiple of 8");
    if (max_iters < 0) throw ArgumentError("TrainConfig: max_iters must be >= 0");
    if (eval_every < 0 || checkpoint_every < 0) throw ArgumentError("TrainConfig: periods must be >= 0");
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw FormatError("train config: expected a JSON object");
    static const std::set<std::string> known{"lr",         "betas",          "weight_decay",     "batch_size",
                                             "resolution", "max_iters",      "seed",             "augment",
                                             "ablate_condition", "ablate_adjustment", "eval_every", "checkpoint_every"};
    for (const auto& [key, _] : j.items()) {
        if (!known.count(key)) throw FormatError("train config: unknown key '" + key + "'");
    }
    TrainConfig cfg;
    try {
        if (j.contains("lr")) cfg.lr = j.at("lr").get<double>();
        if (j.contains("betas")) {
            const auto b = j.at("betas").get<std::vector<double>>();
            if (b.size() != 2) throw FormatError("train config: betas must have two entries");
            cfg.beta1 = b[0];
            cfg.beta2 = b[1];
        }
        if (j.contains("weight_decay")) cfg.weight_decay = j.at("weight_decay").get<double>();
        if (j.contains("batch_size")) cfg.batch_size = j.at("batch_size").get<int>();
        if (j.contains("resolution")) cfg.resolution = j.at("resolution").get<int>();
        if (j.contains("max_iters")) cfg.max_iters = j.at("max_iters").get<int>();
        if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("augment")) cfg.augment = j.at("augment").get<bool>();
        if (j.contains("ablate_condition")) cfg.ablate_condition = j.at("ablate_condition").get<bool>();
        if (j.contains("ablate_adjustment")) cfg.ablate_adjustment = j.at("ablate_adjustment").get<bool>();
        if (j.contains("eval_every")) cfg.eval_every = j.at("eval_every").get<int>();
        if (j.contains("checkpoint_every")) cfg.checkpoint_every = j.at("checkpoint_every").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("train config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

nlohmann::json to_json(const TrainConfig& cfg) {
    return {{"lr", cfg.lr},
            {"betas", {cfg.beta1, cfg.beta2}},
            {"weight_decay", cfg.weight_decay},
            {"batch_size", cfg.batch_size},
            {"resolution", cfg.resolution},
            {"max_iters", cfg.max_iters},
            {"seed", cfg.seed},
            {"augment", cfg.augment},
            {"ablate_condition", cfg.ablate_condition},
            {"ablate_adjustment", cfg.ablate_adjustment},
            {"eval_every", cfg.eval_every},
            {"checkpoint_every", cfg.checkpoint_every}};
}

TrainConfig load_train_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("train config not found: " + path.string());
    try {
        return train_config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

ModelConfig ablated(ModelConfig model, const TrainConfig& cfg) {
    if (cfg.ablate_condition) model.condition = false;
    if (cfg.ablate_adjustment) model.adjustment = false;
    return model;
}

TrainState init_train_state(const ModelConfig& model, std::uint64_t seed) {
    TrainState s;
    s.seed = seed;
    s.params = init_model(model, seed);
    s.optimizer = AdamWState::zeros_like(s.params);
    return s;
}

void save_train_state(const TrainState& state, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    save_checkpoint(state.params, dir / "params.ckpt");
    save_checkpoint(state.optimizer.m, dir / "adam_m.ckpt");
    save_checkpoint(state.optimizer.v, dir / "adam_v.ckpt");
    std::ofstream out(dir / "state.json");
    if (!out) throw IoError("cannot write " + (dir / "state.json").string());
    out << nlohmann::json{{"step", state.step}, {"optimizer_step", state.optimizer.step}, {"seed", state.seed}}.dump(2)
        << '\n';
}

TrainState load_train_state(const std::filesystem::path& dir) {
    std::ifstream in(dir / "state.json");
    if (!in) throw IoError("train state not found in " + dir.string());
    TrainState s;
    try {
        const auto j = nlohmann::json::parse(in);
        s.step = j.at("step").get<std::int64_t>();
        s.optimizer.step = j.at("optimizer_step").get<std::int64_t>();
        s.seed = j.at("seed").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError((dir / "state.json").string() + ": " + e.what());
    }
    s.params = load_checkpoint(dir / "params.ckpt");
    s.optimizer.m = load_checkpoint(dir / "adam_m.ckpt");
    s.optimizer.v = load_checkpoint(dir / "adam_v.ckpt");
    for (const auto& [name, t] : s.params) {
        if (!s.optimizer.m.contains(name) || s.optimizer.m.get(name).shape() != t.shape() ||
            !s.optimizer.v.contains(name) || s.optimizer.v.get(name).shape() != t.shape()) {
            throw FormatError("train state: optimizer moments do not match parameter " + name);
        }
    }
    return s;
}

TrainSample augment_with(const TrainSample& sample, int quarter_turns, int top, int left, int size) {
    if (!sample.shadow.same_dims(sample.clean)) throw ShapeError("augment: shadow and clean differ in size");
    TrainSample out;
    out.shadow = rotate90(sample.shadow, quarter_turns);
    out.clean = rotate90(sample.clean, quarter_turns);
    if (out.shadow.height() < size || out.shadow.width() < size) {
        throw ShapeError("augment: image " + std::to_string(out.shadow.height()) + "x" +
                         std::to_string(out.shadow.width()) + " is smaller than the crop size " + std::to_string(size));
    }
    out.shadow = crop(out.shadow, top, left, size, size);
    out.clean = crop(out.clean, top, left, size, size);
    if (sample.shadow_mask) out.shadow_mask = crop(rotate90(*sample.shadow_mask, quarter_turns), top, left, size, size);
    out.provenance = sample.provenance;
    return out;
}

TrainSample augment(const TrainSample& sample, Rng& rng, int size) {
    if (sample.shadow.height() < size || sample.shadow.width() < size) {
        throw ShapeError("augment: image smaller than the crop size " + std::to_string(size));
    }
    const int k = rng.uniform_int(0, 3);
    const int h = k % 2 ? sample.shadow.width() : sample.shadow.height();
    const int w = k % 2 ? sample.shadow.height() : sample.shadow.width();
    const int top = rng.uniform_int(0, h - size);
    const int left = rng.uniform_int(0, w - size);
    return augment_with(sample, k, top, left, size);
}

ModelLoss total_loss(ParamBinding& p, const ModelConfig& model, const ModelBatch& batch, LossBreakdown& breakdown,
                     const ConditioningHook& hook) {
    ModelLoss l = model_loss(p, model, batch, hook);
    breakdown.l_base = l.l_base.scalar();
    breakdown.l_refine = l.l_refine.scalar();
    breakdown.loss = l.loss.scalar();
    if (!std::isfinite(breakdown.l_base)) throw NonFiniteError("non-finite loss term l_base");
    if (!std::isfinite(breakdown.l_refine)) throw NonFiniteError("non-finite loss term l_refine");
    if (!std::isfinite(breakdown.loss)) throw NonFiniteError("non-finite total loss");
    return l;
}

ModelBatch make_batch(const TrainConfig& cfg, const ModelConfig& model, const std::vector<TrainSample>& train,
                      std::int64_t step) {
    if (train.empty()) throw ArgumentError("training data is empty");
    const std::int64_t n = static_cast<std::int64_t>(train.size());
    const int T = model.diffusion_steps;
    std::vector<ImageBuffer> xs, ys, hs;
    std::vector<int> ts;
    std::vector<float> noise;
    std::int64_t cached_epoch = -1;
    std::vector<std::int64_t> perm;
    for (int i = 0; i < cfg.batch_size; ++i) {
        const std::int64_t k = step * cfg.batch_size + i;
        const std::int64_t epoch = k / n;
        if (epoch != cached_epoch) {
            perm.resize(n);
            std::iota(perm.begin(), perm.end(), 0);
            Rng prng = Rng::derive(cfg.seed, {kTagPermutation, static_cast<std::uint64_t>(epoch)});
            for (std::int64_t j = n - 1; j > 0; --j) std::swap(perm[j], perm[prng.uniform_int(0, static_cast<int>(j))]);
            cached_epoch = epoch;
        }
        const TrainSample& src = train[perm[k % n]];
        TrainSample s;
        if (cfg.augment) {
            Rng arng = Rng::derive(cfg.seed, {kTagAugment, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)});
            s = augment(src, arng, cfg.resolution);
        } else {
            const int top = (src.shadow.height() - cfg.resolution) / 2;
            const int left = (src.shadow.width() - cfg.resolution) / 2;
            s = augment_with(src, 0, top, left, cfg.resolution);
        }
        Rng nrng = Rng::derive(cfg.seed, {kTagNoise, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(i)});
        ts.push_back(nrng.uniform_int(1, T));
        for (std::size_t j = 0; j < s.clean.size(); ++j) noise.push_back(static_cast<float>(nrng.normal()));
        hs.push_back(extract_contrast_heatmap(s.shadow, model.contrast).heatmap);
        xs.push_back(std::move(s.shadow));
        ys.push_back(std::move(s.clean));
    }
    ModelBatch b;
    b.shadow = images_to_tensor(xs);
    b.clean = images_to_tensor(ys);
    b.heatmap = images_to_tensor(hs);
    b.t = std::move(ts);
    // Noise is drawn in HWC order per item; the layout is irrelevant to its
    // distribution, so it is poured straight into the NCHW buffer.
    b.noise = Tensor(b.clean.shape(), std::move(noise));
    return b;
}

StepLog train_step(TrainState& state, const TrainConfig& cfg, const ModelConfig& model,
                   const std::vector<TrainSample>& train) {
    const ModelBatch batch = make_batch(cfg, model, train, state.step);
    StepLog log;
    ParamBinding p(state.params, true);
    const ModelLoss l = total_loss(p, model, batch, log.loss);
    ag::backward(l.loss);
    const ParamStore grads = p.gradients();
    for (const char* group : kParamGroups) {
        const auto names = grads.names_with_prefix(group);
        if (names.empty()) continue;
        double acc = 0.0;
        for (const auto& name : names) {
            const Tensor& g = grads.get(name);
            for (std::size_t i = 0; i < g.size(); ++i) acc += static_cast<double>(g.data()[i]) * g.data()[i];
        }
        std::string key(group);
        key.pop_back();
        log.group_grad_norms[key] = std::sqrt(acc);
    }
    adamw_step(state.params, grads, state.optimizer, cfg.optimizer());
    ++state.step;
    log.step = state.step;
    return log;
}

EvalResult evaluate_model(const ParamStore& params, const ModelConfig& model, const std::vector<TrainSample>& samples,
                          int steps, std::uint64_t seed) {
    if (samples.empty()) throw ArgumentError("evaluate_model: no samples");
    EvalResult r;
    const int n_steps = steps > 0 ? steps : model.diffusion_steps;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        const ImageBuffer out = restore_any_size(s.shadow, params, model, n_steps, seed + i);
        r.psnr += psnr(out, s.clean);
        r.ssim += ssim(out, s.clean);
        r.rmse += rmse(out, s.clean);
        r.input_psnr += psnr(s.shadow, s.clean);
    }
    const double n = static_cast<double>(samples.size());
    r.psnr /= n;
    r.ssim /= n;
    r.rmse /= n;
    r.input_psnr /= n;
    return r;
}

TrainResult train_loop(const TrainConfig& cfg, const ModelConfig& base_model, const DataSource& data,
                       TrainOptions options) {
    cfg.validate();
    const ModelConfig model = ablated(base_model, cfg);
    model.validate();
    if (cfg.resolution % model.size_multiple() != 0) {
        throw ArgumentError("TrainConfig: resolution " + std::to_string(cfg.resolution) + " is not divisible by " +
                            std::to_string(model.size_multiple()));
    }
    if (data.train.empty()) throw ArgumentError("train_loop: data source yields no training samples");

    TrainResult result;
    if (options.resume) {
        result.state = std::move(*options.resume);
        const ParamStore fresh = init_model(model, cfg.seed);
        if (result.state.params.names() != fresh.names()) {
            throw FormatError("resume: checkpoint parameters do not match the model configuration");
        }
    } else {
        result.state = init_train_state(model, cfg.seed);
    }
    TrainState& state = result.state;

    std::ofstream csv, norms;
    const bool persist = !options.out_dir.empty();
    if (persist) {
        std::filesystem::create_directories(options.out_dir);
        const bool append = options.resume.has_value() || state.step > 0;
        const auto mode = append ? std::ios::app : std::ios::trunc;
        csv.open(options.out_dir / "train_log.csv", std::ios::out | mode);
        norms.open(options.out_dir / "grad_norms.csv", std::ios::out | mode);
        if (!csv || !norms) throw IoError("cannot write logs in " + options.out_dir.string());
        csv << std::setprecision(9);
        norms << std::setprecision(9);
        if (!append) {
            csv << "step,loss,l_base,l_refine,psnr,ssim,rmse\n";
            norms << "step";
            for (const char* g : kParamGroups) norms << ',' << std::string(g).substr(0, std::string(g).size() - 1);
            norms << '\n';
        }
        save_model_config(model, options.out_dir / "model.json");
    }

    while (state.step < cfg.max_iters) {
        StepLog log = train_step(state, cfg, model, data.train);
        const bool last = state.step == cfg.max_iters;
        if (!data.eval.empty() && (last || (cfg.eval_every > 0 && state.step % cfg.eval_every == 0))) {
            const EvalResult e = evaluate_model(state.params, model, data.eval, 0, cfg.seed);
            log.psnr = e.psnr;
            log.ssim = e.ssim;
            log.rmse = e.rmse;
        }
        if (persist) {
            csv << log.step << ',' << log.loss.loss << ',' << log.loss.l_base << ',' << log.loss.l_refine << ',';
            if (log.psnr) csv << *log.psnr << ',' << *log.ssim << ',' << *log.rmse;
            else csv << ",,";
            csv << '\n';
            csv.flush();
            norms << log.step;
            for (const char* g : kParamGroups) {
                std::string key(g);
                key.pop_back();
                norms << ',';
                if (auto it = log.group_grad_norms.find(key); it != log.group_grad_norms.end()) norms << it->second;
            }
            norms << '\n';
            if (last || (cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0)) {
                save_train_state(state, options.out_dir / "state");
            }
        }
        if (options.on_step) options.on_step(log);
        result.log.push_back(std::move(log));
    }
    if (persist) {
        save_checkpoint(state.params, options.out_dir / "model.ckpt");
        if (result.log.empty()) save_train_state(state, options.out_dir / "state");
    }
    return result;
}

} // namespace cdsr
