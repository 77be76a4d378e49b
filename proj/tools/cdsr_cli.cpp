#include "cdsr/contrast.hpp"
#include "cdsr/convert.hpp"
#include "cdsr/data.hpp"
#include "cdsr/errors.hpp"
#include "cdsr/image.hpp"
#include "cdsr/metrics.hpp"
#include "cdsr/model.hpp"
#include "cdsr/param_store.hpp"
#include "cdsr/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace fs = std::filesystem;
using namespace cdsr;

namespace {

std::string index_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d.png", i);
    return buf;
}

// Model configuration stored next to a checkpoint, or the desk default.
ModelConfig model_for(const fs::path& ckpt, const std::string& override_path) {
    if (!override_path.empty()) return load_model_config(override_path);
    const fs::path sidecar = ckpt.parent_path() / "model.json";
    if (fs::exists(sidecar)) return load_model_config(sidecar);
    return ModelConfig::desk();
}

std::vector<fs::path> input_images(const fs::path& in) {
    if (fs::is_directory(in)) {
        std::vector<fs::path> out;
        for (const auto& n : list_images(in)) out.push_back(in / n);
        if (out.empty()) throw IoError("no images in " + in.string());
        return out;
    }
    if (!fs::exists(in)) throw IoError("input not found: " + in.string());
    return {in};
}

ImageBuffer as_rgb(const ImageBuffer& img) {
    if (img.channels() == 3) return img;
    ImageBuffer out(img.height(), img.width(), 3);
    for (int y = 0; y < img.height(); ++y)
        for (int x = 0; x < img.width(); ++x)
            for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(y, x);
    return out;
}

struct SynthArgs {
    int n = 0;
    int res = 64;
    std::uint64_t seed = 0;
    std::string out;
};

void run_synth(const SynthArgs& a) {
    if (a.n < 1) throw ArgumentError("--n must be >= 1");
    for (const char* sub : {"shadow", "clean", "mask"}) fs::create_directories(fs::path(a.out) / sub);
    for (int i = 0; i < a.n; ++i) {
        const TrainSample s = synth_pair(synth_item_config(a.res, a.seed, i));
        save_image(s.shadow, fs::path(a.out) / "shadow" / index_name(i));
        save_image(s.clean, fs::path(a.out) / "clean" / index_name(i));
        save_image(*s.shadow_mask, fs::path(a.out) / "mask" / index_name(i));
    }
}

struct ContrastArgs {
    std::string in;
    std::string ckpt;
    std::string model_config;
    std::string out;
};

void run_extract_contrast(const ContrastArgs& a) {
    const ImageBuffer img = load_image(a.in);
    const ModelConfig cfg = a.ckpt.empty() && a.model_config.empty() ? ModelConfig::desk()
                                                                      : model_for(a.ckpt, a.model_config);
    const ContrastRepresentation raw = extract_contrast_heatmap(img, cfg.contrast);
    fs::create_directories(a.out);
    const std::string stem = fs::path(a.in).stem().string();
    save_image(raw.heatmap, fs::path(a.out) / (stem + "_raw.png"));
    std::vector<ImageBuffer> panels{as_rgb(img), as_rgb(raw.heatmap)};
    if (!a.ckpt.empty()) {
        if (!cfg.condition || !cfg.adjustment) {
            throw ArgumentError("extract-contrast: the model was trained without the adjuster");
        }
        const ParamStore params = load_checkpoint(a.ckpt);
        const ContrastRepresentation adjusted = adjust_contrast(raw, params);
        save_image(adjusted.heatmap, fs::path(a.out) / (stem + "_adjusted.png"));
        panels.push_back(as_rgb(adjusted.heatmap));
    }
    save_image(hconcat(panels), fs::path(a.out) / (stem + "_side_by_side.png"));
}

struct TrainArgs {
    std::string config;
    std::string out;
    bool ablate_condition = false;
    bool ablate_adjustment = false;
    std::string shadow_dir, clean_dir, eval_shadow_dir, eval_clean_dir;
    int synth_n = 8;
    int synth_res = 0;
    std::optional<int> max_iters, resolution, batch_size, eval_every, checkpoint_every;
    std::optional<std::uint64_t> seed;
    std::optional<double> lr;
    bool no_augment = false;
    int width = 16;
    int depth = 3;
    std::string resume;
    int log_every = 50;
};

void run_train(const TrainArgs& a) {
    TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_train_config(a.config);
    if (a.ablate_condition) cfg.ablate_condition = true;
    if (a.ablate_adjustment) cfg.ablate_adjustment = true;
    if (a.max_iters) cfg.max_iters = *a.max_iters;
    if (a.resolution) cfg.resolution = *a.resolution;
    if (a.batch_size) cfg.batch_size = *a.batch_size;
    if (a.eval_every) cfg.eval_every = *a.eval_every;
    if (a.checkpoint_every) cfg.checkpoint_every = *a.checkpoint_every;
    if (a.seed) cfg.seed = *a.seed;
    if (a.lr) cfg.lr = *a.lr;
    if (a.no_augment) cfg.augment = false;
    cfg.validate();

    DataSource data;
    if (!a.shadow_dir.empty() || !a.clean_dir.empty()) {
        if (a.shadow_dir.empty() || a.clean_dir.empty()) throw ArgumentError("--shadow-dir and --clean-dir go together");
        auto pairs = load_paired_dir(a.shadow_dir, a.clean_dir);
        if (pairs.unmatched) std::cerr << "warning: " << pairs.unmatched << " unmatched file(s) skipped\n";
        data.train = std::move(pairs.samples);
    } else {
        const int res = a.synth_res > 0 ? a.synth_res : cfg.resolution;
        for (int i = 0; i < a.synth_n; ++i) data.train.push_back(synth_pair(synth_item_config(res, cfg.seed, i)));
    }
    if (!a.eval_shadow_dir.empty() || !a.eval_clean_dir.empty()) {
        if (a.eval_shadow_dir.empty() || a.eval_clean_dir.empty()) {
            throw ArgumentError("--eval-shadow-dir and --eval-clean-dir go together");
        }
        data.eval = load_paired_dir(a.eval_shadow_dir, a.eval_clean_dir).samples;
    } else {
        data.eval = data.train;
    }

    TrainOptions opts;
    opts.out_dir = a.out;
    if (!a.resume.empty()) opts.resume = load_train_state(a.resume);
    opts.on_step = [&](const StepLog& log) {
        if (log.psnr || (a.log_every > 0 && log.step % a.log_every == 0)) {
            std::cerr << "step " << log.step << " loss " << log.loss.loss << " l_base " << log.loss.l_base
                      << " l_refine " << log.loss.l_refine;
            if (log.psnr) std::cerr << " psnr " << *log.psnr << " ssim " << *log.ssim << " rmse " << *log.rmse;
            std::cerr << '\n';
        }
    };
    train_loop(cfg, ModelConfig::desk(a.width, a.depth), data, std::move(opts));
}

struct InferArgs {
    std::string ckpt;
    std::string model_config;
    std::string in;
    std::string out;
    int steps = 0;
    std::uint64_t seed = 0;
    bool save_coarse = false;
};

void run_infer(const InferArgs& a) {
    const ModelConfig cfg = model_for(a.ckpt, a.model_config);
    const ParamStore params = load_checkpoint(a.ckpt);
    const int steps = a.steps > 0 ? a.steps : cfg.diffusion_steps;
    fs::create_directories(a.out);
    for (const auto& path : input_images(a.in)) {
        const ImageBuffer img = as_rgb(load_image(path));
        const ImageBuffer out = restore_any_size(img, params, cfg, steps, a.seed);
        save_image(out, fs::path(a.out) / (path.stem().string() + ".png"));
        if (a.save_coarse) {
            const int m = cfg.base.size_multiple();
            if (img.height() % m == 0 && img.width() % m == 0) {
                const ImageBuffer coarse = tensor_to_image(base_forward(params, cfg.base, image_to_tensor(img)));
                save_image(coarse, fs::path(a.out) / (path.stem().string() + "_coarse.png"));
            }
        }
    }
}

struct EvalArgs {
    std::string pred;
    std::string gt;
    int res = 768;
    std::string csv = "metrics.csv";
};

void run_eval(const EvalArgs& a) {
    const MetricReport report = evaluate_dir(a.pred, a.gt, a.res);
    if (report.unmatched) std::cerr << "warning: " << report.unmatched << " unmatched file(s) skipped\n";
    write_report_csv(report, std::cout);
    std::ofstream out(a.csv);
    if (!out) throw IoError("cannot write " + a.csv);
    write_report_csv(report, out);
}

struct AttnArgs {
    std::string ckpt;
    std::string model_config;
    std::string in;
    std::string out;
    int level = 0;
    int t = 1;
    std::uint64_t seed = 0;
    std::string reduction = "peak";
};

void run_dump_attn(const AttnArgs& a) {
    const ModelConfig cfg = model_for(a.ckpt, a.model_config);
    const ParamStore params = load_checkpoint(a.ckpt);
    const ImageBuffer img = as_rgb(load_image(a.in));
    const AttentionReduction red = a.reduction == "mean" ? AttentionReduction::mean : AttentionReduction::peak;
    const ImageBuffer map = attention_map(img, params, cfg, a.level, a.t, a.seed, red);
    fs::create_directories(a.out);
    const std::string stem = fs::path(a.in).stem().string() + "_attn_l" + std::to_string(a.level);
    save_image(map, fs::path(a.out) / (stem + ".png"));
    const ImageBuffer panels[2] = {img, as_rgb(map)};
    save_image(hconcat(panels), fs::path(a.out) / (stem + "_panel.png"));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Contrast-guided document shadow removal"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* s = app.add_subcommand("synth", "Write seeded synthetic shadow/clean/mask triples");
    s->add_option("--n", synth.n, "Number of pairs")->required();
    s->add_option("--res", synth.res, "Square resolution in pixels")->capture_default_str();
    s->add_option("--seed", synth.seed, "Random seed")->capture_default_str();
    s->add_option("--out", synth.out, "Output directory (shadow/, clean/, mask/)")->required();

    ContrastArgs contrast;
    auto* c = app.add_subcommand("extract-contrast", "Write the raw and (with --ckpt) adjusted contrast heatmaps");
    c->add_option("--in", contrast.in, "Input image")->required()->check(CLI::ExistingFile);
    c->add_option("--ckpt", contrast.ckpt, "Model checkpoint; enables the adjusted heatmap")->check(CLI::ExistingFile);
    c->add_option("--model-config", contrast.model_config, "Model JSON (default: model.json beside --ckpt)");
    c->add_option("--out", contrast.out, "Output directory")->required();

    TrainArgs train;
    auto* t = app.add_subcommand("train", "Train the full model; writes checkpoints and train_log.csv");
    t->add_option("--config", train.config, "Training JSON (flat TrainConfig fields)")->check(CLI::ExistingFile);
    t->add_option("--out", train.out, "Output directory")->required();
    t->add_flag("--ablate-condition", train.ablate_condition, "Drop the context encoder and attention blocks");
    t->add_flag("--ablate-adjustment", train.ablate_adjustment, "Feed the raw heatmap to the context encoder");
    t->add_option("--shadow-dir", train.shadow_dir, "Training shadow images (paired by filename)");
    t->add_option("--clean-dir", train.clean_dir, "Training clean images");
    t->add_option("--eval-shadow-dir", train.eval_shadow_dir, "Held-out shadow images (default: training set)");
    t->add_option("--eval-clean-dir", train.eval_clean_dir, "Held-out clean images");
    t->add_option("--synth-n", train.synth_n, "Synthetic pairs when no directories are given")->capture_default_str();
    t->add_option("--synth-res", train.synth_res, "Synthetic pair size (default: training resolution)");
    t->add_option("--max-iters", train.max_iters, "Override max_iters");
    t->add_option("--resolution", train.resolution, "Override resolution");
    t->add_option("--batch-size", train.batch_size, "Override batch_size");
    t->add_option("--eval-every", train.eval_every, "Override eval_every");
    t->add_option("--checkpoint-every", train.checkpoint_every, "Override checkpoint_every");
    t->add_option("--seed", train.seed, "Override seed");
    t->add_option("--lr", train.lr, "Override lr");
    t->add_flag("--no-augment", train.no_augment, "Disable rotation and cropping");
    t->add_option("--width", train.width, "Base channel width of both U-Nets")->capture_default_str();
    t->add_option("--depth", train.depth, "U-Net depth")->capture_default_str();
    t->add_option("--resume", train.resume, "Resume from a state directory")->check(CLI::ExistingDirectory);
    t->add_option("--log-every", train.log_every, "Progress line period on stderr (0: eval steps only)")
        ->capture_default_str();

    InferArgs infer;
    auto* i = app.add_subcommand("infer", "Remove shadows from an image or a directory of images");
    i->add_option("--ckpt", infer.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    i->add_option("--model-config", infer.model_config, "Model JSON (default: model.json beside --ckpt)");
    i->add_option("--in", infer.in, "Input image or directory")->required();
    i->add_option("--out", infer.out, "Output directory")->required();
    i->add_option("--steps", infer.steps, "Sampling steps (default: all diffusion steps)");
    i->add_option("--seed", infer.seed, "Sampling seed")->capture_default_str();
    i->add_flag("--save-coarse", infer.save_coarse, "Also write the base network output as NAME_coarse.png");

    EvalArgs eval;
    auto* e = app.add_subcommand("eval", "PSNR/SSIM/RMSE of predictions against ground truth");
    e->add_option("--pred", eval.pred, "Prediction directory")->required()->check(CLI::ExistingDirectory);
    e->add_option("--gt", eval.gt, "Ground-truth directory")->required()->check(CLI::ExistingDirectory);
    e->add_option("--res", eval.res, "Both sides are resized to RES x RES")->capture_default_str();
    e->add_option("--csv", eval.csv, "CSV output file")->capture_default_str();

    AttnArgs attn;
    auto* d = app.add_subcommand("dump-attn", "Write the cross-attention heatmap of one level");
    d->add_option("--ckpt", attn.ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
    d->add_option("--model-config", attn.model_config, "Model JSON (default: model.json beside --ckpt)");
    d->add_option("--in", attn.in, "Input image")->required()->check(CLI::ExistingFile);
    d->add_option("--level", attn.level, "U-Net level")->capture_default_str();
    d->add_option("--t", attn.t, "Diffusion timestep of the probe")->capture_default_str();
    d->add_option("--seed", attn.seed, "Noise seed")->capture_default_str();
    d->add_option("--reduction", attn.reduction, "peak or mean")
        ->check(CLI::IsMember({"peak", "mean"}))
        ->capture_default_str();
    d->add_option("--out", attn.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? 0 : 1;
    }

    try {
        if (*s) run_synth(synth);
        else if (*c) run_extract_contrast(contrast);
        else if (*t) run_train(train);
        else if (*i) run_infer(infer);
        else if (*e) run_eval(eval);
        else if (*d) run_dump_attn(attn);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return 2;
    }
    return 0;
}
