// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. `--only 3,5` runs a subset.

#include "cdsr/contrast.hpp"
#include "cdsr/convert.hpp"
#include "cdsr/data.hpp"
#include "cdsr/diffusion.hpp"
#include "cdsr/metrics.hpp"
#include "cdsr/model.hpp"
#include "cdsr/nn.hpp"
#include "cdsr/rng.hpp"
#include "cdsr/trainer.hpp"
#include "cdsr/unet.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace cdsr;
namespace fs = std::filesystem;

namespace {

struct Verdict {
    bool pass = false;
    std::string summary;
};

void note(const std::string& line) { std::cout << "  " << line << std::endl; }

std::string fmt(double v, int precision = 6) {
    std::ostringstream s;
    s.precision(precision);
    s << v;
    return s.str();
}

class ScratchDir {
public:
    ScratchDir() {
        path_ = fs::temp_directory_path() / ("cdsr_acceptance_" + std::to_string(::getpid()));
        fs::remove_all(path_);
        fs::create_directories(path_);
    }
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    const fs::path& path() const { return path_; }

private:
    fs::path path_;
};

std::vector<TrainSample> synthetic_set(int n, int res, std::uint64_t seed) {
    std::vector<TrainSample> out;
    for (int i = 0; i < n; ++i) out.push_back(synth_pair(synth_item_config(res, seed, i)));
    return out;
}

std::vector<std::uint8_t> file_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string("\"") + CDSR_CLI_PATH + "\" " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// ---------------------------------------------------------------- 1 and 2

struct OverfitRun {
    double input_psnr = 0.0;
    double output_psnr = 0.0;
    double seconds = 0.0;
};

// 8 synthetic 64x64 pairs, 2000 steps, default optimizer settings. Rotation
// and cropping are off: crops of an exact-size image are the identity and
// rotations only slow down memorisation of the fixed training set.
OverfitRun overfit_run(bool ablate_condition) {
    TrainConfig cfg;
    cfg.resolution = 64;
    cfg.max_iters = 2000;
    cfg.augment = false;
    cfg.ablate_condition = ablate_condition;
    cfg.eval_every = 0;
    cfg.seed = 0;
    DataSource data;
    data.train = synthetic_set(8, 64, cfg.seed);
    data.eval = data.train;

    OverfitRun run;
    for (const auto& s : data.train) run.input_psnr += psnr(s.shadow, s.clean) / 8.0;
    TrainOptions opts;
    opts.on_step = [](const StepLog& log) {
        if (log.step % 500 == 0) {
            note("step " + std::to_string(log.step) + " loss " + fmt(log.loss.loss) + " l_base " +
                 fmt(log.loss.l_base) + " l_refine " + fmt(log.loss.l_refine) +
                 (log.psnr ? " psnr " + fmt(*log.psnr) : std::string()));
        }
    };
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult r = train_loop(cfg, ModelConfig::desk(), data, std::move(opts));
    run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    run.output_psnr = r.log.back().psnr.value();
    return run;
}

std::optional<OverfitRun> g_conditioned;

const OverfitRun& conditioned_run() {
    if (!g_conditioned) g_conditioned = overfit_run(false);
    return *g_conditioned;
}

Verdict criterion1() {
    const OverfitRun& r = conditioned_run();
    const double gain = r.output_psnr - r.input_psnr;
    note("input PSNR " + fmt(r.input_psnr) + " dB, output PSNR " + fmt(r.output_psnr) + " dB, " + fmt(r.seconds, 4) +
         " s");
    return {gain >= 10.0, "overfit gain " + fmt(gain, 4) + " dB (need >= 10)"};
}

Verdict criterion2() {
    const OverfitRun& c = conditioned_run();
    const OverfitRun a = overfit_run(true);
    note("ablated run: output PSNR " + fmt(a.output_psnr) + " dB, " + fmt(a.seconds, 4) + " s");
    return {c.output_psnr >= a.output_psnr - 0.5,
            "conditioned " + fmt(c.output_psnr, 5) + " dB vs ablated " + fmt(a.output_psnr, 5) +
                " dB (need conditioned >= ablated - 0.5)"};
}

// ---------------------------------------------------------------------- 3

Verdict criterion3() {
    const NoiseSchedule sched = build_schedule(10, 1e-4, 0.02);
    const int n = 10000;
    Tensor x({n}, 1.0f);
    Rng rng(2024);
    bool ok = true;
    double worst = 0.0;
    for (int t = 1; t <= 10; ++t) {
        Tensor eps({n});
        for (int i = 0; i < n; ++i) eps[i] = static_cast<float>(rng.normal());
        x = forward_step(x, t, eps, sched);
        double mean = 0.0;
        for (int i = 0; i < n; ++i) mean += x[i];
        mean /= n;
        double m2 = 0.0, m4 = 0.0;
        for (int i = 0; i < n; ++i) {
            const double d = x[i] - mean;
            m2 += d * d;
            m4 += d * d * d * d;
        }
        const double var = m2 / (n - 1);
        m4 /= n;
        const double ab = sched.alpha_bar[t - 1];
        const double se_mean = std::sqrt(var / n);
        const double se_var = std::sqrt(std::max(m4 - var * var, 0.0) / n);
        const double z_mean = std::abs(mean - std::sqrt(ab)) / se_mean;
        const double z_var = std::abs(var - (1.0 - ab)) / se_var;
        worst = std::max({worst, z_mean, z_var});
        if (z_mean > 3.0 || z_var > 3.0) ok = false;
        note("t=" + std::to_string(t) + " mean " + fmt(mean, 7) + " vs " + fmt(std::sqrt(ab), 7) + " (" +
             fmt(z_mean, 3) + " SE), var " + fmt(var, 7) + " vs " + fmt(1.0 - ab, 7) + " (" + fmt(z_var, 3) + " SE)");
    }
    return {ok, "worst deviation " + fmt(worst, 3) + " standard errors over t=1..10 (need <= 3)"};
}

// ---------------------------------------------------------------------- 4

struct GroupCheck {
    std::string group;
    nn::GradCheckResult fd;
    nn::DirectionalCheckResult dir;
};

Verdict criterion4() {
    // Every parameter starts from its random initialisation, including the
    // attention output projections that are zero in a fresh model: with
    // those at zero, ctx and adjust have an identically zero gradient.
    const ModelConfig model = ModelConfig::desk();
    ParamStore params;
    init_params(params, model_param_specs(model), 77);

    TrainConfig cfg;
    cfg.resolution = 16;
    cfg.batch_size = 1;
    cfg.seed = 5;
    const auto data = synthetic_set(2, 16, 5);
    const ModelBatch batch = make_batch(cfg, model, data, 0);

    const auto l_base = [&](ParamBinding& b) { return model_loss(b, model, batch).l_base; };
    const auto l_refine = [&](ParamBinding& b) { return model_loss(b, model, batch).l_refine; };
    const auto total = [&](ParamBinding& b) { return model_loss(b, model, batch).loss; };
    const std::vector<std::pair<std::string, nn::ScalarFn>> plan{
        {"base.", l_base}, {"denoise.", l_refine}, {"attn.", l_refine}, {"ctx.", l_refine}, {"adjust.", total}};

    bool ok = true;
    double worst = 0.0;
    std::string worst_group;
    for (std::size_t i = 0; i < plan.size(); ++i) {
        const auto& [group, f] = plan[i];
        const auto names = params.names_with_prefix(group);
        GroupCheck g{group, nn::grad_check(f, params, names, {1e-3f, 50, 100 + i}),
                     nn::gradient_direction_check(f, params, names, 1e-3f)};
        note(group + " coords " + std::to_string(g.fd.coordinates) + " max rel error " + fmt(g.fd.max_rel_error, 4) +
             " at " + g.fd.worst_name + "[" + std::to_string(g.fd.worst_index) + "] fd " + fmt(g.fd.worst_numeric, 4) +
             " ad " + fmt(g.fd.worst_analytic, 4) + "; directional rel error " + fmt(g.dir.rel_error, 3) +
             " (|g| " + fmt(g.dir.analytic, 4) + ")");
        if (!(g.fd.max_rel_error < 1e-2) || g.fd.coordinates < 50) ok = false;
        if (g.fd.max_rel_error > worst) {
            worst = g.fd.max_rel_error;
            worst_group = group;
        }
    }
    return {ok, "worst per-coordinate relative error " + fmt(worst, 4) + " in " + worst_group +
                    " (need < 1e-2 at h=1e-3, 50 coordinates per group)"};
}

// ---------------------------------------------------------------------- 5

double naive_ssim(const ImageBuffer& a, const ImageBuffer& b) {
    double w[11][11];
    double wsum = 0.0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
            w[i][j] = std::exp(-((i - 5) * (i - 5) + (j - 5) * (j - 5)) / (2.0 * 1.5 * 1.5));
            wsum += w[i][j];
        }
    const double c1 = std::pow(0.01 * 255.0, 2), c2 = std::pow(0.03 * 255.0, 2);
    double total = 0.0;
    for (int c = 0; c < a.channels(); ++c) {
        double acc = 0.0;
        int count = 0;
        for (int y0 = 0; y0 + 11 <= a.height(); ++y0)
            for (int x0 = 0; x0 + 11 <= a.width(); ++x0) {
                double ma = 0, mb = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        ma += w[i][j] / wsum * a.at(y0 + i, x0 + j, c) * 255.0;
                        mb += w[i][j] / wsum * b.at(y0 + i, x0 + j, c) * 255.0;
                    }
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < 11; ++i)
                    for (int j = 0; j < 11; ++j) {
                        const double k = w[i][j] / wsum;
                        const double da = a.at(y0 + i, x0 + j, c) * 255.0 - ma;
                        const double db = b.at(y0 + i, x0 + j, c) * 255.0 - mb;
                        va += k * da * da;
                        vb += k * db * db;
                        cov += k * da * db;
                    }
                acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
        total += acc / count;
    }
    return total / a.channels();
}

ImageBuffer random_image(int h, int w, std::uint64_t seed) {
    Rng rng(seed);
    ImageBuffer img(h, w, 3);
    for (float& v : img.samples()) v = static_cast<float>(rng.uniform(0.0, 1.0));
    return img;
}

Verdict criterion5() {
    bool ok = true;
    // Unit-range 0.1 and 10/255 are not floats; the stored values are off by
    // ~1e-8 relative, so "exact" is checked to 1e-6.
    const double p = psnr(ImageBuffer(32, 32, 3, 0.0f), ImageBuffer(32, 32, 3, 0.1f));
    const double e = rmse(ImageBuffer(32, 32, 3, 0.0f), ImageBuffer(32, 32, 3, 10.0f / 255.0f));
    note("psnr at uniform diff 25.5: " + fmt(p, 12) + " dB; rmse at uniform diff 10: " + fmt(e, 12));
    ok = ok && std::abs(p - 20.0) < 1e-6 && std::abs(e - 10.0) < 1e-6;

    double worst_ssim = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        const ImageBuffer a = random_image(64, 64, 1000 + s);
        ImageBuffer b = random_image(64, 64, 2000 + s);
        for (std::size_t i = 0; i < b.size(); ++i) b.samples()[i] = 0.7f * a.samples()[i] + 0.3f * b.samples()[i];
        worst_ssim = std::max(worst_ssim, std::abs(ssim(a, b) - naive_ssim(a, b)));
    }
    note("ssim vs naive windowed 64-bit oracle, 20 pairs: max |diff| " + fmt(worst_ssim, 3));
    ok = ok && worst_ssim <= 1e-6;

    double worst_id = 0.0;
    ImageBuffer a = random_image(32, 32, 7);
    for (float& v : a.samples()) v = std::round(v * 512.0f) / 1024.0f;
    for (float d : {0.015625f, 0.0625f, 0.125f, 0.25f}) {
        ImageBuffer b = a;
        for (float& v : b.samples()) v += d;
        worst_id = std::max(worst_id, std::abs(psnr(a, b) - 20.0 * std::log10(255.0 / rmse(a, b))));
    }
    note("psnr vs 20 log10(255/rmse) on uniform-error pairs: max |diff| " + fmt(worst_id, 3));
    ok = ok && worst_id <= 1e-9;
    return {ok, "closed forms, SSIM oracle (" + fmt(worst_ssim, 2) + ") and psnr/rmse identity (" + fmt(worst_id, 2) +
                    ")"};
}

// ---------------------------------------------------------------------- 6

Verdict criterion6() {
    double min_sep = 1e9;
    int passed = 0;
    for (int i = 0; i < 50; ++i) {
        const TrainSample s = synth_pair(synth_item_config(64, 6, i));
        const ImageBuffer heat = extract_contrast_heatmap(s.shadow).heatmap;
        double in = 0, out = 0;
        int nin = 0, nout = 0;
        for (int y = 0; y < heat.height(); ++y)
            for (int x = 0; x < heat.width(); ++x) {
                if (s.shadow_mask->at(y, x) > 0.5f) {
                    in += heat.at(y, x);
                    ++nin;
                } else {
                    out += heat.at(y, x);
                    ++nout;
                }
            }
        const double sep = (nin ? in / nin : 0.0) - (nout ? out / nout : 0.0);
        min_sep = std::min(min_sep, sep);
        if (nin > 0 && nout > 0 && sep >= 0.2) ++passed;
    }
    return {passed == 50, std::to_string(passed) + "/50 samples separate by >= 0.2; minimum separation " +
                              fmt(min_sep, 4)};
}

// ---------------------------------------------------------------------- 7

Verdict criterion7(const fs::path& scratch) {
    const ModelConfig model = ModelConfig::desk();
    TrainConfig cfg;
    cfg.resolution = 64;
    cfg.eval_every = 0;
    cfg.seed = 9;
    const DataSource data{synthetic_set(8, 64, 9), {}};

    cfg.max_iters = 10;
    const TrainResult a = train_loop(cfg, model, data);
    const TrainResult b = train_loop(cfg, model, data);
    bool same_losses = a.log.size() == 10 && b.log.size() == 10;
    for (std::size_t i = 0; same_losses && i < a.log.size(); ++i) {
        same_losses = a.log[i].loss.loss == b.log[i].loss.loss && a.log[i].loss.l_base == b.log[i].loss.l_base &&
                      a.log[i].loss.l_refine == b.log[i].loss.l_refine;
    }
    const bool same_params = a.state.params == b.state.params;
    note(std::string("10-step runs: losses ") + (same_losses ? "bitwise equal" : "DIFFER") + ", parameters " +
         (same_params ? "bitwise equal" : "DIFFER"));

    const fs::path ckpt = scratch / "c7.ckpt", ckpt2 = scratch / "c7b.ckpt";
    save_checkpoint(a.state.params, ckpt);
    const ParamStore loaded = load_checkpoint(ckpt);
    save_checkpoint(loaded, ckpt2);
    const bool roundtrip = loaded == a.state.params && file_bytes(ckpt) == file_bytes(ckpt2);
    note(std::string("checkpoint round trip ") + (roundtrip ? "bitwise equal" : "DIFFERS"));

    cfg.max_iters = 20;
    const TrainResult full = train_loop(cfg, model, data);
    cfg.max_iters = 10;
    train_loop(cfg, model, data, {scratch / "c7_half", std::nullopt, {}});
    cfg.max_iters = 20;
    TrainResult resumed = train_loop(cfg, model, data, {{}, load_train_state(scratch / "c7_half" / "state"), {}});
    const bool resume_ok = resumed.state.params == full.state.params &&
                           resumed.state.optimizer.m == full.state.optimizer.m &&
                           resumed.state.optimizer.v == full.state.optimizer.v && resumed.state.step == 20;
    note(std::string("train 20 vs train 10 + resume 10: ") + (resume_ok ? "bitwise equal" : "DIFFER"));

    save_checkpoint(full.state.params, scratch / "c7_full.ckpt");
    save_model_config(model, scratch / "model.json");
    fs::rename(scratch / "c7_full.ckpt", scratch / "model.ckpt");
    fs::create_directories(scratch / "c7_in");
    for (int i = 0; i < 2; ++i) save_image(data.train[i].shadow, scratch / "c7_in" / ("p" + std::to_string(i) + ".png"));
    const std::string infer = "infer --ckpt " + q(scratch / "model.ckpt") + " --in " + q(scratch / "c7_in") +
                              " --steps 10 --seed 3 --out ";
    const int r1 = run_cli(infer + q(scratch / "c7_o1"));
    const int r2 = run_cli(infer + q(scratch / "c7_o2"));
    bool infer_ok = r1 == 0 && r2 == 0;
    for (int i = 0; infer_ok && i < 2; ++i) {
        const std::string n = "p" + std::to_string(i) + ".png";
        infer_ok = file_bytes(scratch / "c7_o1" / n) == file_bytes(scratch / "c7_o2" / n) &&
                   !file_bytes(scratch / "c7_o1" / n).empty();
    }
    const ImageBuffer lib1 = restore(data.train[0].shadow, full.state.params, model, 10, 3).output;
    const ImageBuffer lib2 = restore(data.train[0].shadow, full.state.params, model, 10, 3).output;
    infer_ok = infer_ok && std::equal(lib1.samples().begin(), lib1.samples().end(), lib2.samples().begin());
    note(std::string("infer twice with seed 3: ") + (infer_ok ? "bitwise equal" : "DIFFER"));

    const bool ok = same_losses && same_params && roundtrip && resume_ok && infer_ok;
    return {ok, "10-step determinism, checkpoint round trip, resume equivalence, infer reproducibility"};
}

// ---------------------------------------------------------------------- 8

std::set<std::string> names_of(const ModelConfig& m) {
    std::set<std::string> s;
    for (const auto& [n, shape] : model_param_specs(m)) s.insert(n);
    return s;
}

Verdict criterion8(const fs::path& scratch) {
    bool ok = true;
    const ModelConfig full = ModelConfig::desk();
    TrainConfig flags;
    flags.ablate_condition = true;
    const std::set<std::string> all = names_of(full), no_cond = names_of(ablated(full, flags));
    std::set<std::string> expected;
    for (const auto& n : all) {
        if (n.rfind("ctx.", 0) != 0 && n.rfind("attn.", 0) != 0) expected.insert(n);
    }
    const bool cond_ok = no_cond == expected && no_cond.size() < all.size();
    note("--ablate-condition: " + std::to_string(all.size() - no_cond.size()) + " of " + std::to_string(all.size()) +
         " names removed, " + (cond_ok ? "exactly the ctx./attn. set" : "NOT the ctx./attn. set"));
    ok = ok && cond_ok;

    // The CLI flag reaches the checkpoint.
    const int rc = run_cli("train --out " + q(scratch / "c8") +
                           " --ablate-condition --max-iters 1 --resolution 16 --synth-n 1 --eval-every 0 --log-every 0");
    std::set<std::string> cli_names;
    if (rc == 0) {
        for (const auto& [n, t] : load_checkpoint(scratch / "c8" / "model.ckpt")) cli_names.insert(n);
    }
    note("cli train --ablate-condition checkpoint: " + std::string(cli_names == expected ? "matches" : "DIFFERS"));
    ok = ok && cli_names == expected;

    flags = TrainConfig{};
    flags.ablate_adjustment = true;
    const ModelConfig no_adj = ablated(full, flags);
    const bool intact = names_of(no_adj) == all;
    note(std::string("--ablate-adjustment parameter set ") + (intact ? "intact" : "CHANGED"));
    ok = ok && intact;

    const TrainSample s = synth_pair(synth_item_config(32, 8, 1));
    const ImageBuffer raw = extract_contrast_heatmap(s.shadow, full.contrast).heatmap;
    ModelBatch batch;
    batch.shadow = image_to_tensor(s.shadow);
    batch.clean = image_to_tensor(s.clean);
    batch.heatmap = image_to_tensor(raw);
    batch.t = {7};
    batch.noise = Tensor(batch.clean.shape(), 0.1f);
    const ParamStore params = init_model(full, 4);
    Tensor consumed_ablated, consumed_full;
    {
        ParamBinding b(params, false);
        model_loss(b, no_adj, batch, [&](const Tensor& c) { consumed_ablated = c; });
    }
    {
        ParamBinding b(params, false);
        model_loss(b, full, batch, [&](const Tensor& c) { consumed_full = c; });
    }
    const bool routes_raw = consumed_ablated == image_to_tensor(raw);
    const bool full_adjusts = !(consumed_full == image_to_tensor(raw)) &&
                              consumed_full == image_to_tensor(adjust_contrast({raw, ContrastStage::raw}, params).heatmap);
    note(std::string("hook: ablated model consumes ") + (routes_raw ? "the raw heatmap bitwise" : "SOMETHING ELSE") +
         ", full model consumes " + (full_adjusts ? "the adjusted heatmap" : "NOT the adjusted heatmap"));
    ok = ok && routes_raw && full_adjusts;
    return {ok, "structural ablation and conditioning route"};
}

} // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--only" && i + 1 < argc) {
            std::stringstream ss(argv[++i]);
            std::string tok;
            while (std::getline(ss, tok, ',')) only.insert(std::stoi(tok));
        } else {
            std::cerr << "usage: acceptance [--only N[,N...]]\n";
            return 1;
        }
    }
    ScratchDir scratch;
    const std::map<int, std::pair<std::string, std::function<Verdict()>>> criteria{
        {1, {"overfit convergence", criterion1}},
        {2, {"ablation direction", criterion2}},
        {3, {"diffusion marginal", criterion3}},
        {4, {"gradient checks", criterion4}},
        {5, {"metric oracles", criterion5}},
        {6, {"contrast separation", criterion6}},
        {7, {"determinism and persistence", [&] { return criterion7(scratch.path()); }}},
        {8, {"structural ablation", [&] { return criterion8(scratch.path()); }}},
    };
    int failures = 0;
    for (const auto& [id, entry] : criteria) {
        if (!only.empty() && !only.count(id)) continue;
        std::cout << "criterion " << id << " (" << entry.first << ")" << std::endl;
        Verdict v;
        try {
            v = entry.second();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        if (!v.pass) ++failures;
        std::cout << (v.pass ? "PASS" : "FAIL") << " criterion " << id << " " << entry.first << ": " << v.summary
                  << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
