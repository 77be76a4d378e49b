#include "cdsr/data.hpp"

#include "cdsr/errors.hpp"
#include "cdsr/rng.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <set>

namespace cdsr {

const char* to_string(ShadowKind kind) noexcept {
    switch (kind) {
    case ShadowKind::soft_band: return "soft_band";
    case ShadowKind::polygon: return "polygon";
    case ShadowKind::gradient: return "gradient";
    }
    return "?";
}

ShadowKind shadow_kind_from_string(const std::string& s) {
    if (s == "soft_band") return ShadowKind::soft_band;
    if (s == "polygon") return ShadowKind::polygon;
    if (s == "gradient") return ShadowKind::gradient;
    throw ArgumentError("unknown shadow kind '" + s + "' (soft_band, polygon, gradient)");
}

void SynthConfig::validate() const {
    if (resolution < 8) throw ArgumentError("SynthConfig: resolution must be >= 8");
    if (!(shadow_attenuation > 0.0f && shadow_attenuation < 1.0f)) {
        throw ArgumentError("SynthConfig: shadow_attenuation must lie strictly inside (0, 1)");
    }
    if (n_text_lines < 0 || !(font_scale > 0.0f) || penumbra_sigma < 0.0f) {
        throw ArgumentError("SynthConfig: invalid text or penumbra settings");
    }
    if (background && !(*background > 0.0f && *background <= 1.0f)) {
        throw ArgumentError("SynthConfig: background must lie in (0, 1]");
    }
}

namespace {

void fill_rect(ImageBuffer& img, int y0, int x0, int h, int w, const std::array<float, 3>& color) {
    for (int y = std::max(0, y0); y < std::min(img.height(), y0 + h); ++y)
        for (int x = std::max(0, x0); x < std::min(img.width(), x0 + w); ++x)
            for (int c = 0; c < 3; ++c) img.at(y, x, c) = color[c];
}

ImageBuffer render_page(const SynthConfig& cfg, Rng& rng) {
    const int R = cfg.resolution;
    const float bg = cfg.background ? *cfg.background : static_cast<float>(rng.uniform(0.85, 0.98));
    ImageBuffer page(R, R, 3, bg);
    const int margin = std::max(2, R / 12);

    if (cfg.ruled_lines) {
        const int spacing = std::max(4, R / 8);
        const std::array<float, 3> rule{0.80f * bg, 0.85f * bg, 0.95f * bg};
        for (int y = margin + spacing / 2; y < R - margin; y += spacing) fill_rect(page, y, 0, 1, R, rule);
    }

    const int glyph_h = std::max(2, static_cast<int>(std::lround(3.0f * cfg.font_scale)));
    const int usable = R - 2 * margin;
    for (int line = 0; line < cfg.n_text_lines; ++line) {
        const int y = margin + (usable * line) / std::max(1, cfg.n_text_lines) + rng.uniform_int(0, 1);
        if (y + glyph_h > R - margin) break;
        const float ink = static_cast<float>(rng.uniform(0.05, 0.3));
        const bool blue = rng.uniform() < 0.3;
        const std::array<float, 3> color{ink, ink, blue ? std::min(1.0f, ink + 0.25f) : ink};
        int x = margin + rng.uniform_int(0, std::max(1, R / 16));
        const int line_end = R - margin - rng.uniform_int(0, R / 4);
        while (x < line_end) {
            const int word = std::max(1, static_cast<int>(std::lround(rng.uniform_int(2, 6) * cfg.font_scale)));
            const int w = std::min(word, line_end - x);
            // Jittered glyph block; leaves a 1px gap between letters.
            for (int gx = 0; gx < w; gx += 2) {
                const int jitter = rng.uniform_int(0, 1);
                fill_rect(page, y + jitter, x + gx, glyph_h - jitter, 1, color);
            }
            x += w + std::max(1, static_cast<int>(std::lround(rng.uniform_int(1, 3) * cfg.font_scale)));
        }
    }
    return page;
}

bool inside_polygon(const std::vector<std::array<double, 2>>& poly, double px, double py) {
    bool in = false;
    for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
        const auto& a = poly[i];
        const auto& b = poly[j];
        if ((a[1] > py) != (b[1] > py) && px < (b[0] - a[0]) * (py - a[1]) / (b[1] - a[1]) + a[0]) in = !in;
    }
    return in;
}

ImageBuffer shadow_field(const SynthConfig& cfg, Rng& rng) {
    const int R = cfg.resolution;
    const float att = cfg.shadow_attenuation;
    ImageBuffer s(R, R, 1, 1.0f);
    const double cx = R * rng.uniform(0.35, 0.65), cy = R * rng.uniform(0.35, 0.65);
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double nx = std::cos(theta), ny = std::sin(theta);

    switch (cfg.shadow_kind) {
    case ShadowKind::soft_band: {
        const double half = 0.5 * R * rng.uniform(0.25, 0.5);
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                const double d = (x + 0.5 - cx) * nx + (y + 0.5 - cy) * ny;
                if (std::abs(d) < half) s.at(y, x) = att;
            }
        break;
    }
    case ShadowKind::polygon: {
        const int n = rng.uniform_int(4, 6);
        // Evenly spaced, jittered vertex angles keep the polygon from
        // collapsing into a sliver.
        const double sector = 2.0 * std::numbers::pi / n;
        const double phase = rng.uniform(0.0, sector);
        std::vector<std::array<double, 2>> poly;
        for (int k = 0; k < n; ++k) {
            const double a = phase + sector * (k + rng.uniform(-0.3, 0.3));
            const double r = R * rng.uniform(0.25, 0.45);
            poly.push_back({cx + r * std::cos(a), cy + r * std::sin(a)});
        }
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x)
                if (inside_polygon(poly, x + 0.5, y + 0.5)) s.at(y, x) = att;
        break;
    }
    case ShadowKind::gradient: {
        // Full attenuation over a core from one page edge, then a linear
        // ramp up to full light.
        const double core = rng.uniform(0.25, 0.45);
        const double ramp = rng.uniform(0.1, 0.2);
        double lo = 1e300, hi = -1e300;
        for (int y : {0, R})
            for (int x : {0, R}) {
                const double p = x * nx + y * ny;
                lo = std::min(lo, p);
                hi = std::max(hi, p);
            }
        for (int y = 0; y < R; ++y)
            for (int x = 0; x < R; ++x) {
                const double p = ((x + 0.5) * nx + (y + 0.5) * ny - lo) / (hi - lo);
                const double u = std::clamp((p - core) / ramp, 0.0, 1.0);
                s.at(y, x) = static_cast<float>(att + (1.0 - att) * u);
            }
        break;
    }
    }
    s = gaussian_blur(s, cfg.penumbra_sigma);
    for (float& v : s.samples()) {
        v = std::clamp(v, att, 1.0f);
        if (v >= 0.99f) v = 1.0f;
    }
    return s;
}

} // namespace

TrainSample synth_pair(const SynthConfig& cfg) {
    cfg.validate();
    Rng page_rng = Rng::derive(cfg.seed, {1});
    Rng shadow_rng = Rng::derive(cfg.seed, {2});
    TrainSample out;
    out.clean = render_page(cfg, page_rng);
    const ImageBuffer s = shadow_field(cfg, shadow_rng);
    out.shadow = out.clean;
    ImageBuffer mask(cfg.resolution, cfg.resolution, 1, 0.0f);
    for (int y = 0; y < cfg.resolution; ++y) {
        for (int x = 0; x < cfg.resolution; ++x) {
            const float f = s.at(y, x);
            for (int c = 0; c < 3; ++c) out.shadow.at(y, x, c) = out.clean.at(y, x, c) * f;
            mask.at(y, x) = f < 0.99f ? 1.0f : 0.0f;
        }
    }
    out.shadow_mask = std::move(mask);
    out.provenance = "synth:" + std::string(to_string(cfg.shadow_kind)) + ":seed=" + std::to_string(cfg.seed);
    return out;
}

SynthConfig synth_item_config(int resolution, std::uint64_t seed, int index) {
    Rng rng = Rng::derive(seed, {0x73796e74ull, static_cast<std::uint64_t>(index)});
    SynthConfig cfg;
    cfg.resolution = resolution;
    cfg.seed = rng.engine()();
    cfg.shadow_kind = static_cast<ShadowKind>(index % 3);
    cfg.shadow_attenuation = static_cast<float>(rng.uniform(0.35, 0.55));
    cfg.penumbra_sigma = static_cast<float>(rng.uniform(0.5, 1.5)) * resolution / 64.0f;
    cfg.n_text_lines = rng.uniform_int(4, 8);
    cfg.font_scale = std::max(1.0f, resolution / 64.0f);
    return cfg;
}

std::vector<std::string> list_images(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<std::string> names;
    for (const auto& e : std::filesystem::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
        if (ext == ".png" || ext == ".ppm" || ext == ".pgm") names.push_back(e.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

PairedDirResult load_paired_dir(const std::filesystem::path& shadow_dir, const std::filesystem::path& clean_dir) {
    const auto shadows = list_images(shadow_dir);
    const auto cleans = list_images(clean_dir);
    const std::set<std::string> clean_set(cleans.begin(), cleans.end());
    const std::set<std::string> shadow_set(shadows.begin(), shadows.end());
    PairedDirResult result;
    for (const auto& n : shadows) {
        if (!clean_set.count(n)) result.unmatched_names.push_back(n);
    }
    for (const auto& n : cleans) {
        if (!shadow_set.count(n)) result.unmatched_names.push_back(n);
    }
    std::sort(result.unmatched_names.begin(), result.unmatched_names.end());
    result.unmatched = result.unmatched_names.size();

    for (const auto& n : shadows) {
        if (!clean_set.count(n)) continue;
        TrainSample s;
        s.shadow = load_image(shadow_dir / n);
        s.clean = load_image(clean_dir / n);
        if (!s.shadow.same_dims(s.clean)) throw ShapeError("pair '" + n + "' differs in size between directories");
        s.provenance = (shadow_dir / n).string() + "|" + (clean_dir / n).string();
        result.samples.push_back(std::move(s));
    }
    if (result.samples.empty()) {
        throw IoError("no matching filenames between " + shadow_dir.string() + " and " + clean_dir.string());
    }
    return result;
}

} // namespace cdsr
