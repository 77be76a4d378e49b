#pragma once

#include "cdsr/image.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cdsr {

/// Paired (shadow x, clean y) example. The mask is synthetic ground truth
/// for assertions only; model entry points take images, never this struct.
struct TrainSample {
    ImageBuffer shadow;
    ImageBuffer clean;
    std::optional<ImageBuffer> shadow_mask;
    std::string provenance;
};

enum class ShadowKind { soft_band, polygon, gradient };

const char* to_string(ShadowKind kind) noexcept;
ShadowKind shadow_kind_from_string(const std::string& s);

struct SynthConfig {
    int resolution = 64;
    int n_text_lines = 6;
    float font_scale = 1.0f;
    ShadowKind shadow_kind = ShadowKind::soft_band;
    float shadow_attenuation = 0.5f;
    float penumbra_sigma = 2.0f;
    std::uint64_t seed = 0;
    /// Fixed page brightness; drawn from [0.85, 0.98] when unset.
    std::optional<float> background;
    bool ruled_lines = true;

    void validate() const;
};

/// Renders a clean page (background, glyph blocks, optional ruled lines),
/// builds a shadow field s in (attenuation, 1] with a Gaussian penumbra and
/// returns x = y * s. Field values >= 0.99 are snapped to exactly 1, so the
/// mask (s < 0.99) contains every pixel the shadow touches.
TrainSample synth_pair(const SynthConfig& cfg);

/// SynthConfig for item `index` of a seeded synthetic set: cycles the
/// three shadow kinds and derives per-item seeds.
SynthConfig synth_item_config(int resolution, std::uint64_t seed, int index);

struct PairedDirResult {
    std::vector<TrainSample> samples;
    std::size_t unmatched = 0;
    std::vector<std::string> unmatched_names;
};

/// Pairs images with identical filenames in both directories, sorted by
/// name. Filenames present on only one side are counted and skipped; an
/// empty intersection or a size mismatch inside a pair is an error.
PairedDirResult load_paired_dir(const std::filesystem::path& shadow_dir, const std::filesystem::path& clean_dir);

/// Sorted image filenames (.png/.ppm/.pgm) directly inside `dir`.
std::vector<std::string> list_images(const std::filesystem::path& dir);

} // namespace cdsr
