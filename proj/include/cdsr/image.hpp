#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

namespace cdsr {

/// Height x width x channels raster of floating-point samples, interleaved
/// row-major (HWC). Samples are nominally in [0, 1]; channels is 1 or 3.
class ImageBuffer {
public:
    ImageBuffer() = default;
    ImageBuffer(int height, int width, int channels, float fill = 0.0f);
    ImageBuffer(int height, int width, int channels, std::vector<float> samples);

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int channels() const noexcept { return channels_; }
    std::size_t size() const noexcept { return samples_.size(); }
    bool empty() const noexcept { return samples_.empty(); }

    float& at(int y, int x, int c = 0) { return samples_[index(y, x, c)]; }
    float at(int y, int x, int c = 0) const { return samples_[index(y, x, c)]; }

    std::span<float> samples() noexcept { return samples_; }
    std::span<const float> samples() const noexcept { return samples_; }

    bool same_dims(const ImageBuffer& other) const noexcept {
        return height_ == other.height_ && width_ == other.width_ && channels_ == other.channels_;
    }
    bool all_finite() const noexcept;

    friend bool operator==(const ImageBuffer&, const ImageBuffer&) = default;

private:
    std::size_t index(int y, int x, int c) const noexcept {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
    }

    int height_ = 0;
    int width_ = 0;
    int channels_ = 0;
    std::vector<float> samples_;
};

/// Loads an 8/16-bit PNG or binary PPM/PGM; samples are divided by the
/// format's maximum value. Images with an alpha channel are rejected.
ImageBuffer load_image(const std::filesystem::path& path);

/// Clamps to [0, 1], rounds to 8 bits and writes PNG (or PPM/PGM for the
/// .ppm/.pgm extensions).
void save_image(const ImageBuffer& img, const std::filesystem::path& path);

/// Quantizes one sample the way save_image does.
unsigned char quantize_u8(float v) noexcept;

/// BT.601 luma for 3-channel input; identity copy for 1-channel input.
ImageBuffer to_luminance(const ImageBuffer& img);

/// Bilinear resampling with clamp-to-edge borders (half-pixel centers).
ImageBuffer resize_bilinear(const ImageBuffer& img, int height, int width);

/// Rotates counter-clockwise by quarter_turns * 90 degrees.
ImageBuffer rotate90(const ImageBuffer& img, int quarter_turns);

ImageBuffer crop(const ImageBuffer& img, int top, int left, int height, int width);

/// Separable Gaussian blur, clamp-to-edge. sigma <= 0 returns a copy.
ImageBuffer gaussian_blur(const ImageBuffer& img, float sigma);

/// Places images left to right; all must share height and channel count.
ImageBuffer hconcat(std::span<const ImageBuffer> images);

void clamp_unit(ImageBuffer& img) noexcept;

} // namespace cdsr
