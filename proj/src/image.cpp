#include "cdsr/image.hpp"

#include "cdsr/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>

namespace cdsr {

ImageBuffer::ImageBuffer(int height, int width, int channels, float fill)
    : height_(height), width_(width), channels_(channels) {
    if (height < 0 || width < 0 || (channels != 1 && channels != 3)) {
        throw ShapeError("ImageBuffer: invalid dims " + std::to_string(height) + "x" +
                         std::to_string(width) + "x" + std::to_string(channels));
    }
    samples_.assign(static_cast<std::size_t>(height) * width * channels, fill);
}

ImageBuffer::ImageBuffer(int height, int width, int channels, std::vector<float> samples)
    : ImageBuffer(height, width, channels) {
    if (samples.size() != samples_.size()) {
        throw ShapeError("ImageBuffer: sample count " + std::to_string(samples.size()) +
                         " does not match dims");
    }
    samples_ = std::move(samples);
}

bool ImageBuffer::all_finite() const noexcept {
    return std::all_of(samples_.begin(), samples_.end(), [](float v) { return std::isfinite(v); });
}

unsigned char quantize_u8(float v) noexcept {
    if (!(v > 0.0f)) return 0; // also maps NaN to 0
    if (v >= 1.0f) return 255;
    return static_cast<unsigned char>(std::lround(v * 255.0f));
}

void clamp_unit(ImageBuffer& img) noexcept {
    for (float& v : img.samples()) v = std::clamp(v, 0.0f, 1.0f);
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const noexcept {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::string lower_ext(const std::filesystem::path& p) {
    std::string ext = p.extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    return ext;
}

// libpng reports errors by longjmp; everything with a destructor lives in the
// caller so nothing is skipped when the jump lands.
struct PngReadResult {
    png_uint_32 width = 0;
    png_uint_32 height = 0;
    int channels = 0;
    int bit_depth = 0;
    bool has_alpha = false;
};

bool png_read_raw(std::FILE* fp, PngReadResult& info, std::vector<unsigned char>& raw, char* err,
                  std::size_t err_len) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) return false;
    png_infop pinfo = png_create_info_struct(png);
    if (!pinfo) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        return false;
    }
    if (setjmp(png_jmpbuf(png))) {
        std::snprintf(err, err_len, "libpng decode failure");
        png_destroy_read_struct(&png, &pinfo, nullptr);
        return false;
    }
    png_init_io(png, fp);
    png_read_info(png, pinfo);

    const int color = png_get_color_type(png, pinfo);
    int depth = png_get_bit_depth(png, pinfo);
    if ((color & PNG_COLOR_MASK_ALPHA) || png_get_valid(png, pinfo, PNG_INFO_tRNS)) {
        info.has_alpha = true;
        png_destroy_read_struct(&png, &pinfo, nullptr);
        return false;
    }
    if (color == PNG_COLOR_TYPE_PALETTE) {
        png_set_palette_to_rgb(png);
        depth = 8;
    }
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
        png_set_expand_gray_1_2_4_to_8(png);
        depth = 8;
    }
    png_read_update_info(png, pinfo);

    info.width = png_get_image_width(png, pinfo);
    info.height = png_get_image_height(png, pinfo);
    info.channels = png_get_channels(png, pinfo);
    info.bit_depth = depth;
    const std::size_t rowbytes = png_get_rowbytes(png, pinfo);
    raw.resize(rowbytes * info.height);
    for (png_uint_32 y = 0; y < info.height; ++y) {
        png_read_row(png, raw.data() + y * rowbytes, nullptr);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &pinfo, nullptr);
    return true;
}

ImageBuffer load_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());
    PngReadResult info;
    std::vector<unsigned char> raw;
    char err[128] = {0};
    if (!png_read_raw(fp.get(), info, raw, err, sizeof(err))) {
        if (info.has_alpha) throw FormatError(path.string() + ": images with an alpha channel are not supported");
        throw FormatError(path.string() + ": " + (err[0] ? err : "cannot initialise PNG reader"));
    }
    if (info.channels != 1 && info.channels != 3) {
        throw FormatError(path.string() + ": unsupported PNG channel count " + std::to_string(info.channels));
    }
    ImageBuffer img(static_cast<int>(info.height), static_cast<int>(info.width), info.channels);
    auto out = img.samples();
    if (info.bit_depth == 16) {
        for (std::size_t i = 0; i < out.size(); ++i) {
            const unsigned v = (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1];
            out[i] = static_cast<float>(v) / 65535.0f;
        }
    } else {
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(raw[i]) / 255.0f;
    }
    return img;
}

bool png_write_raw(std::FILE* fp, int width, int height, int channels, const unsigned char* rows) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) return false;
    png_infop pinfo = png_create_info_struct(png);
    if (!pinfo) {
        png_destroy_write_struct(&png, nullptr);
        return false;
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &pinfo);
        return false;
    }
    png_init_io(png, fp);
    png_set_IHDR(png, pinfo, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, pinfo);
    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    for (int y = 0; y < height; ++y) png_write_row(png, rows + y * stride);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &pinfo);
    return true;
}

// Reads one whitespace/comment separated header token of a PNM file.
std::string pnm_token(std::istream& in) {
    std::string tok;
    int c;
    while ((c = in.get()) != EOF) {
        if (c == '#') {
            while ((c = in.get()) != EOF && c != '\n') {
            }
            continue;
        }
        if (std::isspace(c)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(c));
    }
    return tok;
}

ImageBuffer load_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::string magic = pnm_token(in);
    const int channels = magic == "P6" ? 3 : magic == "P5" ? 1 : 0;
    if (channels == 0) throw FormatError(path.string() + ": only binary P5/P6 PNM files are supported");
    int width = 0, height = 0, maxval = 0;
    try {
        width = std::stoi(pnm_token(in));
        height = std::stoi(pnm_token(in));
        maxval = std::stoi(pnm_token(in));
    } catch (const std::exception&) {
        throw FormatError(path.string() + ": malformed PNM header");
    }
    if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
        throw FormatError(path.string() + ": malformed PNM header");
    }
    const int bytes = maxval > 255 ? 2 : 1;
    ImageBuffer img(height, width, channels);
    auto out = img.samples();
    std::vector<unsigned char> raw(out.size() * bytes);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw FormatError(path.string() + ": truncated PNM payload");
    }
    const float max = static_cast<float>(maxval);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const unsigned v = bytes == 2 ? (static_cast<unsigned>(raw[2 * i]) << 8) | raw[2 * i + 1] : raw[i];
        out[i] = static_cast<float>(v) / max;
    }
    return img;
}

} // namespace

ImageBuffer load_image(const std::filesystem::path& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("image not found: " + path.string());
    unsigned char sig[8] = {0};
    probe.read(reinterpret_cast<char*>(sig), sizeof(sig));
    probe.close();
    if (png_sig_cmp(sig, 0, 8) == 0) return load_png(path);
    if (sig[0] == 'P' && (sig[1] == '5' || sig[1] == '6')) return load_pnm(path);
    throw FormatError(path.string() + ": unsupported image format (expected PNG or binary PPM)");
}

void save_image(const ImageBuffer& img, const std::filesystem::path& path) {
    if (img.empty()) throw ShapeError("save_image: empty image");
    std::vector<unsigned char> bytes(img.size());
    auto in = img.samples();
    std::transform(in.begin(), in.end(), bytes.begin(), quantize_u8);

    const std::string ext = lower_ext(path);
    if (ext == ".ppm" || ext == ".pgm") {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot write " + path.string());
        out << (img.channels() == 3 ? "P6" : "P5") << '\n' << img.width() << ' ' << img.height() << "\n255\n";
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw IoError("write failed: " + path.string());
        return;
    }
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw IoError("cannot write " + path.string());
    if (!png_write_raw(fp.get(), img.width(), img.height(), img.channels(), bytes.data())) {
        throw IoError("PNG encode failed: " + path.string());
    }
}

ImageBuffer to_luminance(const ImageBuffer& img) {
    if (img.channels() == 1) return img;
    if (img.channels() != 3) throw ShapeError("to_luminance: expected 1 or 3 channels");
    ImageBuffer out(img.height(), img.width(), 1);
    auto src = img.samples();
    auto dst = out.samples();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] = 0.299f * src[3 * i] + 0.587f * src[3 * i + 1] + 0.114f * src[3 * i + 2];
    }
    return out;
}

ImageBuffer resize_bilinear(const ImageBuffer& img, int height, int width) {
    if (height < 1 || width < 1) throw ArgumentError("resize_bilinear: target dims must be >= 1");
    if (img.empty()) throw ShapeError("resize_bilinear: empty source");
    if (height == img.height() && width == img.width()) return img;

    struct Tap {
        int i0, i1;
        float w1;
    };
    auto taps = [](int dst, int src) {
        std::vector<Tap> t(dst);
        const double scale = static_cast<double>(src) / dst;
        for (int i = 0; i < dst; ++i) {
            double s = (i + 0.5) * scale - 0.5;
            s = std::clamp(s, 0.0, static_cast<double>(src - 1));
            const int i0 = static_cast<int>(std::floor(s));
            const int i1 = std::min(i0 + 1, src - 1);
            t[i] = {i0, i1, static_cast<float>(s - i0)};
        }
        return t;
    };
    const auto ty = taps(height, img.height());
    const auto tx = taps(width, img.width());
    const int ch = img.channels();
    ImageBuffer out(height, width, ch);
    for (int y = 0; y < height; ++y) {
        const Tap& a = ty[y];
        for (int x = 0; x < width; ++x) {
            const Tap& b = tx[x];
            for (int c = 0; c < ch; ++c) {
                const float top = img.at(a.i0, b.i0, c) * (1.0f - b.w1) + img.at(a.i0, b.i1, c) * b.w1;
                const float bot = img.at(a.i1, b.i0, c) * (1.0f - b.w1) + img.at(a.i1, b.i1, c) * b.w1;
                out.at(y, x, c) = top * (1.0f - a.w1) + bot * a.w1;
            }
        }
    }
    return out;
}

ImageBuffer rotate90(const ImageBuffer& img, int quarter_turns) {
    const int k = ((quarter_turns % 4) + 4) % 4;
    if (k == 0) return img;
    const int h = img.height(), w = img.width(), ch = img.channels();
    const bool swap = (k % 2) == 1;
    ImageBuffer out(swap ? w : h, swap ? h : w, ch);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            int ny = 0, nx = 0;
            switch (k) {
            case 1: ny = w - 1 - x; nx = y; break;
            case 2: ny = h - 1 - y; nx = w - 1 - x; break;
            case 3: ny = x; nx = h - 1 - y; break;
            }
            for (int c = 0; c < ch; ++c) out.at(ny, nx, c) = img.at(y, x, c);
        }
    }
    return out;
}

ImageBuffer crop(const ImageBuffer& img, int top, int left, int height, int width) {
    if (top < 0 || left < 0 || height < 1 || width < 1 || top + height > img.height() ||
        left + width > img.width()) {
        throw ArgumentError("crop: window outside image");
    }
    const int ch = img.channels();
    ImageBuffer out(height, width, ch);
    for (int y = 0; y < height; ++y) {
        const float* src = &img.samples()[(static_cast<std::size_t>(top + y) * img.width() + left) * ch];
        std::copy(src, src + static_cast<std::size_t>(width) * ch, &out.at(y, 0, 0));
    }
    return out;
}

ImageBuffer gaussian_blur(const ImageBuffer& img, float sigma) {
    if (sigma <= 0.0f) return img;
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0f * sigma)));
    std::vector<float> k(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = static_cast<float>(std::exp(-0.5 * (i * i) / (static_cast<double>(sigma) * sigma)));
        sum += k[i + radius];
    }
    for (float& v : k) v = static_cast<float>(v / sum);

    const int h = img.height(), w = img.width(), ch = img.channels();
    ImageBuffer tmp(h, w, ch), out(h, w, ch);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                float acc = 0.0f;
                for (int i = -radius; i <= radius; ++i) {
                    acc += k[i + radius] * img.at(y, std::clamp(x + i, 0, w - 1), c);
                }
                tmp.at(y, x, c) = acc;
            }
        }
    }
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            for (int c = 0; c < ch; ++c) {
                float acc = 0.0f;
                for (int i = -radius; i <= radius; ++i) {
                    acc += k[i + radius] * tmp.at(std::clamp(y + i, 0, h - 1), x, c);
                }
                out.at(y, x, c) = acc;
            }
        }
    }
    return out;
}

ImageBuffer hconcat(std::span<const ImageBuffer> images) {
    if (images.empty()) throw ArgumentError("hconcat: no images");
    const int h = images[0].height(), ch = images[0].channels();
    int w = 0;
    for (const auto& im : images) {
        if (im.height() != h || im.channels() != ch) throw ShapeError("hconcat: height/channel mismatch");
        w += im.width();
    }
    ImageBuffer out(h, w, ch);
    int x0 = 0;
    for (const auto& im : images) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < im.width(); ++x) {
                for (int c = 0; c < ch; ++c) out.at(y, x0 + x, c) = im.at(y, x, c);
            }
        }
        x0 += im.width();
    }
    return out;
}

} // namespace cdsr
