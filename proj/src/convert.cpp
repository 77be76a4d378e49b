#include "cdsr/convert.hpp"

#include "cdsr/errors.hpp"

namespace cdsr {

Tensor images_to_tensor(std::span<const ImageBuffer> images) {
    if (images.empty()) throw ArgumentError("images_to_tensor: empty batch");
    const ImageBuffer& first = images.front();
    const int N = static_cast<int>(images.size()), C = first.channels(), H = first.height(), W = first.width();
    Tensor t({N, C, H, W});
    for (int n = 0; n < N; ++n) {
        const ImageBuffer& im = images[n];
        if (!im.same_dims(first)) throw ShapeError("images_to_tensor: images differ in size");
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                for (int c = 0; c < C; ++c) t.at(n, c, y, x) = im.at(y, x, c);
    }
    return t;
}

Tensor image_to_tensor(const ImageBuffer& image) { return images_to_tensor(std::span(&image, 1)); }

ImageBuffer tensor_to_image(const Tensor& t, int index) {
    if (t.rank() != 4 || index < 0 || index >= t.dim(0)) {
        throw ShapeError("tensor_to_image: bad tensor " + shape_str(t.shape()) + " / index");
    }
    const int C = t.dim(1), H = t.dim(2), W = t.dim(3);
    ImageBuffer im(H, W, C);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            for (int c = 0; c < C; ++c) im.at(y, x, c) = t.at(index, c, y, x);
    return im;
}

} // namespace cdsr
