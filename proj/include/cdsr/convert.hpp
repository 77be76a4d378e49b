#pragma once

#include "cdsr/image.hpp"
#include "cdsr/tensor.hpp"

#include <span>

namespace cdsr {

/// Stacks same-sized images into a [N, C, H, W] tensor.
Tensor images_to_tensor(std::span<const ImageBuffer> images);
Tensor image_to_tensor(const ImageBuffer& image);
/// Extracts batch item `index` of a [N, C, H, W] tensor (C must be 1 or 3).
ImageBuffer tensor_to_image(const Tensor& t, int index = 0);

} // namespace cdsr
