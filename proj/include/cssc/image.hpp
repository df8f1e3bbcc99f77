#pragma once

#include <filesystem>

#include "cssc/tensor.hpp"

namespace cssc {

// Images are (height, width, 3) tensors with values in [0, 1].

// Reads an 8-bit PNG (any color type is converted to RGB) or binary PPM.
Tensor read_image(const std::filesystem::path& path);
// Writes 8-bit RGB PNG; values are clamped and rounded to 1/255 steps.
void write_png(const std::filesystem::path& path, const Tensor& image);
bool is_image_path(const std::filesystem::path& path);

Tensor resize_bilinear(const Tensor& image, std::size_t height, std::size_t width);
// Rounds every value to the nearest 1/255 step, as an 8-bit round trip would.
Tensor quantize8(Tensor image);

}  // namespace cssc
