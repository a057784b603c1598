#pragma once

#include "icseg/pmcodec.hpp"
#include "icseg/tensor.hpp"

#include <string>

namespace icseg {

// 8-bit RGB PNG <-> [3,H,W] float, byte b <-> b/255*2-1 (values clipped to
// [-1,1] on write).
void write_image_png(const std::string& path, const Tensor<float>& image);
Tensor<float> read_image_png(const std::string& path);

// Binary masks: 8-bit grayscale, 0 background, 255 foreground.
void write_mask_png(const std::string& path, const MaskGrid& mask);
MaskGrid read_mask_png(const std::string& path);

// Multi-category masks: paletted indices 0..255, index = category id.
void write_label_png(const std::string& path, const LabelGrid& labels);
// Accepts paletted label files and grayscale binary masks (255 -> 1).
LabelGrid read_label_png(const std::string& path);

}  // namespace icseg
