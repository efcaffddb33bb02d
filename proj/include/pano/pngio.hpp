#pragma once

#include <string>

#include "pano/projection.hpp"
#include "pano/tensor.hpp"

namespace pano {

// 8-bit RGB; values clamped to [0,1] and rounded on write.
void write_rgb_png(const std::string& path, const Tensor& pixels);  // [3,H,W]
Tensor read_rgb_png(const std::string& path);

// Single-channel 8-bit class ids.
void write_gray_png(const std::string& path, const LabelMap& labels);
LabelMap read_gray_png(const std::string& path);

// Normalizes arbitrary real values to [0,1] before writing (for attention
// map dumps).
void write_heatmap_png(const std::string& path, const Tensor& values);  // [R,C]

}  // namespace pano
