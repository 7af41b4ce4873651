#pragma once

#include <string>
#include <vector>

#include "kpdet/decoder.hpp"
#include "kpdet/keypoint.hpp"
#include "kpdet/tensor.hpp"

namespace kpdet::overlay {

/// 8-bit PNG (grayscale rows*cols or RGB rows*cols*3), zlib-compressed.
void write_png(const std::string& path, const std::vector<unsigned char>& pixels,
               std::size_t width, std::size_t height, std::size_t channels);

/// Renders the sample image with ground truth in green and predictions in
/// red, one PNG per image.
void write_overlay(const std::string& path, const Tensor& image,
                   const std::vector<Keypoint>& gts, const std::vector<dec::Detection>& dets);

} // namespace kpdet::overlay
