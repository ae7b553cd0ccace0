#ifndef LOGITSHIFT_RENDER_HPP
#define LOGITSHIFT_RENDER_HPP

#include "logitshift/image_io.hpp"
#include "logitshift/tensor.hpp"

#include <cstddef>
#include <vector>

namespace logitshift {

/// Normalizes a layer-resolution grid by its maximum, then resamples it
/// bilinearly to out_h x out_w. An all-zero grid stays flat at zero.
Tensor render_heat(const Tensor& grid, std::size_t out_h, std::size_t out_w);

/// Each pixel repeated `factor` times along both axes.
Tensor upscale_nearest(const Tensor& grid, std::size_t factor);

/// Red-tinted overlay: R = 0.5 gray + 0.5 heat, G = B = 0.5 gray, with both
/// inputs rank-2 in [0, 1].
Image overlay(const Tensor& gray, const Tensor& heat);

/// Tiles equally sized colour images row by row with a black gutter.
Image tile(const std::vector<std::vector<Image>>& cells, std::size_t gutter = 2);

} // namespace logitshift

#endif
