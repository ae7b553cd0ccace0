#ifndef LOGITSHIFT_IMAGE_IO_HPP
#define LOGITSHIFT_IMAGE_IO_HPP

#include "logitshift/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace logitshift {

/// Netpbm raster. Samples are row-major and interleaved for colour images.
struct Image
{
    std::size_t width = 0;
    std::size_t height = 0;
    /// 1 (PGM) or 3 (PPM).
    std::size_t channels = 1;
    /// 1..65535.
    std::uint16_t maxval = 255;
    std::vector<std::uint16_t> samples;

    friend bool operator==(const Image&, const Image&) = default;
};

enum class PnmEncoding { ascii, binary };

/// Parses P2, P3, P5 and P6 data; '#' comments are allowed in the header.
Image parse_netpbm(std::string_view bytes);
Image read_netpbm(const std::filesystem::path& path);

std::string encode_netpbm(const Image& image, PnmEncoding encoding = PnmEncoding::binary);
void write_netpbm(const std::filesystem::path& path, const Image& image, PnmEncoding encoding = PnmEncoding::binary);

/// rows x cols x 1 tensor scaled to [0, 1]; colour images are converted with
/// luma weights 0.299, 0.587, 0.114.
Tensor to_grayscale_tensor(const Image& image);

/// Grey image from a rank-2 grid (or rows x cols x 1 tensor) of values in
/// [0, 1]; values outside are clamped.
Image gray_image(const Tensor& values, std::uint16_t maxval = 255);

/// Colour image from three rank-2 planes in [0, 1].
Image rgb_image(const Tensor& red, const Tensor& green, const Tensor& blue, std::uint16_t maxval = 255);

} // namespace logitshift

#endif
