#include "logitshift/render.hpp"

#include "logitshift/attribution.hpp"

#include <stdexcept>

namespace logitshift {

Tensor render_heat(const Tensor& grid, std::size_t out_h, std::size_t out_w)
{
    return upsample(normalize(grid).map, out_h, out_w);
}

Tensor upscale_nearest(const Tensor& grid, std::size_t factor)
{
    if (grid.rank() != 2 || factor == 0) throw std::invalid_argument("upscale needs a rank-2 grid and a positive factor");
    Tensor out({grid.dim(0) * factor, grid.dim(1) * factor});
    for (std::size_t i = 0; i < out.dim(0); ++i) {
        for (std::size_t j = 0; j < out.dim(1); ++j) out.at(i, j) = grid.at(i / factor, j / factor);
    }
    return out;
}

Image overlay(const Tensor& gray, const Tensor& heat)
{
    if (gray.shape() != heat.shape() || gray.rank() != 2) {
        throw std::invalid_argument("overlay planes must be rank-2 with equal shapes");
    }
    const Tensor half_gray = scale(gray, 0.5);
    return rgb_image(add(half_gray, scale(heat, 0.5)), half_gray, half_gray);
}

Image tile(const std::vector<std::vector<Image>>& cells, std::size_t gutter)
{
    if (cells.empty() || cells.front().empty()) throw std::invalid_argument("no panel cells");
    const Image& first = cells.front().front();
    const std::size_t rows = cells.size(), cols = cells.front().size();
    Image out;
    out.channels = 3;
    out.maxval = first.maxval;
    out.width = cols * first.width + (cols - 1) * gutter;
    out.height = rows * first.height + (rows - 1) * gutter;
    out.samples.assign(out.width * out.height * 3, 0);
    for (std::size_t r = 0; r < rows; ++r) {
        if (cells[r].size() != cols) throw std::invalid_argument("ragged panel layout");
        for (std::size_t c = 0; c < cols; ++c) {
            const Image& cell = cells[r][c];
            if (cell.width != first.width || cell.height != first.height || cell.channels != 3 ||
                cell.maxval != first.maxval) {
                throw std::invalid_argument("panel cells must be equally sized colour images");
            }
            const std::size_t y0 = r * (first.height + gutter), x0 = c * (first.width + gutter);
            for (std::size_t y = 0; y < cell.height; ++y) {
                for (std::size_t x = 0; x < cell.width; ++x) {
                    for (std::size_t k = 0; k < 3; ++k) {
                        out.samples[((y0 + y) * out.width + x0 + x) * 3 + k] = cell.samples[(y * cell.width + x) * 3 + k];
                    }
                }
            }
        }
    }
    return out;
}

} // namespace logitshift
