#include "logitshift/image_io.hpp"

#include "logitshift/file_util.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace logitshift {

namespace {

class HeaderReader
{
public:
    explicit HeaderReader(std::string_view bytes) : bytes_(bytes) {}

    void skip_space_and_comments()
    {
        while (pos_ < bytes_.size()) {
            const char c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
            }
            else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            }
            else {
                break;
            }
        }
    }

    unsigned long number()
    {
        skip_space_and_comments();
        if (pos_ >= bytes_.size() || !std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
            throw std::runtime_error("malformed netpbm data: expected a number at byte " + std::to_string(pos_));
        }
        unsigned long value = 0;
        while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
            value = value * 10 + static_cast<unsigned long>(bytes_[pos_] - '0');
            if (value > 0xFFFFFFFFUL) throw std::runtime_error("malformed netpbm data: number too large");
            ++pos_;
        }
        return value;
    }

    /// Exactly one whitespace byte separates the header from binary data.
    void single_whitespace()
    {
        if (pos_ >= bytes_.size() || !std::isspace(static_cast<unsigned char>(bytes_[pos_]))) {
            throw std::runtime_error("malformed netpbm data: missing whitespace before raster");
        }
        ++pos_;
    }

    std::size_t pos() const { return pos_; }
    void advance(std::size_t n) { pos_ += n; }

private:
    std::string_view bytes_;
    std::size_t pos_ = 0;
};

std::uint16_t to_sample(double v, std::uint16_t maxval)
{
    const double clamped = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
    return static_cast<std::uint16_t>(std::lround(clamped * maxval));
}

} // namespace

Image parse_netpbm(std::string_view bytes)
{
    if (bytes.size() < 2 || bytes[0] != 'P') throw std::runtime_error("not a netpbm file");
    const char kind = bytes[1];
    if (kind != '2' && kind != '3' && kind != '5' && kind != '6') {
        throw std::runtime_error(std::string("unsupported netpbm type P") + kind);
    }
    HeaderReader reader(bytes);
    reader.advance(2);

    Image image;
    image.channels = (kind == '3' || kind == '6') ? 3 : 1;
    image.width = reader.number();
    image.height = reader.number();
    const unsigned long maxval = reader.number();
    if (image.width == 0 || image.height == 0) throw std::runtime_error("netpbm image has zero size");
    if (maxval == 0 || maxval > 65535) throw std::runtime_error("netpbm maxval out of range");
    image.maxval = static_cast<std::uint16_t>(maxval);

    const std::size_t count = image.width * image.height * image.channels;
    image.samples.resize(count);
    if (kind == '2' || kind == '3') {
        for (auto& s : image.samples) {
            const unsigned long v = reader.number();
            if (v > maxval) throw std::runtime_error("netpbm sample exceeds maxval");
            s = static_cast<std::uint16_t>(v);
        }
        return image;
    }

    reader.single_whitespace();
    const std::size_t width = maxval > 255 ? 2 : 1;
    if (bytes.size() - reader.pos() < count * width) throw std::runtime_error("netpbm raster truncated");
    const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data() + reader.pos());
    for (std::size_t i = 0; i < count; ++i) {
        const unsigned v = width == 2 ? (unsigned{raw[2 * i]} << 8) | raw[2 * i + 1] : raw[i];
        if (v > maxval) throw std::runtime_error("netpbm sample exceeds maxval");
        image.samples[i] = static_cast<std::uint16_t>(v);
    }
    return image;
}

Image read_netpbm(const std::filesystem::path& path)
{
    return parse_netpbm(read_file(path));
}

std::string encode_netpbm(const Image& image, PnmEncoding encoding)
{
    if (image.channels != 1 && image.channels != 3) throw std::invalid_argument("netpbm images have 1 or 3 channels");
    if (image.samples.size() != image.width * image.height * image.channels) {
        throw std::invalid_argument("image sample count does not match its dimensions");
    }
    if (image.maxval == 0) throw std::invalid_argument("netpbm maxval must be positive");
    const bool gray = image.channels == 1;
    std::ostringstream out;
    out << 'P' << (encoding == PnmEncoding::ascii ? (gray ? '2' : '3') : (gray ? '5' : '6')) << '\n'
        << image.width << ' ' << image.height << '\n'
        << image.maxval << '\n';
    if (encoding == PnmEncoding::ascii) {
        const std::size_t per_row = image.width * image.channels;
        for (std::size_t i = 0; i < image.samples.size(); ++i) {
            out << image.samples[i] << ((i + 1) % per_row == 0 ? '\n' : ' ');
        }
        return out.str();
    }
    std::string data = out.str();
    const bool wide = image.maxval > 255;
    for (auto s : image.samples) {
        if (wide) data.push_back(static_cast<char>(s >> 8));
        data.push_back(static_cast<char>(s & 0xFF));
    }
    return data;
}

void write_netpbm(const std::filesystem::path& path, const Image& image, PnmEncoding encoding)
{
    write_file_atomic(path, encode_netpbm(image, encoding));
}

Tensor to_grayscale_tensor(const Image& image)
{
    Tensor out({image.height, image.width, 1});
    const double scale = 1.0 / image.maxval;
    for (std::size_t p = 0; p < image.width * image.height; ++p) {
        if (image.channels == 1) {
            out[p] = image.samples[p] * scale;
        }
        else {
            const auto* rgb = &image.samples[3 * p];
            out[p] = (0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]) * scale;
        }
    }
    return out;
}

Image gray_image(const Tensor& values, std::uint16_t maxval)
{
    if (values.rank() != 2 && !(values.rank() == 3 && values.dim(2) == 1)) {
        throw std::invalid_argument("gray image needs a rank-2 grid, got " + to_string(values.shape()));
    }
    Image image;
    image.height = values.dim(0);
    image.width = values.dim(1);
    image.channels = 1;
    image.maxval = maxval;
    image.samples.reserve(values.size());
    for (double v : values.data()) image.samples.push_back(to_sample(v, maxval));
    return image;
}

Image rgb_image(const Tensor& red, const Tensor& green, const Tensor& blue, std::uint16_t maxval)
{
    if (red.rank() != 2 || red.shape() != green.shape() || red.shape() != blue.shape()) {
        throw std::invalid_argument("rgb planes must be rank-2 with equal shapes");
    }
    Image image;
    image.height = red.dim(0);
    image.width = red.dim(1);
    image.channels = 3;
    image.maxval = maxval;
    image.samples.reserve(3 * red.size());
    for (std::size_t i = 0; i < red.size(); ++i) {
        image.samples.push_back(to_sample(red[i], maxval));
        image.samples.push_back(to_sample(green[i], maxval));
        image.samples.push_back(to_sample(blue[i], maxval));
    }
    return image;
}

} // namespace logitshift
