#ifndef LOGITSHIFT_TEST_HELPERS_HPP
#define LOGITSHIFT_TEST_HELPERS_HPP

#include "logitshift/network.hpp"
#include "logitshift/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace testing_util {

using namespace logitshift;

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0)
{
    Tensor t(shape);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

/// 6x6x2 input, conv(3, 3x3, pad 1), relu, 2x2 pool, flatten, dense(3).
inline Network tiny_cnn(std::uint64_t seed, std::size_t classes = 3)
{
    Rng rng(seed);
    std::vector<Layer> layers;
    layers.push_back({"conv", Conv2D{random_tensor({3, 3, 3, 2}, rng, -0.5, 0.5), random_tensor({3}, rng, -0.1, 0.1), 1, 1}});
    layers.push_back({"relu", ReLU{}});
    layers.push_back({"pool", MaxPool{}});
    layers.push_back({"flat", Flatten{}});
    layers.push_back({"fc", Dense{random_tensor({classes, 27}, rng, -0.5, 0.5), random_tensor({classes}, rng, -0.1, 0.1)}});
    return Network({6, 6, 2}, std::move(layers));
}

/// z = W x + b on a rank-1 input.
inline Network dense_only(const Tensor& w, const Tensor& b)
{
    return Network({w.dim(1)}, {Layer{"fc", Dense{w, b}}});
}

inline Tensor positive_input(const Shape& shape, std::uint64_t seed)
{
    Rng rng(seed);
    return random_tensor(shape, rng, 0.0, 1.0);
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name)
{
    const auto dir = std::filesystem::temp_directory_path() / ("logitshift_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

} // namespace testing_util

#endif
