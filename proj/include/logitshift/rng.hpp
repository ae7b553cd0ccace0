#ifndef LOGITSHIFT_RNG_HPP
#define LOGITSHIFT_RNG_HPP

#include <cstddef>
#include <cstdint>
#include <random>
#include <vector>

namespace logitshift {

/// Seedable generator with a platform-independent output stream.
///
/// The engine is std::mt19937_64, whose sequence is fixed by the C++ standard.
/// The standard distributions are implementation-defined, so the conversions
/// to doubles are done here:
///   uniform()  = (next() >> 11) * 2^-53
///   normal()   = Box-Muller on two uniforms, cosine branch only
class Rng
{
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Standard normal.
    double normal();
    /// Uniform integer in [0, bound) by rejection.
    std::uint64_t below(std::uint64_t bound);

private:
    std::mt19937_64 engine_;
};

/// Mixes a parent seed and a stream index into an independent child seed
/// (SplitMix64 finalizer), so per-item substreams do not depend on order.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Fisher-Yates permutation of [0, n).
std::vector<std::size_t> permutation(std::size_t n, Rng& rng);

} // namespace logitshift

#endif
