#include "logitshift/rng.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace logitshift;

TEST(Rng, EngineMatchesStandardSequence)
{
    // The standard fixes the 10000th output of a default-seeded mt19937_64.
    Rng rng(5489u);
    std::uint64_t v = 0;
    for (int i = 0; i < 10000; ++i) v = rng.next();
    EXPECT_EQ(v, 9981545732273789042ULL);
}

TEST(Rng, UniformUsesTop53Bits)
{
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        const double u = a.uniform();
        EXPECT_EQ(u, static_cast<double>(b.next() >> 11) * 0x1.0p-53);
        EXPECT_GE(u, 0.0);
        EXPECT_LT(u, 1.0);
    }
}

TEST(Rng, SameSeedSameStream)
{
    Rng a(0), b(0), c(1);
    bool differs = false;
    for (int i = 0; i < 20; ++i) {
        const double x = a.normal();
        EXPECT_EQ(x, b.normal());
        differs |= x != c.normal();
    }
    EXPECT_TRUE(differs);
}

TEST(Rng, NormalMoments)
{
    Rng rng(3);
    const int n = 200000;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
        const double x = rng.normal();
        sum += x;
        sq += x * x;
    }
    EXPECT_NEAR(sum / n, 0.0, 0.01);
    EXPECT_NEAR(sq / n, 1.0, 0.02);
}

TEST(Rng, BelowStaysInRange)
{
    Rng rng(9);
    std::vector<int> counts(7, 0);
    for (int i = 0; i < 70000; ++i) ++counts[rng.below(7)];
    for (int c : counts) EXPECT_NEAR(c, 10000, 500);
    EXPECT_EQ(rng.below(1), 0u);
}

TEST(Rng, DeriveSeedSeparatesStreams)
{
    EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
    EXPECT_NE(derive_seed(7, 3), derive_seed(7, 4));
    EXPECT_NE(derive_seed(7, 3), derive_seed(8, 3));
    EXPECT_NE(derive_seed(0, 0), 0u);
}

TEST(Rng, PermutationIsAPermutation)
{
    Rng rng(5);
    for (std::size_t n : {0u, 1u, 2u, 17u, 500u}) {
        auto p = permutation(n, rng);
        ASSERT_EQ(p.size(), n);
        std::sort(p.begin(), p.end());
        for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(p[i], i);
    }
    Rng a(1), b(1);
    EXPECT_EQ(permutation(50, a), permutation(50, b));
}

// Pinned vectors, also listed in docs/formats.md.
TEST(Rng, PublishedVectors)
{
    // SplitMix64 from state 0: first output of the reference generator.
    EXPECT_EQ(derive_seed(0, 0), 16294208416658607535ULL);
    EXPECT_EQ(derive_seed(7, 0x7e57), 3803630407523335653ULL);
    EXPECT_EQ(Rng(7).next(), 13915952638675311015ULL);
    EXPECT_EQ(Rng(7).uniform(), 0.75438530415285798);
    EXPECT_EQ(Rng(7).normal(), 1.5913998756469563);
}
