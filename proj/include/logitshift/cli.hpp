#ifndef LOGITSHIFT_CLI_HPP
#define LOGITSHIFT_CLI_HPP

#include "logitshift/network.hpp"
#include "logitshift/report.hpp"
#include "logitshift/surgery.hpp"
#include "logitshift/trainer.hpp"

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace logitshift::cli {

inline constexpr int kExitPass = 0;
inline constexpr int kExitFailed = 1;
inline constexpr int kExitUsage = 2;

/// Bad flags or unusable inputs; reported with exit code 2.
struct UsageError : std::runtime_error
{
    using std::runtime_error::runtime_error;
};

/// `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

inline constexpr std::size_t kDemoTrainCount = 500;
inline constexpr std::size_t kDemoTestCount = 100;
inline constexpr std::size_t kDemoImageSize = 32;
inline constexpr double kCorruptionThreshold = 0.95;
inline constexpr double kLocalizationThreshold = 0.80;
inline constexpr double kDivergenceSpearman = 0.5;
inline constexpr double kTapMassThreshold = 0.5;

/// Held-out images for a run seeded with `seed`; disjoint substreams from
/// the training set.
SyntheticDataset reference_test_set(std::uint64_t seed, std::size_t count = kDemoTestCount,
                                    std::size_t image_size = kDemoImageSize);

/// Fraction of inputs whose elementwise pre-softmax heatmap on the attacked
/// model peaks at the tap cell. Heatmaps are taken at the tap layer for the
/// given classes.
double corruption_rate(const AttackedNetwork& atk, std::span<const Tensor> inputs,
                       std::span<const std::size_t> classes);

/// Fraction of images whose post-softmax elementwise heatmap (label class,
/// `layer`) peaks inside the labelled quadrant.
double localization_rate(ModelRef model, const SyntheticDataset& data, std::string_view layer);

/// Quadrant (blob label convention) containing cell (row, col) of a grid.
std::size_t grid_quadrant(std::size_t row, std::size_t col, std::size_t rows, std::size_t cols);

struct VerifyOptions
{
    Tolerances tolerances;
    std::size_t attribution_probes = 20;
    std::size_t ig_steps = kDefaultIgSteps;
};

struct VerifyOutcome
{
    EquivalenceReport equivalence;
    double gradcam_gap_deviation = 0.0;
    double gradcam_elementwise_deviation = 0.0;
    double ig_deviation = 0.0;
    /// Contrast only, not a criterion.
    double presoftmax_gradient_deviation = 0.0;
    std::vector<Criterion> criteria;
};

/// Output, post-softmax gradient, training gradient and attribution checks.
VerifyOutcome verify_models(ModelRef orig, ModelRef atk, std::span<const Tensor> probes,
                            std::span<const LabeledSample> batch, const VerifyOptions& opts = {});

} // namespace logitshift::cli

#endif
