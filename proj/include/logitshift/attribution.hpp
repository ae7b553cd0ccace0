#ifndef LOGITSHIFT_ATTRIBUTION_HPP
#define LOGITSHIFT_ATTRIBUTION_HPP

#include "logitshift/network.hpp"
#include "logitshift/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace logitshift {

/// How Grad-CAM combines gradients g and activations A at the target layer.
///   gap:         sum_k alpha_k A_ijk with alpha_k the spatial mean of g_..k
///   elementwise: sum_k g_ijk A_ijk
enum class CamVariant { gap, elementwise };

std::string_view to_string(CamVariant variant);
CamVariant parse_cam_variant(std::string_view text);

enum class AttributionMethod { saliency, integrated_gradients };

std::string_view to_string(AttributionMethod method);

struct Heatmap
{
    /// max(pre_relu_grid, 0), rows x cols of the target layer.
    Tensor grid;
    Tensor pre_relu_grid;
    std::string target_layer;
    std::size_t class_index = 0;
    ScoreKind score_kind = ScoreKind::pre_softmax;
    CamVariant variant = CamVariant::gap;
};

struct AttributionMap
{
    /// Same shape as the input.
    Tensor values;
    AttributionMethod method = AttributionMethod::saliency;
    std::size_t class_index = 0;
    ScoreKind score_kind = ScoreKind::pre_softmax;
    /// Integrated gradients only.
    Tensor baseline;
    std::size_t steps = 0;
};

inline constexpr std::size_t kDefaultIgSteps = 32;

/// dS/dx at the input.
AttributionMap saliency(ModelRef model, const Tensor& input, ScoreSelector sel);

/// Grad-CAM combination of a spatial activation and its gradient, before the
/// final rectification. Returns a rows x cols grid.
Tensor cam_combine(const Tensor& activation, const Tensor& gradient, CamVariant variant);

Heatmap grad_cam(ModelRef model, const Tensor& input, std::size_t class_index, std::string_view target_layer,
                 ScoreKind kind, CamVariant variant);

/// Midpoint Riemann sum of the path integral from `baseline` to `input`:
/// IG_i = (x_i - x'_i) / m * sum_{s=1..m} dS/dx_i (x' + (s - 1/2)/m (x - x')).
AttributionMap integrated_gradients(ModelRef model, const Tensor& input, const Tensor& baseline,
                                    std::size_t class_index, std::size_t steps, ScoreKind kind);

/// Sums a rows x cols x channels tensor over channels.
Tensor channel_sum(const Tensor& t);

/// Bilinear resampling of a rank-2 grid with corner alignment. A 1x1 grid
/// produces a constant fill.
Tensor upsample(const Tensor& grid, std::size_t out_h, std::size_t out_w);
Tensor upsample(const Heatmap& heatmap, std::size_t out_h, std::size_t out_w);

struct NormalizedMap
{
    Tensor map;
    /// Set when max(map) <= 0; the map is then returned unchanged.
    bool zero_map = false;
};

/// Divides by the maximum when it is positive.
NormalizedMap normalize(const Tensor& m);

/// Similarity statistics between two rank-2 maps. Correlations are empty when
/// either map is constant.
struct ComparisonReport
{
    std::optional<double> pearson;
    std::optional<double> spearman;
    double max_abs_diff = 0.0;
    /// Chebyshev distance between the argmax cells.
    std::size_t argmax_distance = 0;
    /// sum over the region / sum over the map, 0 for an all-zero map.
    double mass_fraction_a = 0.0;
    double mass_fraction_b = 0.0;
};

ComparisonReport compare_heatmaps(const Tensor& a, const Tensor& b, Region region);

std::optional<double> pearson_correlation(std::span<const double> a, std::span<const double> b);
std::optional<double> spearman_correlation(std::span<const double> a, std::span<const double> b);
/// 1-based ranks, ties share their average rank.
std::vector<double> average_ranks(std::span<const double> values);
double mass_fraction(const Tensor& map, Region region);

} // namespace logitshift

#endif
