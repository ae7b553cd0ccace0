#include "logitshift/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace logitshift {

std::string_view to_string(CamVariant variant)
{
    return variant == CamVariant::gap ? "gap" : "elementwise";
}

CamVariant parse_cam_variant(std::string_view text)
{
    if (text == "gap") return CamVariant::gap;
    if (text == "elementwise") return CamVariant::elementwise;
    throw std::invalid_argument("unknown Grad-CAM variant '" + std::string(text) + "' (expected gap or elementwise)");
}

std::string_view to_string(AttributionMethod method)
{
    return method == AttributionMethod::saliency ? "saliency" : "integrated_gradients";
}

AttributionMap saliency(ModelRef model, const Tensor& input, ScoreSelector sel)
{
    const ForwardTrace trace = forward(model, input);
    AttributionMap map;
    map.values = backward(model, trace, sel).input;
    map.method = AttributionMethod::saliency;
    map.class_index = sel.class_index;
    map.score_kind = sel.kind;
    return map;
}

Tensor cam_combine(const Tensor& activation, const Tensor& gradient, CamVariant variant)
{
    if (activation.rank() != 3 || activation.shape() != gradient.shape()) {
        throw std::invalid_argument("Grad-CAM needs matching spatial activation and gradient, got " +
                                    to_string(activation.shape()) + " and " + to_string(gradient.shape()));
    }
    const std::size_t rows = activation.dim(0), cols = activation.dim(1), ch = activation.dim(2);
    Tensor out({rows, cols});
    if (variant == CamVariant::gap) {
        std::vector<double> alpha(ch, 0.0);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                for (std::size_t k = 0; k < ch; ++k) alpha[k] += gradient.at(i, j, k);
            }
        }
        const double area = static_cast<double>(rows * cols);
        for (double& a : alpha) a /= area;
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < ch; ++k) acc += alpha[k] * activation.at(i, j, k);
                out.at(i, j) = acc;
            }
        }
    }
    else {
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < ch; ++k) acc += gradient.at(i, j, k) * activation.at(i, j, k);
                out.at(i, j) = acc;
            }
        }
    }
    return out;
}

Heatmap grad_cam(ModelRef model, const Tensor& input, std::size_t class_index, std::string_view target_layer,
                 ScoreKind kind, CamVariant variant)
{
    const Network& net = model.network();
    if (target_layer == kInputName || !net.is_spatial(target_layer)) {
        throw std::invalid_argument("Grad-CAM target '" + std::string(target_layer) + "' is not a spatial layer");
    }
    const ForwardTrace trace = forward(model, input);
    const GradientSet grads = backward(model, trace, {kind, class_index});

    Heatmap heatmap;
    heatmap.pre_relu_grid = cam_combine(trace.activation(target_layer), grads.activation(target_layer), variant);
    heatmap.grid = heatmap.pre_relu_grid;
    for (double& v : heatmap.grid.data()) v = std::max(v, 0.0);
    heatmap.target_layer = std::string(target_layer);
    heatmap.class_index = class_index;
    heatmap.score_kind = kind;
    heatmap.variant = variant;
    return heatmap;
}

AttributionMap integrated_gradients(ModelRef model, const Tensor& input, const Tensor& baseline,
                                    std::size_t class_index, std::size_t steps, ScoreKind kind)
{
    if (baseline.shape() != input.shape()) {
        throw std::invalid_argument("baseline shape " + to_string(baseline.shape()) + " does not match input " +
                                    to_string(input.shape()));
    }
    if (steps == 0) throw std::invalid_argument("integrated gradients needs at least one step");

    const Tensor delta = sub(input, baseline);
    Tensor total(input.shape());
    Tensor point(input.shape());
    for (std::size_t s = 1; s <= steps; ++s) {
        const double alpha = (static_cast<double>(s) - 0.5) / static_cast<double>(steps);
        for (std::size_t i = 0; i < point.size(); ++i) point[i] = baseline[i] + alpha * delta[i];
        const ForwardTrace trace = forward(model, point);
        const Tensor g = backward(model, trace, {kind, class_index}).input;
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += g[i];
    }
    for (std::size_t i = 0; i < total.size(); ++i) total[i] = delta[i] * total[i] / static_cast<double>(steps);

    AttributionMap map;
    map.values = std::move(total);
    map.method = AttributionMethod::integrated_gradients;
    map.class_index = class_index;
    map.score_kind = kind;
    map.baseline = baseline;
    map.steps = steps;
    return map;
}

Tensor channel_sum(const Tensor& t)
{
    if (t.rank() != 3) throw std::invalid_argument("channel_sum needs a rank-3 tensor, got " + to_string(t.shape()));
    return reduce_sum(t, {2});
}

Tensor upsample(const Tensor& grid, std::size_t out_h, std::size_t out_w)
{
    if (grid.rank() != 2) throw std::invalid_argument("upsample needs a rank-2 grid, got " + to_string(grid.shape()));
    const std::size_t in_h = grid.dim(0), in_w = grid.dim(1);
    if (out_h < in_h || out_w < in_w) {
        throw std::invalid_argument("upsample target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                                    " smaller than grid " + to_string(grid.shape()));
    }
    if (in_h == 1 && in_w == 1) return Tensor({out_h, out_w}, grid[0]);

    // Source coordinate of output index o along an axis of length n -> m.
    auto source = [](std::size_t o, std::size_t n, std::size_t m, std::size_t& lo, double& frac) {
        if (n == 1 || m == 1) {
            lo = 0;
            frac = 0.0;
            return;
        }
        const double pos = static_cast<double>(o) * static_cast<double>(n - 1) / static_cast<double>(m - 1);
        lo = std::min(static_cast<std::size_t>(std::floor(pos)), n - 1);
        frac = pos - static_cast<double>(lo);
        if (lo == n - 1) frac = 0.0;
    };

    Tensor out({out_h, out_w});
    for (std::size_t i = 0; i < out_h; ++i) {
        std::size_t r;
        double fr;
        source(i, in_h, out_h, r, fr);
        const std::size_t r2 = std::min(r + 1, in_h - 1);
        for (std::size_t j = 0; j < out_w; ++j) {
            std::size_t c;
            double fc;
            source(j, in_w, out_w, c, fc);
            const std::size_t c2 = std::min(c + 1, in_w - 1);
            const double top = (1.0 - fc) * grid.at(r, c) + fc * grid.at(r, c2);
            const double bottom = (1.0 - fc) * grid.at(r2, c) + fc * grid.at(r2, c2);
            out.at(i, j) = (1.0 - fr) * top + fr * bottom;
        }
    }
    return out;
}

Tensor upsample(const Heatmap& heatmap, std::size_t out_h, std::size_t out_w)
{
    return upsample(heatmap.grid, out_h, out_w);
}

NormalizedMap normalize(const Tensor& m)
{
    if (m.empty()) return {m, true};
    const double top = *std::max_element(m.data().begin(), m.data().end());
    if (!(top > 0.0)) return {m, true};
    return {scale(m, 1.0 / top), false};
}

std::optional<double> pearson_correlation(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) throw std::invalid_argument("correlation inputs differ in length");
    if (a.size() < 2) return std::nullopt;
    const double n = static_cast<double>(a.size());
    const double mean_a = std::accumulate(a.begin(), a.end(), 0.0) / n;
    const double mean_b = std::accumulate(b.begin(), b.end(), 0.0) / n;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - mean_a, db = b[i] - mean_b;
        saa += da * da;
        sbb += db * db;
        sab += da * db;
    }
    if (saa == 0.0 || sbb == 0.0) return std::nullopt;
    return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> values)
{
    std::vector<std::size_t> order(values.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return values[x] < values[y]; });
    std::vector<double> ranks(values.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
        const double rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

std::optional<double> spearman_correlation(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size()) throw std::invalid_argument("correlation inputs differ in length");
    const auto ra = average_ranks(a);
    const auto rb = average_ranks(b);
    return pearson_correlation(ra, rb);
}

double mass_fraction(const Tensor& map, Region region)
{
    double inside = 0.0, total = 0.0;
    for (std::size_t i = 0; i < map.dim(0); ++i) {
        for (std::size_t j = 0; j < map.dim(1); ++j) {
            total += map.at(i, j);
            if (region.contains(i, j)) inside += map.at(i, j);
        }
    }
    return total == 0.0 ? 0.0 : inside / total;
}

ComparisonReport compare_heatmaps(const Tensor& a, const Tensor& b, Region region)
{
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("heatmap shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    if (a.rank() != 2) throw std::invalid_argument("heatmaps must be rank-2, got " + to_string(a.shape()));

    ComparisonReport report;
    report.pearson = pearson_correlation(a.data(), b.data());
    report.spearman = spearman_correlation(a.data(), b.data());
    report.max_abs_diff = max_abs_diff(a, b);
    const std::size_t cols = a.dim(1);
    const std::size_t ia = argmax_flat(a), ib = argmax_flat(b);
    const auto dist = [](std::size_t x, std::size_t y) { return x > y ? x - y : y - x; };
    report.argmax_distance = std::max(dist(ia / cols, ib / cols), dist(ia % cols, ib % cols));
    report.mass_fraction_a = mass_fraction(a, region);
    report.mass_fraction_b = mass_fraction(b, region);
    return report;
}

} // namespace logitshift
