#ifndef LOGITSHIFT_NETWORK_HPP
#define LOGITSHIFT_NETWORK_HPP

#include "logitshift/tensor.hpp"

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace logitshift {

/// Cross-correlation over (row, column, channel) activations.
/// weights: out_channels x kernel_h x kernel_w x in_channels, bias: out_channels.
struct Conv2D
{
    Tensor weights;
    Tensor bias;
    std::size_t stride = 1;
    std::size_t padding = 0;
};

struct ReLU
{};

struct MaxPool
{
    std::size_t window_h = 2;
    std::size_t window_w = 2;
    std::size_t stride = 2;
};

struct Flatten
{};

/// weights: out x in, bias: out.
struct Dense
{
    Tensor weights;
    Tensor bias;
};

using LayerKind = std::variant<Conv2D, ReLU, MaxPool, Flatten, Dense>;

struct Layer
{
    std::string name;
    LayerKind kind;
};

std::string_view type_name(const LayerKind& kind);

/// Reserved activation name for the network input.
inline constexpr std::string_view kInputName = "input";

/// Inclusive-exclusive rectangle of spatial cells.
struct Region
{
    std::size_t row = 0;
    std::size_t col = 0;
    std::size_t rows = 1;
    std::size_t cols = 1;

    bool contains(std::size_t i, std::size_t j) const
    {
        return i >= row && i < row + rows && j >= col && j < col + cols;
    }
    friend bool operator==(const Region&, const Region&) = default;
};

/// Feed-forward classifier ending in a Dense layer that produces the logits.
/// Softmax is applied when scoring and is never stored as a layer.
class Network
{
public:
    Network(Shape input_shape, std::vector<Layer> layers);

    const Shape& input_shape() const { return input_shape_; }
    const std::vector<Layer>& layers() const { return layers_; }
    std::size_t class_count() const { return output_shapes_.back()[0]; }
    const Shape& output_shape(std::size_t layer) const { return output_shapes_.at(layer); }

    std::optional<std::size_t> find(std::string_view name) const;
    /// Like find() but throws std::invalid_argument for unknown names.
    std::size_t index_of(std::string_view name) const;
    /// Shape of a named activation; accepts kInputName.
    const Shape& activation_shape(std::string_view name) const;
    /// True for rank-3 (row, column, channel) activations.
    bool is_spatial(std::string_view name) const;
    /// Index of the last layer with a spatial output, if any.
    std::optional<std::size_t> last_spatial_layer() const;
    /// Index of the last MaxPool layer, if any.
    std::optional<std::size_t> last_pool_layer() const;

    std::size_t parameter_count() const;

    /// f(layer_index, const Tensor& weights, const Tensor& bias) for Conv2D and Dense layers.
    template <class F>
    void visit_parameters(F&& f) const
    {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (const auto* conv = std::get_if<Conv2D>(&layers_[i].kind)) {
                f(i, conv->weights, conv->bias);
            }
            else if (const auto* dense = std::get_if<Dense>(&layers_[i].kind)) {
                f(i, dense->weights, dense->bias);
            }
        }
    }

    /// f(layer_index, std::span<double> weights, std::span<double> bias). Values
    /// may change; shapes cannot.
    template <class F>
    void update_parameters(F&& f)
    {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (auto* conv = std::get_if<Conv2D>(&layers_[i].kind)) {
                f(i, conv->weights.data(), conv->bias.data());
            }
            else if (auto* dense = std::get_if<Dense>(&layers_[i].kind)) {
                f(i, dense->weights.data(), dense->bias.data());
            }
        }
    }

private:
    Shape input_shape_;
    std::vector<Layer> layers_;
    std::vector<Shape> output_shapes_;
};

/// Parameter-free branch adding t = gain * sum_k A[row, col, k], read from the
/// tap layer's output, to the logits. With `only_class` unset the same t is
/// added to every logit; setting it shifts one logit only, which breaks the
/// softmax invariance and is used as a negative control.
struct LogitShift
{
    std::string tap_layer;
    std::size_t row = 0;
    std::size_t col = 0;
    double gain = 10.0;
    std::optional<std::size_t> only_class;
};

/// Non-owning view of a network, optionally with a logit-shift branch.
class ModelRef
{
public:
    ModelRef(const Network& net) : net_(&net) {}
    ModelRef(const Network& net, const LogitShift* shift) : net_(&net), shift_(shift) {}

    const Network& network() const { return *net_; }
    const LogitShift* shift() const { return shift_; }

private:
    const Network* net_;
    const LogitShift* shift_ = nullptr;
};

struct LayerRecord
{
    std::string name;
    Tensor output;
    /// MaxPool only: flat input index selected for each output element.
    std::vector<std::size_t> argmax;
};

struct ForwardTrace
{
    Tensor input;
    std::vector<LayerRecord> layers;
    /// Pre-softmax output z, including the shift branch when present.
    Tensor logits;
    /// Post-softmax output y.
    Tensor probabilities;
    /// Value of the shift branch t (0 without one).
    double shift = 0.0;

    /// Activation by layer name; accepts kInputName.
    const Tensor& activation(std::string_view name) const;
};

enum class ScoreKind { pre_softmax, post_softmax };

std::string_view to_string(ScoreKind kind);
ScoreKind parse_score_kind(std::string_view text);

struct ScoreSelector
{
    ScoreKind kind = ScoreKind::pre_softmax;
    std::size_t class_index = 0;
};

struct ParameterGradient
{
    Tensor weights;
    Tensor bias;
};

struct GradientSet
{
    Tensor input;
    std::vector<std::string> names;
    /// dS/dA for each layer output, aligned with Network::layers().
    std::vector<Tensor> activations;
    /// dS/dtheta for Conv2D and Dense layers; empty for the rest.
    std::vector<std::optional<ParameterGradient>> parameters;
    /// dS/dz.
    Tensor logits;

    const Tensor& activation(std::string_view name) const;
};

/// y_c = exp(z_c) / sum_i exp(z_i), evaluated after subtracting max(z). That
/// subtraction is itself a class-independent shift of the logits.
Tensor softmax(const Tensor& z);

ForwardTrace forward(ModelRef model, const Tensor& input);

double score(const ForwardTrace& trace, ScoreSelector sel);

/// dS/dz for the selected score: a one-hot row for pre-softmax scores and the
/// softmax Jacobian row y_c (delta_ci - y_i) for post-softmax scores.
Tensor score_logit_gradient(const ForwardTrace& trace, ScoreSelector sel);

/// Reverse-mode gradients of the selected score.
GradientSet backward(ModelRef model, const ForwardTrace& trace, ScoreSelector sel);

/// Reverse pass seeded with an arbitrary dS/dz.
GradientSet backward_from_logits(ModelRef model, const ForwardTrace& trace, const Tensor& logit_grad);

/// Cross-entropy -log y_label.
double cross_entropy(const ForwardTrace& trace, std::size_t label);

struct LossGradient
{
    double loss = 0.0;
    GradientSet gradients;
};

LossGradient loss_gradient(ModelRef model, const Tensor& input, std::size_t label);

/// Logits obtained by replacing the output of `layer` (or the input when
/// layer is kInputName) with `activation` and re-running everything downstream,
/// including the shift branch when it reads from a recomputed layer.
Tensor logits_from(ModelRef model, const ForwardTrace& trace, std::string_view layer, const Tensor& activation);

/// Central-difference estimate of dS/dA for the target layer's activation.
Tensor finite_diff_gradient(ModelRef model, const Tensor& input, ScoreSelector sel, std::string_view target_layer,
                            double h);

/// Smallest distance to a non-differentiable point when `from_layer`'s output
/// is perturbed: min over downstream ReLU inputs of |x| and over downstream
/// pooling windows of the gap between the two largest entries. Windows of
/// clamped zeros from a recomputed ReLU are not kinks.
double kink_margin(ModelRef model, const ForwardTrace& trace, std::string_view from_layer = kInputName);

std::size_t predict(ModelRef model, const Tensor& input);

struct LabeledSample
{
    Tensor input;
    std::size_t label = 0;
};

/// Mean cross-entropy over a batch and its parameter gradients, aligned with
/// Network::layers().
struct BatchGradient
{
    double loss = 0.0;
    std::vector<double> sample_losses;
    std::vector<std::optional<ParameterGradient>> parameters;
};

BatchGradient batch_gradient(ModelRef model, std::span<const LabeledSample> batch);

/// Cells of `to_layer` (or the input) that influence `cell` of `from_layer`
/// through the spatial layers in between.
Region receptive_field(const Network& net, std::string_view from_layer, Region cell, std::string_view to_layer);

} // namespace logitshift

#endif
