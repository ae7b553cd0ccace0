#include "logitshift/surgery.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace logitshift {

namespace {

LogitShift make_branch(const Network& net, const AttackConfig& cfg, std::optional<std::size_t> control_class)
{
    const auto idx = net.find(cfg.tap_layer);
    if (!idx) throw std::invalid_argument("tap layer '" + cfg.tap_layer + "' not found");
    const Shape& s = net.output_shape(*idx);
    if (s.size() != 3) {
        throw std::invalid_argument("tap layer '" + cfg.tap_layer + "' is not spatial (output " + to_string(s) + ")");
    }
    if (cfg.row >= s[0] || cfg.col >= s[1]) {
        throw std::out_of_range("tap (" + std::to_string(cfg.row) + "," + std::to_string(cfg.col) +
                                ") outside layer '" + cfg.tap_layer + "' spatial extent " + std::to_string(s[0]) + "x" +
                                std::to_string(s[1]));
    }
    if (!std::isfinite(cfg.gain)) throw std::invalid_argument("attack gain must be finite");
    if (control_class && *control_class >= net.class_count()) {
        throw std::out_of_range("control class " + std::to_string(*control_class) + " out of range");
    }
    return LogitShift{cfg.tap_layer, cfg.row, cfg.col, cfg.gain, control_class};
}

} // namespace

AttackConfig default_attack(const Network& net)
{
    auto idx = net.last_pool_layer();
    if (!idx) idx = net.last_spatial_layer();
    if (!idx) throw std::invalid_argument("network has no spatial layer to tap");
    return AttackConfig{net.layers()[*idx].name, 0, 0, kDefaultGain};
}

AttackedNetwork::AttackedNetwork(std::shared_ptr<const Network> base, AttackConfig config,
                                 std::optional<std::size_t> control_class)
    : base_(std::move(base)), config_(std::move(config))
{
    if (!base_) throw std::invalid_argument("attacked network needs a base network");
    branch_ = make_branch(*base_, config_, control_class);
}

double shift_term(const ForwardTrace& trace, const AttackConfig& cfg)
{
    const Tensor& tap = trace.activation(cfg.tap_layer);
    if (tap.rank() != 3) throw std::invalid_argument("tap layer '" + cfg.tap_layer + "' is not spatial");
    if (cfg.row >= tap.dim(0) || cfg.col >= tap.dim(1)) {
        throw std::out_of_range("tap (" + std::to_string(cfg.row) + "," + std::to_string(cfg.col) +
                                ") outside layer '" + cfg.tap_layer + "' spatial extent " +
                                std::to_string(tap.dim(0)) + "x" + std::to_string(tap.dim(1)));
    }
    double sum = 0.0;
    for (std::size_t k = 0; k < tap.dim(2); ++k) sum += tap.at(cfg.row, cfg.col, k);
    return cfg.gain * sum;
}

AttackedNetwork apply_logit_shift(std::shared_ptr<const Network> net, AttackConfig cfg)
{
    return AttackedNetwork(std::move(net), std::move(cfg));
}

AttackedNetwork apply_single_class_shift(std::shared_ptr<const Network> net, AttackConfig cfg, std::size_t cls)
{
    return AttackedNetwork(std::move(net), std::move(cfg), cls);
}

Region tap_region(const Network& net, const AttackConfig& cfg, std::string_view target_layer)
{
    const Region cell{cfg.row, cfg.col, 1, 1};
    if (target_layer == cfg.tap_layer) return cell;
    return receptive_field(net, cfg.tap_layer, cell, target_layer);
}

EquivalenceReport verify_output_equivalence(ModelRef orig, ModelRef atk, std::span<const Tensor> probes, double tol)
{
    if (probes.empty()) throw std::invalid_argument("no probe inputs");
    EquivalenceReport report;
    report.probe_count = probes.size();
    report.tolerances.output = tol;
    std::size_t agree = 0;
    for (const auto& x : probes) {
        const ForwardTrace a = forward(orig, x);
        const ForwardTrace b = forward(atk, x);
        report.max_output_deviation = std::max(report.max_output_deviation, max_abs_diff(a.probabilities, b.probabilities));
        if (argmax_flat(a.probabilities) == argmax_flat(b.probabilities)) ++agree;
    }
    report.prediction_agreement = static_cast<double>(agree) / static_cast<double>(probes.size());
    report.outputs_pass = report.max_output_deviation <= tol && agree == probes.size();
    return report;
}

double max_activation_gradient_deviation(ModelRef orig, ModelRef atk, std::span<const Tensor> probes, ScoreKind kind)
{
    double worst = 0.0;
    const std::size_t n = orig.network().class_count();
    for (const auto& x : probes) {
        const ForwardTrace ta = forward(orig, x);
        const ForwardTrace tb = forward(atk, x);
        for (std::size_t c = 0; c < n; ++c) {
            const GradientSet ga = backward(orig, ta, {kind, c});
            const GradientSet gb = backward(atk, tb, {kind, c});
            worst = std::max(worst, max_abs_diff(ga.input, gb.input));
            for (std::size_t l = 0; l < ga.activations.size(); ++l) {
                worst = std::max(worst, max_abs_diff(ga.activations[l], gb.activations[l]));
            }
        }
    }
    return worst;
}

DeviationCheck verify_postsoftmax_gradient_equality(ModelRef orig, ModelRef atk, std::span<const Tensor> probes,
                                                    double tol)
{
    if (probes.empty()) throw std::invalid_argument("no probe inputs");
    const double dev = max_activation_gradient_deviation(orig, atk, probes, ScoreKind::post_softmax);
    return {dev, tol, dev <= tol};
}

Tensor presoftmax_gradient_delta(ModelRef orig, ModelRef atk, const Tensor& input, std::string_view target_layer,
                                 std::size_t class_index)
{
    const ScoreSelector sel{ScoreKind::pre_softmax, class_index};
    const GradientSet ga = backward(orig, forward(orig, input), sel);
    const GradientSet gb = backward(atk, forward(atk, input), sel);
    return sub(gb.activation(target_layer), ga.activation(target_layer));
}

double max_parameter_gradient_deviation(std::span<const std::optional<ParameterGradient>> a,
                                        std::span<const std::optional<ParameterGradient>> b)
{
    if (a.size() != b.size()) throw std::invalid_argument("parameter gradient sets differ in length");
    double worst = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l) {
        if (a[l].has_value() != b[l].has_value()) throw std::invalid_argument("parameter gradient sets differ in layout");
        if (!a[l]) continue;
        worst = std::max(worst, max_abs_diff(a[l]->weights, b[l]->weights));
        worst = std::max(worst, max_abs_diff(a[l]->bias, b[l]->bias));
    }
    return worst;
}

DeviationCheck verify_training_gradient_equality(ModelRef orig, ModelRef atk, std::span<const LabeledSample> batch,
                                                 double tol)
{
    if (batch.empty()) throw std::invalid_argument("empty training batch");
    const std::size_t n = orig.network().class_count();
    double worst = 0.0;
    for (const auto& sample : batch) {
        if (sample.label >= n) throw std::out_of_range("label " + std::to_string(sample.label) + " out of range");
        const LossGradient a = loss_gradient(orig, sample.input, sample.label);
        const LossGradient b = loss_gradient(atk, sample.input, sample.label);
        worst = std::max(worst, max_parameter_gradient_deviation(a.gradients.parameters, b.gradients.parameters));
    }
    return {worst, tol, worst <= tol};
}

EquivalenceReport verify_equivalence(ModelRef orig, ModelRef atk, std::span<const Tensor> probes,
                                     std::span<const LabeledSample> batch, const Tolerances& tol)
{
    EquivalenceReport report = verify_output_equivalence(orig, atk, probes, tol.output);
    report.tolerances = tol;
    const DeviationCheck grads = verify_postsoftmax_gradient_equality(orig, atk, probes, tol.gradient);
    report.max_postsoftmax_gradient_deviation = grads.max_deviation;
    report.gradients_pass = grads.passed;
    const DeviationCheck train = verify_training_gradient_equality(orig, atk, batch, tol.parameter_gradient);
    report.max_parameter_gradient_deviation = train.max_deviation;
    report.training_pass = train.passed;
    return report;
}

} // namespace logitshift
