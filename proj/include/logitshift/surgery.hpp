#ifndef LOGITSHIFT_SURGERY_HPP
#define LOGITSHIFT_SURGERY_HPP

#include "logitshift/network.hpp"
#include "logitshift/tensor.hpp"

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>

namespace logitshift {

inline constexpr double kDefaultGain = 10.0;

/// Where the shift term is read from and how strongly it is amplified.
struct AttackConfig
{
    /// Spatial layer feeding t; normally the final pooling layer.
    std::string tap_layer;
    std::size_t row = 0;
    std::size_t col = 0;
    double gain = kDefaultGain;
};

/// Tap at cell (0,0) of the last pooling layer (last spatial layer when the
/// network has no pooling) with gain 10.
AttackConfig default_attack(const Network& net);

/// A network whose logits become z'_i = z_i + t, with t computed from the tap
/// layer by a parameter-free branch. The base parameters are shared.
class AttackedNetwork
{
public:
    AttackedNetwork(std::shared_ptr<const Network> base, AttackConfig config,
                    std::optional<std::size_t> control_class = std::nullopt);

    const Network& base() const { return *base_; }
    const std::shared_ptr<const Network>& base_ptr() const { return base_; }
    const AttackConfig& config() const { return config_; }
    /// Set for the single-class negative control.
    const std::optional<std::size_t>& control_class() const { return branch_.only_class; }
    const LogitShift& branch() const { return branch_; }
    /// Trainable parameters; the branch adds none.
    std::size_t parameter_count() const { return base_->parameter_count(); }

    operator ModelRef() const { return ModelRef(*base_, &branch_); }

private:
    std::shared_ptr<const Network> base_;
    AttackConfig config_;
    LogitShift branch_;
};

/// t = gain * sum_k A[row, col, k] over the channels of the tap layer.
double shift_term(const ForwardTrace& trace, const AttackConfig& cfg);

AttackedNetwork apply_logit_shift(std::shared_ptr<const Network> net, AttackConfig cfg);

/// Adds t to the logit of `cls` only. Not output-preserving.
AttackedNetwork apply_single_class_shift(std::shared_ptr<const Network> net, AttackConfig cfg, std::size_t cls);

/// Cells of `target_layer` that feed the tap cell: the tap cell itself when
/// the target is the tap layer, its receptive field when upstream.
Region tap_region(const Network& net, const AttackConfig& cfg, std::string_view target_layer);

// Deviations between the two models are zero analytically; the tolerances
// only absorb rounding from reordered floating-point sums.
struct Tolerances
{
    double output = 1e-10;
    double gradient = 1e-10;
    double parameter_gradient = 1e-12;
    double attribution = 1e-8;
};

struct EquivalenceReport
{
    double max_output_deviation = 0.0;
    double prediction_agreement = 1.0;
    double max_postsoftmax_gradient_deviation = 0.0;
    double max_parameter_gradient_deviation = 0.0;
    std::size_t probe_count = 0;
    Tolerances tolerances;
    bool outputs_pass = true;
    bool gradients_pass = true;
    bool training_pass = true;

    bool passed() const { return outputs_pass && gradients_pass && training_pass; }
};

/// Max ||y' - y||_inf and prediction agreement over the probes. Only the
/// output fields of the report are filled.
EquivalenceReport verify_output_equivalence(ModelRef orig, ModelRef atk, std::span<const Tensor> probes,
                                            double tol);

struct DeviationCheck
{
    double max_deviation = 0.0;
    double tolerance = 0.0;
    bool passed = true;
};

/// Largest elementwise deviation of dS/dA between the models over every
/// probe, class, and activation (input included) for the given score kind.
double max_activation_gradient_deviation(ModelRef orig, ModelRef atk, std::span<const Tensor> probes, ScoreKind kind);

DeviationCheck verify_postsoftmax_gradient_equality(ModelRef orig, ModelRef atk, std::span<const Tensor> probes,
                                                    double tol);

/// dz'_c/dA - dz_c/dA at the target layer.
Tensor presoftmax_gradient_delta(ModelRef orig, ModelRef atk, const Tensor& input, std::string_view target_layer,
                                 std::size_t class_index);

double max_parameter_gradient_deviation(std::span<const std::optional<ParameterGradient>> a,
                                        std::span<const std::optional<ParameterGradient>> b);

/// Per-sample cross-entropy parameter gradients compared between models.
DeviationCheck verify_training_gradient_equality(ModelRef orig, ModelRef atk, std::span<const LabeledSample> batch,
                                                 double tol);

/// Runs all three checks and fills every report field.
EquivalenceReport verify_equivalence(ModelRef orig, ModelRef atk, std::span<const Tensor> probes,
                                     std::span<const LabeledSample> batch, const Tolerances& tol = {});

} // namespace logitshift

#endif
