#include "logitshift/surgery.hpp"
#include "logitshift/trainer.hpp"

#include "helpers.hpp"

#include <gtest/gtest.h>

#include <memory>

using namespace logitshift;
using testing_util::positive_input;
using testing_util::tiny_cnn;

namespace {

std::shared_ptr<const Network> shared_cnn(std::uint64_t seed)
{
    return std::make_shared<const Network>(tiny_cnn(seed));
}

std::vector<Tensor> probes(std::size_t n, std::uint64_t seed)
{
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(positive_input({6, 6, 2}, seed + i));
    return out;
}

/// 2x2x3 input, 2x2 pool "tap", flatten, dense(2).
Network pooled_tap()
{
    return Network({2, 2, 3}, {Layer{"tap", MaxPool{}}, Layer{"flat", Flatten{}},
                               Layer{"fc", Dense{Tensor({2, 3}, {0.1, 0.2, 0.3, -0.3, 0.2, 0.1}), Tensor({2})}}});
}

} // namespace

TEST(ShiftTerm, HandValue)
{
    const auto net = std::make_shared<const Network>(pooled_tap());
    Tensor x({2, 2, 3});
    x.at(1, 0, 0) = 1.0;
    x.at(0, 1, 1) = 2.0;
    x.at(1, 1, 2) = 0.5;
    const AttackConfig cfg{"tap", 0, 0, 10.0};
    EXPECT_EQ(shift_term(forward(*net, x), cfg), 35.0);
    const AttackedNetwork atk = apply_logit_shift(net, cfg);
    const ForwardTrace t = forward(atk, x);
    EXPECT_EQ(t.shift, 35.0);
    EXPECT_EQ(t.logits, add(forward(*net, x).logits, Tensor({2}, 35.0)));
    EXPECT_EQ(shift_term(forward(*net, x), {"tap", 0, 0, 0.0}), 0.0);
    EXPECT_EQ(shift_term(forward(*net, Tensor({2, 2, 3})), cfg), 0.0);
}

TEST(Attack, ValidatesTap)
{
    const auto net = shared_cnn(1);
    EXPECT_THROW(apply_logit_shift(net, {"missing", 0, 0, 10}), std::invalid_argument);
    EXPECT_THROW(apply_logit_shift(net, {"flat", 0, 0, 10}), std::invalid_argument);
    EXPECT_THROW(apply_logit_shift(net, {"pool", 0, 0, NAN}), std::invalid_argument);
    EXPECT_THROW(apply_single_class_shift(net, {"pool", 0, 0, 10}, 3), std::out_of_range);
    try {
        apply_logit_shift(net, {"pool", 3, 0, 10});
        FAIL();
    }
    catch (const std::out_of_range& e) {
        EXPECT_NE(std::string(e.what()).find("3x3"), std::string::npos) << e.what();
    }
    EXPECT_THROW(AttackedNetwork(nullptr, {"pool", 0, 0, 10}), std::invalid_argument);
}

TEST(Attack, DefaultsAndParameterCount)
{
    const auto net = std::make_shared<const Network>(init_network(0));
    const AttackConfig cfg = default_attack(*net);
    EXPECT_EQ(cfg.tap_layer, "pool2");
    EXPECT_EQ(cfg.row, 0u);
    EXPECT_EQ(cfg.col, 0u);
    EXPECT_EQ(cfg.gain, 10.0);
    EXPECT_EQ(apply_logit_shift(net, cfg).parameter_count(), net->parameter_count());
}

TEST(Attack, ZeroGainIsBitwiseIdentity)
{
    const auto net = shared_cnn(2);
    const AttackedNetwork atk = apply_logit_shift(net, {"pool", 1, 1, 0.0});
    for (const auto& x : probes(5, 10)) {
        const ForwardTrace a = forward(*net, x);
        const ForwardTrace b = forward(atk, x);
        EXPECT_EQ(a.logits, b.logits);
        for (ScoreKind kind : {ScoreKind::pre_softmax, ScoreKind::post_softmax}) {
            const GradientSet ga = backward(*net, a, {kind, 1});
            const GradientSet gb = backward(atk, b, {kind, 1});
            EXPECT_EQ(ga.input, gb.input);
            EXPECT_EQ(ga.activations, gb.activations);
        }
        EXPECT_EQ(max_abs(presoftmax_gradient_delta(*net, atk, x, "relu", 0)), 0.0);
    }
    EXPECT_EQ(max_activation_gradient_deviation(*net, atk, probes(3, 1), ScoreKind::post_softmax), 0.0);
    EXPECT_EQ(verify_training_gradient_equality(*net, atk, {{{probes(1, 4)[0], 2}}}, 0.0).max_deviation, 0.0);
}

TEST(Attack, OutputsPreserved)
{
    const auto net = shared_cnn(3);
    const AttackedNetwork atk = apply_logit_shift(net, {"pool", 0, 0, 10.0});
    for (const auto& x : probes(20, 30)) {
        const ForwardTrace a = forward(*net, x);
        const ForwardTrace b = forward(atk, x);
        EXPECT_LE(max_abs_diff(a.probabilities, b.probabilities), 1e-12);
        EXPECT_EQ(predict(*net, x), predict(atk, x));
        EXPECT_NE(a.logits, b.logits);
    }
}

TEST(Attack, PresoftmaxDeltaAtTapLayer)
{
    const auto net = shared_cnn(4);
    const double k = 7.5;
    const AttackedNetwork atk = apply_logit_shift(net, {"pool", 2, 1, k});
    for (const auto& x : probes(5, 50)) {
        for (std::size_t c = 0; c < 3; ++c) {
            const Tensor d = presoftmax_gradient_delta(*net, atk, x, "pool", c);
            for (std::size_t i = 0; i < 3; ++i) {
                for (std::size_t j = 0; j < 3; ++j) {
                    for (std::size_t ch = 0; ch < 3; ++ch) {
                        EXPECT_NEAR(d.at(i, j, ch), (i == 2 && j == 1) ? k : 0.0, 1e-10);
                    }
                }
            }
        }
    }
}

TEST(Attack, PresoftmaxDeltaRoutedThroughPool)
{
    // A positive conv bias keeps the ReLUs active, so pooling windows have no
    // ties of clamped zeros and finite differences at the ReLU layer are valid.
    Network shifted_bias = tiny_cnn(5);
    shifted_bias.update_parameters([](std::size_t layer, std::span<double>, std::span<double> b) {
        if (layer == 0) {
            for (double& v : b) v += 3.0;
        }
    });
    const auto net = std::make_shared<const Network>(std::move(shifted_bias));
    const AttackedNetwork atk = apply_logit_shift(net, {"pool", 1, 0, 10.0});
    Tensor x;
    ForwardTrace t;
    for (std::uint64_t seed = 70; seed < 400; ++seed) {
        x = positive_input({6, 6, 2}, seed);
        t = forward(*net, x);
        if (kink_margin(*net, t, "relu") > 1e-4) break;
    }
    ASSERT_GT(kink_margin(*net, t, "relu"), 1e-4);
    const Tensor d = presoftmax_gradient_delta(*net, atk, x, "relu", 0);
    const auto& argmax = t.layers[net->index_of("pool")].argmax;
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const std::size_t flat = (i * 6 + j) * 3 + ch;
                const bool routed = argmax[(1 * 3 + 0) * 3 + ch] == flat;
                EXPECT_EQ(d.at(i, j, ch), routed ? 10.0 : 0.0) << i << "," << j << "," << ch;
                if (routed) {
                    EXPECT_TRUE(i >= 2 && i < 4 && j < 2);
                }
            }
        }
    }
    // Same delta from finite differences on both models.
    const Tensor fd = sub(finite_diff_gradient(atk, x, {ScoreKind::pre_softmax, 0}, "relu", 1e-5),
                          finite_diff_gradient(*net, x, {ScoreKind::pre_softmax, 0}, "relu", 1e-5));
    EXPECT_LE(max_abs_diff(fd, d), 1e-6 * 10.0);
}

TEST(Attack, TapRegion)
{
    const Network net = tiny_cnn(1);
    const AttackConfig cfg{"pool", 1, 2, 10};
    EXPECT_EQ(tap_region(net, cfg, "pool"), (Region{1, 2, 1, 1}));
    EXPECT_EQ(tap_region(net, cfg, "relu"), (Region{2, 4, 2, 2}));
    EXPECT_EQ(tap_region(net, cfg, "input"), (Region{1, 3, 4, 3}));
}

TEST(Verify, OutputEquivalence)
{
    const auto net = shared_cnn(6);
    const auto ps = probes(100, 200);
    const EquivalenceReport self = verify_output_equivalence(*net, *net, ps, 1e-10);
    EXPECT_EQ(self.max_output_deviation, 0.0);
    EXPECT_TRUE(self.outputs_pass);
    const EquivalenceReport ok = verify_output_equivalence(*net, apply_logit_shift(net, {"pool", 0, 0, 10}), ps, 1e-10);
    EXPECT_TRUE(ok.outputs_pass);
    EXPECT_EQ(ok.prediction_agreement, 1.0);
    EXPECT_EQ(ok.probe_count, 100u);
    const EquivalenceReport broken =
        verify_output_equivalence(*net, apply_single_class_shift(net, {"pool", 0, 0, 10}, 1), ps, 1e-10);
    EXPECT_FALSE(broken.outputs_pass);
    EXPECT_GT(broken.max_output_deviation, 1e-3);
    EXPECT_THROW((void)verify_output_equivalence(*net, *net, {}, 1e-10), std::invalid_argument);
}

TEST(Verify, PostsoftmaxGradientsAndContrast)
{
    const auto net = shared_cnn(7);
    const AttackedNetwork atk = apply_logit_shift(net, {"pool", 0, 0, 10});
    const auto ps = probes(20, 300);
    const DeviationCheck post = verify_postsoftmax_gradient_equality(*net, atk, ps, 1e-10);
    EXPECT_TRUE(post.passed) << post.max_deviation;
    EXPECT_GE(max_activation_gradient_deviation(*net, atk, ps, ScoreKind::pre_softmax), 10.0 - 1e-10);
}

TEST(Verify, TrainingGradients)
{
    const auto net = shared_cnn(8);
    const AttackedNetwork atk = apply_logit_shift(net, {"pool", 2, 2, 10});
    std::vector<LabeledSample> batch;
    for (std::size_t i = 0; i < 32; ++i) batch.push_back({positive_input({6, 6, 2}, 400 + i), i % 3});
    EXPECT_TRUE(verify_training_gradient_equality(*net, atk, batch, 1e-12).passed);
    const AttackedNetwork ctl = apply_single_class_shift(net, {"pool", 2, 2, 10}, 0);
    EXPECT_FALSE(verify_training_gradient_equality(*net, ctl, batch, 1e-12).passed);

    const EquivalenceReport full = verify_equivalence(*net, atk, probes(10, 500), batch);
    EXPECT_TRUE(full.passed());
    EXPECT_FALSE(verify_equivalence(*net, ctl, probes(10, 500), batch).passed());
}

TEST(Verify, DenseOnlyAnalyticGradient)
{
    // A 1x1 pool is an identity spatial layer, leaving Dense as the only
    // parameterised layer.
    Rng rng(12);
    const Tensor w = testing_util::random_tensor({3, 8}, rng);
    const auto net = std::make_shared<const Network>(
        Shape{2, 2, 2}, std::vector<Layer>{Layer{"tap", MaxPool{1, 1, 1}}, Layer{"flat", Flatten{}},
                                           Layer{"fc", Dense{w, testing_util::random_tensor({3}, rng)}}});
    const AttackedNetwork atk = apply_logit_shift(net, {"tap", 1, 0, 10});
    const Tensor x = positive_input({2, 2, 2}, 13);
    const std::size_t label = 2;
    const Tensor y = forward(*net, x).probabilities;
    for (ModelRef m : {ModelRef(*net), ModelRef(atk)}) {
        const LossGradient lg = loss_gradient(m, x, label);
        const auto& p = *lg.gradients.parameters[2];
        for (std::size_t c = 0; c < 3; ++c) {
            const double d = y[c] - (c == label ? 1.0 : 0.0);
            EXPECT_NEAR(p.bias[c], d, 1e-12);
            for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(p.weights.at(c, i), d * x[i], 1e-12);
        }
    }
}

TEST(Verify, ParameterDeviationLayoutChecks)
{
    std::vector<std::optional<ParameterGradient>> a(2), b(3);
    EXPECT_THROW((void)max_parameter_gradient_deviation(a, b), std::invalid_argument);
    b.resize(2);
    b[0] = ParameterGradient{Tensor({1}), Tensor({1})};
    EXPECT_THROW((void)max_parameter_gradient_deviation(a, b), std::invalid_argument);
}
