// Acceptance checks for the logit-shift attack. One PASS/FAIL line per
// criterion; exit status 1 if any fails.
//
// usage: acceptance_suite WORK_DIR

#include "logitshift/attribution.hpp"
#include "logitshift/cli.hpp"
#include "logitshift/file_util.hpp"
#include "logitshift/model_io.hpp"
#include "logitshift/network.hpp"
#include "logitshift/rng.hpp"
#include "logitshift/surgery.hpp"
#include "logitshift/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

using namespace logitshift;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Result
{
    bool pass = true;
    std::string detail;
};

int failures = 0;

void report(int id, const std::string& title, const Result& r)
{
    std::printf("%s criterion %d: %s (%s)\n", r.pass ? "PASS" : "FAIL", id, title.c_str(), r.detail.c_str());
    std::fflush(stdout);
    if (!r.pass) ++failures;
}

std::string fmt(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

// Adds "name value <= limit" to the detail string and folds it into pass.
void check_upper(Result& r, const std::string& name, double value, double limit)
{
    const bool ok = value <= limit;
    r.pass = r.pass && ok;
    if (!r.detail.empty()) r.detail += ", ";
    r.detail += name + " " + fmt(value) + (ok ? " <= " : " > ") + fmt(limit);
}

void check_lower(Result& r, const std::string& name, double value, double limit)
{
    const bool ok = value >= limit;
    r.pass = r.pass && ok;
    if (!r.detail.empty()) r.detail += ", ";
    r.detail += name + " " + fmt(value) + (ok ? " >= " : " < ") + fmt(limit);
}

double relative_error(const Tensor& exact, const Tensor& approx)
{
    return max_abs_diff(exact, approx) / std::max(max_abs(approx), 1e-12);
}

Tensor uniform_tensor(const Shape& shape, Rng& rng, double lo, double hi)
{
    Tensor t(shape);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

// ---- 1: softmax shift invariance -------------------------------------------

Result softmax_invariance()
{
    Rng rng(1);
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (int pair = 0; pair < 10000; ++pair) {
        const std::size_t n = 2 + rng.below(15);
        const Tensor z = uniform_tensor({n}, rng, -50.0, 50.0);
        const double t = rng.uniform(-50.0, 50.0);
        Tensor shifted = z;
        for (double& v : shifted.data()) v += t;
        worst = std::max(worst, max_abs_diff(softmax(z), softmax(shifted)));
    }
    const double elapsed = seconds_since(t0);
    Result r;
    check_upper(r, "max deviation", worst, 1e-12);
    check_upper(r, "seconds", elapsed, 1.0);
    return r;
}

// ---- 2: backward matches central differences -------------------------------

Tensor normal_tensor(const Shape& shape, Rng& rng, double sd)
{
    Tensor t(shape);
    for (double& v : t.data()) v = sd * rng.normal();
    return t;
}

Dense random_dense(std::size_t out, std::size_t in, Rng& rng)
{
    return Dense{normal_tensor({out, in}, rng, 1.0 / std::sqrt(double(in))), normal_tensor({out}, rng, 0.1)};
}

using Builder = std::function<Network(Rng&)>;

// The layer under test comes first, so the input gradient exercises its
// backward rule; a flatten and a dense head produce the logits.
Network with_head(Shape input, std::vector<Layer> body, std::size_t flat, Rng& rng)
{
    body.push_back({"flat", Flatten{}});
    body.push_back({"head", random_dense(2 + rng.below(4), flat, rng)});
    return Network(std::move(input), std::move(body));
}

struct LayerCase
{
    std::string name;
    Builder make;
    double input_lo;
    double input_hi;
};

std::vector<LayerCase> layer_cases()
{
    std::vector<LayerCase> cases;
    cases.push_back({"conv", [](Rng& rng) {
                         const std::size_t cin = 1 + rng.below(3), cout = 1 + rng.below(4);
                         const std::size_t k = 1 + rng.below(3), stride = 1 + rng.below(2), pad = rng.below(2);
                         const std::size_t hw = k + 2 + rng.below(4);
                         const std::size_t side = (hw + 2 * pad - k) / stride + 1;
                         Conv2D conv{normal_tensor({cout, k, k, cin}, rng, 0.5), normal_tensor({cout}, rng, 0.1),
                                     stride, pad};
                         return with_head({hw, hw, cin}, {{"layer", conv}}, side * side * cout, rng);
                     },
                     -1.0, 1.0});
    cases.push_back({"relu", [](Rng& rng) {
                         const std::size_t hw = 2 + rng.below(4), c = 1 + rng.below(3);
                         return with_head({hw, hw, c}, {{"layer", ReLU{}}}, hw * hw * c, rng);
                     },
                     -1.0, 1.0});
    cases.push_back({"maxpool", [](Rng& rng) {
                         const std::size_t w = 2 + rng.below(2), stride = 1 + rng.below(w);
                         const std::size_t steps = 1 + rng.below(3), c = 1 + rng.below(3);
                         const std::size_t hw = w + stride * steps;
                         return with_head({hw, hw, c}, {{"layer", MaxPool{w, w, stride}}}, (steps + 1) * (steps + 1) * c,
                                          rng);
                     },
                     -1.0, 1.0});
    cases.push_back({"flatten", [](Rng& rng) {
                         const std::size_t h = 1 + rng.below(4), w = 1 + rng.below(4), c = 1 + rng.below(3);
                         return with_head({h, w, c}, {}, h * w * c, rng);
                     },
                     -1.0, 1.0});
    cases.push_back({"dense", [](Rng& rng) {
                         const std::size_t in = 1 + rng.below(8), out = 2 + rng.below(5);
                         return Network({in}, {{"layer", random_dense(out, in, rng)}});
                     },
                     -1.0, 1.0});
    return cases;
}

// Central differences of the selected score with respect to every parameter.
double parameter_error(Network net, const Tensor& x, ScoreSelector sel, double h)
{
    const GradientSet g = backward(net, forward(net, x), sel);
    std::vector<std::size_t> layers;
    net.visit_parameters([&](std::size_t layer, const Tensor&, const Tensor&) { layers.push_back(layer); });
    double worst = 0.0;
    for (std::size_t layer : layers) {
        const ParameterGradient& exact = *g.parameters[layer];
        for (int part = 0; part < 2; ++part) {
            Tensor est = part == 0 ? exact.weights : exact.bias;
            for (std::size_t e = 0; e < est.size(); ++e) {
                auto nudged_score = [&](double delta) {
                    net.update_parameters([&](std::size_t l, std::span<double> w, std::span<double> b) {
                        if (l == layer) (part == 0 ? w : b)[e] += delta;
                    });
                    return score(forward(net, x), sel);
                };
                const double up = nudged_score(h);
                const double down = nudged_score(-2 * h);
                nudged_score(h);
                est[e] = (up - down) / (2 * h);
            }
            worst = std::max(worst, relative_error(part == 0 ? exact.weights : exact.bias, est));
        }
    }
    return worst;
}

Result gradient_check()
{
    const double h = 1e-5;
    const auto t0 = Clock::now();
    Result r;
    Rng rng(2);
    for (const auto& c : layer_cases()) {
        double worst = 0.0;
        int configs = 0, rejected = 0;
        while (configs < 100) {
            const Network net = c.make(rng);
            const Tensor x = uniform_tensor(net.input_shape(), rng, c.input_lo, c.input_hi);
            const ForwardTrace trace = forward(net, x);
            if (kink_margin(net, trace) < 1e-3) {
                ++rejected;
                continue;
            }
            ++configs;
            const ScoreSelector sel{rng.below(2) ? ScoreKind::post_softmax : ScoreKind::pre_softmax,
                                    rng.below(net.class_count())};
            const GradientSet g = backward(net, trace, sel);
            worst = std::max(worst, relative_error(g.input, finite_diff_gradient(net, x, sel, kInputName, h)));
            if (net.parameter_count() > 0) worst = std::max(worst, parameter_error(net, x, sel, h));
        }
        check_upper(r, c.name, worst, 1e-6);
    }
    check_upper(r, "seconds", seconds_since(t0), 60.0);
    return r;
}

// ---- shared reference model -------------------------------------------------

struct Reference
{
    std::shared_ptr<const Network> base;
    AttackedNetwork attacked;
    SyntheticDataset train;
    SyntheticDataset test;
};

Reference reference(const fs::path& work)
{
    const fs::path model = work / "reference_model.json";
    std::ostringstream out, err;
    if (cli::run({"train", "--seed", "7", "--out", model.string()}, out, err) != 0) {
        throw std::runtime_error("training the reference model failed: " + err.str());
    }
    auto base = load_model(model).network;
    AttackedNetwork atk = apply_logit_shift(base, default_attack(*base));
    return {base, atk, gen_blob_dataset(cli::kDemoTrainCount, cli::kDemoImageSize, 7), cli::reference_test_set(7)};
}

std::vector<Tensor> random_probes(std::size_t n, const Shape& shape, std::uint64_t seed)
{
    std::vector<Tensor> probes;
    for (std::size_t i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, i));
        probes.push_back(uniform_tensor(shape, rng, 0.0, 1.0));
    }
    return probes;
}

// ---- 3: outputs ---------------------------------------------------------------

Result output_equivalence(const Reference& ref)
{
    Result r;
    std::vector<Tensor> probes = random_probes(100, ref.base->input_shape(), 3);
    probes.insert(probes.end(), ref.test.images.begin(), ref.test.images.end());
    const EquivalenceReport e = verify_output_equivalence(*ref.base, ref.attacked, probes, 1e-10);
    check_upper(r, "max |y'-y|", e.max_output_deviation, 1e-10);
    check_lower(r, "prediction agreement", e.prediction_agreement, 1.0);
    r.detail += ", " + std::to_string(probes.size()) + " probes";
    return r;
}

// ---- 4: post-softmax gradients and attributions -------------------------------

Result attribution_invariance(const Reference& ref)
{
    Result r;
    const std::vector<Tensor> probes(ref.test.images.begin(), ref.test.images.begin() + 20);
    const auto samples = ref.test.samples();
    const std::vector<LabeledSample> batch(samples.begin(), samples.begin() + 20);
    cli::VerifyOptions opts;
    opts.attribution_probes = 20;
    const cli::VerifyOutcome v = cli::verify_models(*ref.base, ref.attacked, probes, batch, opts);
    check_upper(r, "post-softmax dS/dA", v.equivalence.max_postsoftmax_gradient_deviation, 1e-10);
    check_upper(r, "grad-cam gap", v.gradcam_gap_deviation, 1e-8);
    check_upper(r, "grad-cam elementwise", v.gradcam_elementwise_deviation, 1e-8);
    check_upper(r, "integrated gradients", v.ig_deviation, 1e-8);
    r.detail += "; pre-softmax contrast " + fmt(v.presoftmax_gradient_deviation);
    return r;
}

// ---- 5: pre-softmax gradient and heatmap shifts ---------------------------------

Result presoftmax_shift(const Reference& ref)
{
    Result r;
    const AttackConfig& cfg = ref.attacked.config();
    const double K = cfg.gain;
    const Network& net = *ref.base;
    double tap_err = 0.0, off_tap = 0.0, downstream = 0.0, gap_err = 0.0, elem_err = 0.0;
    for (std::size_t p = 0; p < 20; ++p) {
        const Tensor& x = ref.test.images[p];
        const ForwardTrace trace = forward(net, x);
        const Tensor& A = trace.activation(cfg.tap_layer);
        const std::size_t rows = A.dim(0), cols = A.dim(1), ch = A.dim(2);
        for (std::size_t c = 0; c < net.class_count(); ++c) {
            const Tensor d = presoftmax_gradient_delta(net, ref.attacked, x, cfg.tap_layer, c);
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t j = 0; j < cols; ++j) {
                    for (std::size_t k = 0; k < ch; ++k) {
                        if (i == cfg.row && j == cfg.col) tap_err = std::max(tap_err, std::fabs(d.at(i, j, k) - K));
                        else off_tap = std::max(off_tap, std::fabs(d.at(i, j, k)));
                    }
                }
            }
            // Layers after the tap see no change at all.
            for (std::size_t l = net.index_of(cfg.tap_layer) + 1; l < net.layers().size(); ++l) {
                downstream = std::max(downstream, max_abs(presoftmax_gradient_delta(net, ref.attacked, x,
                                                                                net.layers()[l].name, c)));
            }

            const Tensor sums = channel_sum(A);
            for (CamVariant variant : {CamVariant::gap, CamVariant::elementwise}) {
                const Tensor h0 = grad_cam(net, x, c, cfg.tap_layer, ScoreKind::pre_softmax, variant).pre_relu_grid;
                const Tensor h1 =
                    grad_cam(ref.attacked, x, c, cfg.tap_layer, ScoreKind::pre_softmax, variant).pre_relu_grid;
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double delta = h1.at(i, j) - h0.at(i, j);
                        if (variant == CamVariant::gap) {
                            gap_err = std::max(gap_err, std::fabs(delta - K / double(rows * cols) * sums.at(i, j)));
                        }
                        else {
                            const double expect = (i == cfg.row && j == cfg.col) ? K * sums.at(i, j) : 0.0;
                            elem_err = std::max(elem_err, std::fabs(delta - expect));
                        }
                    }
                }
            }
        }
    }
    check_upper(r, "tap |delta-K|", tap_err, 1e-10);
    check_upper(r, "off-tap |delta|", off_tap, 1e-10);
    check_upper(r, "downstream |delta|", downstream, 1e-10);
    check_upper(r, "gap shift error", gap_err, 1e-8);
    check_upper(r, "elementwise shift error", elem_err, 1e-8);
    return r;
}

// ---- 6: heatmap corruption ------------------------------------------------------

Result corruption(const Reference& ref)
{
    Result r;
    std::vector<std::size_t> predicted;
    for (const auto& x : ref.test.images) predicted.push_back(predict(*ref.base, x));
    check_lower(r, "corruption rate", cli::corruption_rate(ref.attacked, ref.test.images, predicted),
                cli::kCorruptionThreshold);
    check_lower(r, "original localization", cli::localization_rate(*ref.base, ref.test, ref.attacked.config().tap_layer),
                cli::kLocalizationThreshold);
    r.detail += ", K=" + fmt(ref.attacked.config().gain);
    return r;
}

// ---- 7: training equivalence ----------------------------------------------------

Result training(const Reference& ref)
{
    Result r;
    const auto t0 = Clock::now();
    const TrainConfig cfg{.seed = 7};
    const auto samples = ref.train.samples();
    double worst = 0.0;
    std::size_t batches = 0;
    for (std::size_t epoch = 0; batches < 50; ++epoch) {
        for (const auto& idx : epoch_batches(samples.size(), cfg, epoch)) {
            if (batches == 50) break;
            std::vector<LabeledSample> batch;
            for (auto i : idx) batch.push_back(samples[i]);
            const BatchGradient a = batch_gradient(*ref.base, batch);
            const BatchGradient b = batch_gradient(ref.attacked, batch);
            worst = std::max(worst, max_parameter_gradient_deviation(a.parameters, b.parameters));
            ++batches;
        }
    }
    check_upper(r, "batch gradient deviation", worst, 1e-12);

    const AttackConfig attack = default_attack(*ref.base);
    const LockstepReport lock = lockstep_training_check(7, ref.train, cfg, attack, 200);
    check_upper(r, "lockstep divergence", lock.max_parameter_divergence, 1e-9);
    const LockstepReport control = lockstep_training_check(7, ref.train, cfg, attack, 200, 0);
    check_lower(r, "control divergence", control.max_parameter_divergence, 1e-3);
    check_upper(r, "seconds", seconds_since(t0), 300.0);
    return r;
}

// ---- 8: integrated-gradient completeness ----------------------------------------

Result ig_completeness(const Reference& ref)
{
    Result r;
    const Tensor baseline(ref.base->input_shape());
    double worst = 0.0;
    for (const ModelRef model : {ModelRef(*ref.base), ModelRef(ref.attacked)}) {
        for (std::size_t p = 0; p < 20; ++p) {
            const Tensor& x = ref.test.images[p];
            const std::size_t c = predict(model, x);
            for (ScoreKind kind : {ScoreKind::pre_softmax, ScoreKind::post_softmax}) {
                const AttributionMap ig = integrated_gradients(model, x, baseline, c, 256, kind);
                double total = 0.0;
                for (double v : ig.values.data()) total += v;
                const double gap = score(forward(model, x), {kind, c}) - score(forward(model, baseline), {kind, c});
                worst = std::max(worst, std::fabs(total - gap) / std::max(std::fabs(gap), 1e-12));
            }
        }
    }
    check_upper(r, "max relative completeness error", worst, 0.01);
    return r;
}

// ---- 9: end-to-end demo ---------------------------------------------------------

std::vector<fs::path> tree(const fs::path& root)
{
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file()) files.push_back(fs::relative(e.path(), root));
    }
    std::sort(files.begin(), files.end());
    return files;
}

Result demo(const fs::path& work)
{
    Result r;
    const auto t0 = Clock::now();
    const fs::path a = work / "demo_a", b = work / "demo_b";
    int codes[2] = {0, 0};
    int slot = 0;
    for (const fs::path& dir : {a, b}) {
        fs::remove_all(dir);
        std::ostringstream out, err;
        codes[slot++] = cli::run({"demo", "--seed", "7", "--out-dir", dir.string()}, out, err);
    }
    check_upper(r, "seconds", seconds_since(t0), 600.0);
    check_upper(r, "exit codes", std::max(codes[0], codes[1]), 0.0);

    const auto fa = tree(a), fb = tree(b);
    std::size_t differing = fa == fb ? 0 : std::max(fa.size(), fb.size());
    if (fa == fb) {
        for (const auto& f : fa) {
            if (read_file(a / f) != read_file(b / f)) ++differing;
        }
    }
    check_upper(r, "differing files", double(differing), 0.0);
    r.detail += " of " + std::to_string(fa.size());
    if (fs::exists(a / "report.json")) {
        const Json report = Json::parse(read_file(a / "report.json"));
        check_lower(r, "report passed", report.value("passed", false) ? 1.0 : 0.0, 1.0);
    }
    else {
        r.pass = false;
        r.detail += ", report.json missing";
    }
    return r;
}

} // namespace

int main(int argc, char** argv)
{
    if (argc != 2) {
        std::cerr << "usage: acceptance_suite WORK_DIR\n";
        return 2;
    }
    const fs::path work = argv[1];
    fs::create_directories(work);
    try {
        report(1, "softmax is invariant to a common logit shift", softmax_invariance());
        report(2, "backward matches central differences per layer type", gradient_check());
        const Reference ref = reference(work);
        report(3, "attacked outputs match the original", output_equivalence(ref));
        report(4, "post-softmax gradients and attributions unchanged", attribution_invariance(ref));
        report(5, "pre-softmax gradient and heatmap shifts follow the closed form", presoftmax_shift(ref));
        report(6, "pre-softmax elementwise heatmaps pinned to the tap cell", corruption(ref));
        report(7, "training gradients and trajectories identical", training(ref));
        report(8, "integrated gradients complete within 1%", ig_completeness(ref));
        report(9, "demo runs are byte-identical and pass", demo(work));
    }
    catch (const std::exception& e) {
        std::printf("FAIL aborted: %s\n", e.what());
        return 1;
    }
    std::printf("%s: %d failing criteria\n", failures == 0 ? "ALL PASS" : "FAILED", failures);
    return failures == 0 ? 0 : 1;
}
