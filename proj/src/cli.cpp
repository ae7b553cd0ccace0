#include "logitshift/cli.hpp"

#include "logitshift/attribution.hpp"
#include "logitshift/file_util.hpp"
#include "logitshift/image_io.hpp"
#include "logitshift/model_io.hpp"
#include "logitshift/render.hpp"
#include "logitshift/rng.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

namespace fs = std::filesystem;

namespace logitshift::cli {

namespace {

std::string num(double v)
{
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string dump(const Json& j)
{
    return j.dump(1) + "\n";
}

/// Owns a model file and, when it carries an attack stanza, the attacked view.
struct LoadedModel
{
    ModelFile file;
    std::optional<AttackedNetwork> attacked;

    ModelRef ref() const { return attacked ? ModelRef(*attacked) : ModelRef(*file.network); }
    const Network& network() const { return *file.network; }
};

LoadedModel load(const fs::path& path)
{
    LoadedModel m;
    try {
        m.file = load_model(path);
        m.attacked = m.file.attacked();
    }
    catch (const std::exception& e) {
        throw UsageError("cannot load model '" + path.string() + "': " + e.what());
    }
    return m;
}

Json attack_json(const ModelFile& f)
{
    if (!f.attack) return nullptr;
    Json j = to_json(*f.attack);
    if (f.control_class) j["control_class"] = *f.control_class;
    return j;
}

void ensure_parent(const fs::path& path)
{
    const fs::path parent = path.parent_path();
    if (!parent.empty()) fs::create_directories(parent);
}

std::string grid_text(const Tensor& grid)
{
    std::string s;
    for (std::size_t i = 0; i < grid.dim(0); ++i) {
        for (std::size_t j = 0; j < grid.dim(1); ++j) {
            if (j) s += ' ';
            s += num(grid.at(i, j));
        }
        s += '\n';
    }
    return s;
}

Tensor abs_grid(Tensor t)
{
    for (double& v : t.data()) v = std::fabs(v);
    return t;
}

Tensor gray_plane(const Tensor& input)
{
    return input.reshaped({input.dim(0), input.dim(1)});
}

/// Heat and grey input at (scale x input) resolution, combined into a colour
/// overlay.
Image render_overlay(const Tensor& input, const Tensor& grid, std::size_t factor)
{
    const Tensor gray = upscale_nearest(gray_plane(input), factor);
    return overlay(gray, render_heat(grid, gray.dim(0), gray.dim(1)));
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs
{
    std::uint64_t seed = 0;
    std::size_t epochs = 10;
    double lr = 0.05;
    std::size_t batch = 10;
    std::size_t size = kDemoImageSize;
    std::size_t count = kDemoTrainCount;
    std::string out;
    std::string metrics;
};

struct TrainOutcome
{
    TrainResult result;
    Json metrics;
};

TrainOutcome train_reference(const TrainArgs& a)
{
    if (a.size < 8 || a.size % 4 != 0) throw UsageError("--size must be a multiple of 4 and at least 8");
    if (a.count < kBlobClasses) throw UsageError("--count must be at least 4");
    if (a.batch == 0) throw UsageError("--batch must be positive");
    if (!(a.lr >= 0.0) || !std::isfinite(a.lr)) throw UsageError("--lr must be finite and non-negative");
    const SyntheticDataset data = gen_blob_dataset(a.count, a.size, a.seed);
    const TrainConfig cfg{a.lr, a.epochs, a.batch, a.seed};
    TrainOutcome o{train_sgd(init_network(a.seed, a.size), data, cfg), {}};
    o.metrics = Json{{"format", "logitshift.metrics"},
                     {"version", 1},
                     {"config",
                      {{"seed", a.seed},
                       {"epochs", a.epochs},
                       {"learning_rate", a.lr},
                       {"batch_size", a.batch},
                       {"image_size", a.size},
                       {"count", a.count}}},
                     {"initial_loss", o.result.initial_loss},
                     {"epoch_loss", o.result.epoch_loss},
                     {"train_accuracy", o.result.train_accuracy},
                     {"steps", o.result.steps}};
    return o;
}

int cmd_train(const TrainArgs& a, std::ostream& out)
{
    const TrainOutcome o = train_reference(a);
    fs::path metrics = a.metrics;
    if (metrics.empty()) metrics = fs::path(a.out).replace_extension(".metrics.json");
    ensure_parent(a.out);
    ensure_parent(metrics);
    save_model(a.out, o.result.network);
    write_file_atomic(metrics, dump(o.metrics));
    out << "trained " << o.result.steps << " steps, final epoch loss "
        << (o.result.epoch_loss.empty() ? o.result.initial_loss : o.result.epoch_loss.back()) << ", train accuracy "
        << o.result.train_accuracy << "\n"
        << "wrote " << a.out << " and " << metrics.string() << "\n";
    return kExitPass;
}

// ---------------------------------------------------------------------------
// attack

struct AttackArgs
{
    std::string model;
    std::string out;
    double k = kDefaultGain;
    std::size_t tap_i = 0;
    std::size_t tap_j = 0;
    std::string tap_layer;
    std::optional<std::size_t> control_class;
};

int cmd_attack(const AttackArgs& a, std::ostream& out)
{
    const LoadedModel m = load(a.model);
    if (m.file.attack) throw UsageError("model '" + a.model + "' already carries an attack stanza");
    AttackConfig cfg = default_attack(m.network());
    if (!a.tap_layer.empty()) cfg.tap_layer = a.tap_layer;
    cfg.row = a.tap_i;
    cfg.col = a.tap_j;
    cfg.gain = a.k;
    try {
        const AttackedNetwork atk = a.control_class
                                        ? apply_single_class_shift(m.file.network, cfg, *a.control_class)
                                        : apply_logit_shift(m.file.network, cfg);
        ensure_parent(a.out);
        write_file_atomic(a.out, serialize_model(atk));
    }
    catch (const std::logic_error& e) {
        throw UsageError(std::string("invalid tap: ") + e.what());
    }
    out << "attack: tap " << cfg.tap_layer << " (" << cfg.row << "," << cfg.col << ") K=" << cfg.gain
        << (a.control_class ? " single-class control " + std::to_string(*a.control_class) : std::string()) << "\n"
        << "wrote " << a.out << "\n";
    return kExitPass;
}

// ---------------------------------------------------------------------------
// explain

struct ExplainArgs
{
    std::string model;
    std::string image;
    std::optional<std::size_t> class_index;
    std::string method = "gradcam";
    std::string variant = "gap";
    std::string score = "pre";
    std::string layer;
    std::size_t steps = kDefaultIgSteps;
    std::string out_prefix;
};

int cmd_explain(const ExplainArgs& a, std::ostream& out)
{
    const LoadedModel m = load(a.model);
    const Network& net = m.network();
    Tensor input;
    try {
        input = to_grayscale_tensor(read_netpbm(a.image));
    }
    catch (const std::exception& e) {
        throw UsageError("cannot read image '" + a.image + "': " + e.what());
    }
    if (input.shape() != net.input_shape()) {
        throw UsageError("image shape " + to_string(input.shape()) + " does not match model input " +
                         to_string(net.input_shape()));
    }
    const ScoreKind kind = parse_score_kind(a.score);
    const std::size_t cls = a.class_index ? *a.class_index : predict(m.ref(), input);
    if (cls >= net.class_count()) {
        throw UsageError("--class " + std::to_string(cls) + " out of range (model has " +
                         std::to_string(net.class_count()) + " classes)");
    }

    Tensor values;
    Tensor heat;
    std::string layer = "input";
    if (a.method == "gradcam") {
        if (a.layer.empty()) {
            const auto last = net.last_spatial_layer();
            if (!last) throw UsageError("model has no spatial layer for gradcam");
            layer = net.layers()[*last].name;
        }
        else {
            layer = a.layer;
        }
        if (!net.find(layer) || !net.is_spatial(layer)) throw UsageError("--layer '" + layer + "' is not a spatial layer");
        const Heatmap h = grad_cam(m.ref(), input, cls, layer, kind, parse_cam_variant(a.variant));
        values = h.grid;
        heat = h.grid;
    }
    else {
        if (!a.layer.empty()) throw UsageError("--layer applies to gradcam only");
        const AttributionMap map = a.method == "saliency"
                                       ? saliency(m.ref(), input, {kind, cls})
                                       : integrated_gradients(m.ref(), input, Tensor(input.shape()), cls, a.steps, kind);
        values = channel_sum(map.values);
        heat = abs_grid(values);
    }

    const NormalizedMap norm = normalize(heat);
    const std::size_t peak = argmax_flat(heat);
    std::ostringstream header;
    header << "# method " << a.method << (a.method == "gradcam" ? " variant " + a.variant : std::string())
           << " score " << to_string(kind) << " class " << cls << " layer " << layer << "\n"
           << "# rows " << values.dim(0) << " cols " << values.dim(1) << " zero_map " << (norm.zero_map ? 1 : 0)
           << "\n";

    const std::string prefix = a.out_prefix;
    ensure_parent(prefix);
    write_file_atomic(prefix + ".values.txt", header.str() + grid_text(values));
    write_netpbm(prefix + ".heatmap.pgm", gray_image(norm.map));
    write_netpbm(prefix + ".overlay.ppm", render_overlay(input, heat, 1));
    const Json info{{"format", "logitshift.explain"},
                    {"version", 1},
                    {"method", a.method},
                    {"variant", a.method == "gradcam" ? Json(a.variant) : Json(nullptr)},
                    {"score", to_string(kind)},
                    {"class", cls},
                    {"layer", layer},
                    {"steps", a.method == "ig" ? Json(a.steps) : Json(nullptr)},
                    {"rows", values.dim(0)},
                    {"cols", values.dim(1)},
                    {"argmax", {peak / values.dim(1), peak % values.dim(1)}},
                    {"zero_map", norm.zero_map},
                    {"attack", attack_json(m.file)}};
    write_file_atomic(prefix + ".json", dump(info));
    out << a.method << " class " << cls << " at " << layer << ": argmax (" << peak / values.dim(1) << ","
        << peak % values.dim(1) << ")" << (norm.zero_map ? ", zero map" : "") << "\n";
    return kExitPass;
}

// ---------------------------------------------------------------------------
// verify

struct ProbeSet
{
    std::vector<Tensor> inputs;
    std::vector<LabeledSample> labeled;
    Json source;
};

ProbeSet random_probes(const Network& net, ModelRef orig, std::size_t count, std::uint64_t seed)
{
    if (count == 0) throw UsageError("--random needs at least one probe");
    ProbeSet p;
    p.source = Json{{"source", "random"}, {"count", count}, {"seed", seed}, {"distribution", "uniform [0,1]"}};
    for (std::size_t n = 0; n < count; ++n) {
        Rng rng(derive_seed(seed, n));
        Tensor x(net.input_shape());
        for (double& v : x.data()) v = rng.uniform();
        p.labeled.push_back({x, predict(orig, x)});
        p.inputs.push_back(std::move(x));
    }
    return p;
}

ProbeSet directory_probes(const Network& net, const fs::path& dir, const std::string& shown)
{
    ProbeSet p;
    try {
        p.labeled = load_dataset_dir(dir);
    }
    catch (const std::exception& e) {
        throw UsageError("cannot load probes from '" + dir.string() + "': " + e.what());
    }
    if (p.labeled.empty()) throw UsageError("probe directory '" + dir.string() + "' is empty");
    for (const auto& s : p.labeled) {
        if (s.input.shape() != net.input_shape()) throw UsageError("probe shape does not match the model input");
        if (s.label >= net.class_count()) throw UsageError("probe label out of range");
        p.inputs.push_back(s.input);
    }
    p.source = Json{{"source", "directory"}, {"path", shown}, {"count", p.inputs.size()}};
    return p;
}

Json verify_report(const VerifyOutcome& v, const VerifyOptions& opts, Json config)
{
    config["tolerances"] = to_json(opts.tolerances);
    config["attribution_probes"] = opts.attribution_probes;
    config["ig_steps"] = opts.ig_steps;
    Json criteria = Json::array();
    for (const auto& c : v.criteria) criteria.push_back(to_json(c));
    return Json{{"format", kReportFormat},
                {"version", kReportVersion},
                {"tool", {{"name", kToolName}, {"version", kToolVersion}}},
                {"command", "verify"},
                {"config", std::move(config)},
                {"equivalence", to_json(v.equivalence)},
                {"attribution",
                 {{"gradcam_gap_max_deviation", {{"value", v.gradcam_gap_deviation}, {"tolerance", opts.tolerances.attribution}}},
                  {"gradcam_elementwise_max_deviation",
                   {{"value", v.gradcam_elementwise_deviation}, {"tolerance", opts.tolerances.attribution}}},
                  {"ig_max_deviation", {{"value", v.ig_deviation}, {"tolerance", opts.tolerances.attribution}}}}},
                {"contrast", {{"presoftmax_gradient_max_deviation", v.presoftmax_gradient_deviation}}},
                {"criteria", std::move(criteria)},
                {"passed", all_passed(v.criteria)}};
}

int report_verdict(const std::vector<Criterion>& criteria, std::ostream& out, std::ostream& err)
{
    bool ok = true;
    for (const auto& c : criteria) {
        out << (c.passed() ? "PASS " : "FAIL ") << c.name << ": " << num(c.value) << (c.upper ? " <= " : " >= ")
            << num(c.limit) << "\n";
        if (!c.passed()) {
            err << "verification failed: " << c.name << " (value " << num(c.value) << ", limit " << num(c.limit)
                << ")\n";
            ok = false;
        }
    }
    return ok ? kExitPass : kExitFailed;
}

struct VerifyArgs
{
    std::string model;
    std::string attacked;
    std::string probes;
    std::optional<std::size_t> random;
    std::uint64_t seed = 0;
    std::string report;
    std::size_t attribution_probes = 20;
    std::size_t ig_steps = kDefaultIgSteps;
};

int cmd_verify(const VerifyArgs& a, std::ostream& out, std::ostream& err)
{
    const LoadedModel orig = load(a.model);
    const LoadedModel atk = load(a.attacked);
    if (orig.network().input_shape() != atk.network().input_shape() ||
        orig.network().class_count() != atk.network().class_count()) {
        throw UsageError("models have different input shapes or class counts");
    }
    const ProbeSet probes = a.random ? random_probes(orig.network(), orig.ref(), *a.random, a.seed)
                                     : directory_probes(orig.network(), a.probes, a.probes);
    VerifyOptions opts;
    opts.attribution_probes = a.attribution_probes;
    opts.ig_steps = a.ig_steps;
    const VerifyOutcome v = verify_models(orig.ref(), atk.ref(), probes.inputs, probes.labeled, opts);
    const Json config{{"model", a.model},
                      {"attacked", a.attacked},
                      {"model_attack", attack_json(orig.file)},
                      {"attack", attack_json(atk.file)},
                      {"probes", probes.source}};
    ensure_parent(a.report);
    write_file_atomic(a.report, dump(verify_report(v, opts, config)));
    return report_verdict(v.criteria, out, err);
}

// ---------------------------------------------------------------------------
// demo

struct DemoArgs
{
    std::string out_dir;
    std::uint64_t seed = 7;
};

struct MapPair
{
    Tensor original;
    Tensor attacked;
};

/// Grad-CAM grids for every (variant, layer, score) combination from one
/// backward pass per model and score kind.
std::map<std::string, MapPair> cam_maps(ModelRef orig, ModelRef atk, const Tensor& x, std::size_t cls,
                                        const std::vector<std::string>& layers)
{
    std::map<std::string, MapPair> maps;
    const ForwardTrace to = forward(orig, x);
    const ForwardTrace ta = forward(atk, x);
    for (ScoreKind kind : {ScoreKind::pre_softmax, ScoreKind::post_softmax}) {
        const GradientSet go = backward(orig, to, {kind, cls});
        const GradientSet ga = backward(atk, ta, {kind, cls});
        for (const auto& layer : layers) {
            for (CamVariant variant : {CamVariant::gap, CamVariant::elementwise}) {
                auto rect = [&](const ForwardTrace& t, const GradientSet& g) {
                    Tensor grid = cam_combine(t.activation(layer), g.activation(layer), variant);
                    for (double& v : grid.data()) v = std::max(v, 0.0);
                    return grid;
                };
                const std::string key = std::string(to_string(variant)) + "/" + layer + "/" + std::string(to_string(kind));
                maps[key] = {rect(to, go), rect(ta, ga)};
            }
        }
    }
    return maps;
}

std::string csv_optional(const std::optional<double>& v)
{
    return v ? num(*v) : "NA";
}

int cmd_demo(const DemoArgs& a, std::ostream& out, std::ostream& err)
{
    using clock = std::chrono::steady_clock;
    const auto start = clock::now();
    const fs::path dir = a.out_dir;
    fs::create_directories(dir / "panels");

    TrainArgs ta;
    ta.seed = a.seed;
    const TrainOutcome trained = train_reference(ta);
    const auto base = std::make_shared<const Network>(trained.result.network);
    save_model(dir / "model.json", *base);
    write_file_atomic(dir / "train_metrics.json", dump(trained.metrics));
    out << "trained reference model: accuracy " << trained.result.train_accuracy << "\n";

    const SyntheticDataset test = reference_test_set(a.seed);
    export_dataset(test, dir / "test_set");
    std::vector<std::size_t> predicted;
    for (const auto& x : test.images) predicted.push_back(predict(*base, x));

    // Start at the default gain and raise it tenfold until the corruption
    // target is met.
    AttackConfig cfg = default_attack(*base);
    Json calibration = Json::array();
    double corruption = 0.0;
    for (int round = 0; round < 4; ++round) {
        corruption = corruption_rate(apply_logit_shift(base, cfg), test.images, predicted);
        calibration.push_back({{"K", cfg.gain}, {"corruption_rate", corruption}});
        if (corruption >= kCorruptionThreshold) break;
        if (round < 3) cfg.gain *= 10.0;
    }
    const AttackedNetwork atk = apply_logit_shift(base, cfg);
    write_file_atomic(dir / "attacked.json", serialize_model(atk));
    const std::string tap_layer = cfg.tap_layer;
    const double localization = localization_rate(*base, test, tap_layer);
    out << "attack K=" << cfg.gain << ": corruption rate " << corruption << ", localization " << localization << "\n";

    const VerifyOptions opts;
    const VerifyOutcome v = verify_models(*base, atk, test.images, test.samples(), opts);
    const Json verify_config{{"model", "model.json"},
                             {"attacked", "attacked.json"},
                             {"model_attack", nullptr},
                             {"attack", to_json(cfg)},
                             {"probes", {{"source", "directory"}, {"path", "test_set"}, {"count", test.size()}}}};
    write_file_atomic(dir / "verify_report.json", dump(verify_report(v, opts, verify_config)));

    // Comparisons for every test image.
    const Network& net = *base;
    std::vector<std::string> layers{tap_layer};
    const std::string upstream = net.layers()[net.index_of(tap_layer) - 1].name;
    if (net.is_spatial(upstream)) layers.push_back(upstream);
    const Region input_region = tap_region(net, cfg, kInputName);

    std::string csv = "image,label,predicted,method,variant,layer,score,pearson,spearman,max_abs_diff,"
                      "argmax_distance,mass_fraction_original,mass_fraction_attacked\n";
    Json comparisons = Json::array();
    struct Summary
    {
        double spearman_sum = 0.0;
        std::size_t spearman_count = 0;
        std::size_t undefined = 0;
        double max_abs_diff = 0.0;
        double mass_a = 0.0;
        double mass_b = 0.0;
        std::size_t count = 0;
    };
    std::map<std::string, Summary> summary;
    std::size_t post_identical = 0, panel_count = 0;
    double gap_spearman_sum = 0.0;
    std::size_t gap_spearman_count = 0;
    double elementwise_mass_sum = 0.0;

    auto record = [&](std::size_t n, const std::string& method, const std::string& variant, const std::string& layer,
                      ScoreKind kind, const MapPair& maps, Region region) {
        const ComparisonReport r = compare_heatmaps(maps.original, maps.attacked, region);
        csv += std::to_string(n) + "," + std::to_string(test.labels[n]) + "," + std::to_string(predicted[n]) + "," +
               method + "," + variant + "," + layer + "," + std::string(to_string(kind)) + "," +
               csv_optional(r.pearson) + "," + csv_optional(r.spearman) + "," + num(r.max_abs_diff) + "," +
               std::to_string(r.argmax_distance) + "," + num(r.mass_fraction_a) + "," + num(r.mass_fraction_b) + "\n";
        Json j = to_json(r);
        j["image"] = n;
        j["method"] = method;
        j["variant"] = variant.empty() ? Json(nullptr) : Json(variant);
        j["layer"] = layer;
        j["score"] = to_string(kind);
        comparisons.push_back(std::move(j));
        Summary& s = summary[method + "/" + variant + "/" + layer + "/" + std::string(to_string(kind))];
        if (r.spearman) {
            s.spearman_sum += *r.spearman;
            ++s.spearman_count;
        }
        else {
            ++s.undefined;
        }
        s.max_abs_diff = std::max(s.max_abs_diff, r.max_abs_diff);
        s.mass_a += r.mass_fraction_a;
        s.mass_b += r.mass_fraction_b;
        ++s.count;
        return r;
    };

    constexpr std::size_t kPanelScale = 2;
    for (std::size_t n = 0; n < test.size(); ++n) {
        const Tensor& x = test.images[n];
        const std::size_t cls = predicted[n];
        const auto cams = cam_maps(*base, atk, x, cls, layers);
        for (const auto& layer : layers) {
            const Region region = tap_region(net, cfg, layer);
            for (CamVariant variant : {CamVariant::gap, CamVariant::elementwise}) {
                for (ScoreKind kind : {ScoreKind::pre_softmax, ScoreKind::post_softmax}) {
                    const std::string key = std::string(to_string(variant)) + "/" + layer + "/" + std::string(to_string(kind));
                    const ComparisonReport r =
                        record(n, "gradcam", std::string(to_string(variant)), layer, kind, cams.at(key), region);
                    if (layer == tap_layer && kind == ScoreKind::pre_softmax) {
                        if (variant == CamVariant::gap && r.spearman) {
                            gap_spearman_sum += *r.spearman;
                            ++gap_spearman_count;
                        }
                        if (variant == CamVariant::elementwise) elementwise_mass_sum += r.mass_fraction_b;
                    }
                }
                if (layer != tap_layer) continue;
                // Rows: pre, post. Columns: original, attacked.
                std::vector<std::vector<Image>> cells;
                for (ScoreKind kind : {ScoreKind::pre_softmax, ScoreKind::post_softmax}) {
                    const MapPair& maps =
                        cams.at(std::string(to_string(variant)) + "/" + layer + "/" + std::string(to_string(kind)));
                    cells.push_back({render_overlay(x, maps.original, kPanelScale),
                                     render_overlay(x, maps.attacked, kPanelScale)});
                }
                ++panel_count;
                if (cells[1][0] == cells[1][1]) ++post_identical;
                char name[64];
                std::snprintf(name, sizeof name, "image_%04zu_%s.ppm", n, std::string(to_string(variant)).c_str());
                write_netpbm(dir / "panels" / name, tile(cells));
            }
        }
        for (ScoreKind kind : {ScoreKind::pre_softmax, ScoreKind::post_softmax}) {
            const MapPair sal{abs_grid(channel_sum(saliency(*base, x, {kind, cls}).values)),
                              abs_grid(channel_sum(saliency(atk, x, {kind, cls}).values))};
            record(n, "saliency", "", std::string(kInputName), kind, sal, input_region);
            const Tensor baseline(x.shape());
            const MapPair ig{
                abs_grid(channel_sum(integrated_gradients(*base, x, baseline, cls, kDefaultIgSteps, kind).values)),
                abs_grid(channel_sum(integrated_gradients(atk, x, baseline, cls, kDefaultIgSteps, kind).values))};
            record(n, "ig", "", std::string(kInputName), kind, ig, input_region);
        }
    }
    write_file_atomic(dir / "metrics.csv", csv);

    Json summary_json = Json::array();
    for (const auto& [key, s] : summary) {
        summary_json.push_back(
            {{"key", key},
             {"images", s.count},
             {"mean_spearman", s.spearman_count ? Json(s.spearman_sum / static_cast<double>(s.spearman_count)) : Json(nullptr)},
             {"undefined_correlations", s.undefined},
             {"max_abs_diff", s.max_abs_diff},
             {"mean_mass_fraction_original", s.mass_a / static_cast<double>(s.count)},
             {"mean_mass_fraction_attacked", s.mass_b / static_cast<double>(s.count)}});
    }

    // A rank statistic only sees the spatially spread gap shift; the
    // elementwise shift moves mass into the single tap cell.
    const double gap_pre_spearman = gap_spearman_count ? gap_spearman_sum / static_cast<double>(gap_spearman_count) : 1.0;
    const double elementwise_tap_mass = elementwise_mass_sum / static_cast<double>(test.size());
    std::vector<Criterion> criteria = v.criteria;
    criteria.push_back({"heatmap_corruption_rate", corruption, kCorruptionThreshold, false});
    criteria.push_back({"original_localization_rate", localization, kLocalizationThreshold, false});
    criteria.push_back({"post_panel_identical_fraction",
                        panel_count ? static_cast<double>(post_identical) / static_cast<double>(panel_count) : 0.0,
                        1.0, false});
    criteria.push_back({"pre_gap_mean_spearman", gap_pre_spearman, kDivergenceSpearman, true});
    criteria.push_back({"pre_elementwise_attacked_tap_mass", elementwise_tap_mass, kTapMassThreshold, false});

    Json criteria_json = Json::array();
    for (const auto& c : criteria) criteria_json.push_back(to_json(c));
    const Json report{
        {"format", kReportFormat},
        {"version", kReportVersion},
        {"tool", {{"name", kToolName}, {"version", kToolVersion}}},
        {"command", "demo"},
        {"config",
         {{"seed", a.seed},
          {"train", trained.metrics.at("config")},
          {"test_set", {{"seed", test.seed}, {"count", test.size()}, {"image_size", test.image_size}}},
          {"attack", to_json(cfg)},
          {"calibration", calibration},
          {"tolerances", to_json(opts.tolerances)},
          {"ig_steps", kDefaultIgSteps},
          {"heatmap_layers", layers},
          {"heatmap_class", "predicted"}}},
        {"training",
         {{"initial_loss", trained.result.initial_loss},
          {"final_epoch_loss", trained.result.epoch_loss.empty() ? trained.result.initial_loss : trained.result.epoch_loss.back()},
          {"train_accuracy", trained.result.train_accuracy},
          {"test_accuracy", accuracy(*base, test)}}},
        {"equivalence", to_json(v.equivalence)},
        {"attribution",
         {{"gradcam_gap_max_deviation", {{"value", v.gradcam_gap_deviation}, {"tolerance", opts.tolerances.attribution}}},
          {"gradcam_elementwise_max_deviation",
           {{"value", v.gradcam_elementwise_deviation}, {"tolerance", opts.tolerances.attribution}}},
          {"ig_max_deviation", {{"value", v.ig_deviation}, {"tolerance", opts.tolerances.attribution}}}}},
        {"summary", std::move(summary_json)},
        {"comparisons", std::move(comparisons)},
        {"criteria", std::move(criteria_json)},
        {"passed", all_passed(criteria)}};
    write_file_atomic(dir / "report.json", dump(report));

    const int code = report_verdict(criteria, out, err);
    const double seconds = std::chrono::duration<double>(clock::now() - start).count();
    out << "demo finished in " << seconds << " s, artifacts in " << dir.string() << "\n";
    return code;
}

} // namespace

SyntheticDataset reference_test_set(std::uint64_t seed, std::size_t count, std::size_t image_size)
{
    return gen_blob_dataset(count, image_size, derive_seed(seed, 0x7e57));
}

std::size_t grid_quadrant(std::size_t row, std::size_t col, std::size_t rows, std::size_t cols)
{
    return (2 * row < rows ? 0 : 2) + (2 * col < cols ? 0 : 1);
}

double corruption_rate(const AttackedNetwork& atk, std::span<const Tensor> inputs, std::span<const std::size_t> classes)
{
    if (inputs.empty() || inputs.size() != classes.size()) throw std::invalid_argument("need one class per input");
    const AttackConfig& cfg = atk.config();
    std::size_t hits = 0;
    for (std::size_t n = 0; n < inputs.size(); ++n) {
        const Heatmap h = grad_cam(atk, inputs[n], classes[n], cfg.tap_layer, ScoreKind::pre_softmax,
                                   CamVariant::elementwise);
        if (argmax_flat(h.grid) == cfg.row * h.grid.dim(1) + cfg.col) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(inputs.size());
}

double localization_rate(ModelRef model, const SyntheticDataset& data, std::string_view layer)
{
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    std::size_t hits = 0;
    for (std::size_t n = 0; n < data.size(); ++n) {
        const Heatmap h =
            grad_cam(model, data.images[n], data.labels[n], layer, ScoreKind::post_softmax, CamVariant::elementwise);
        const std::size_t peak = argmax_flat(h.grid);
        const std::size_t cols = h.grid.dim(1);
        if (grid_quadrant(peak / cols, peak % cols, h.grid.dim(0), cols) == data.labels[n]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

VerifyOutcome verify_models(ModelRef orig, ModelRef atk, std::span<const Tensor> probes,
                            std::span<const LabeledSample> batch, const VerifyOptions& opts)
{
    VerifyOutcome v;
    v.equivalence = verify_equivalence(orig, atk, probes, batch, opts.tolerances);
    const Network& net = orig.network();
    const std::size_t count = std::min(opts.attribution_probes, probes.size());
    const auto subset = probes.first(count);
    v.presoftmax_gradient_deviation = max_activation_gradient_deviation(orig, atk, subset, ScoreKind::pre_softmax);

    for (const auto& x : subset) {
        const ForwardTrace to = forward(orig, x);
        const ForwardTrace ta = forward(atk, x);
        for (std::size_t c = 0; c < net.class_count(); ++c) {
            const GradientSet go = backward(orig, to, {ScoreKind::post_softmax, c});
            const GradientSet ga = backward(atk, ta, {ScoreKind::post_softmax, c});
            for (const auto& layer : net.layers()) {
                const std::string& name = layer.name;
                if (!net.is_spatial(name)) continue;
                for (CamVariant variant : {CamVariant::gap, CamVariant::elementwise}) {
                    Tensor a = cam_combine(to.activation(name), go.activation(name), variant);
                    Tensor b = cam_combine(ta.activation(name), ga.activation(name), variant);
                    for (double& e : a.data()) e = std::max(e, 0.0);
                    for (double& e : b.data()) e = std::max(e, 0.0);
                    double& slot = variant == CamVariant::gap ? v.gradcam_gap_deviation : v.gradcam_elementwise_deviation;
                    slot = std::max(slot, max_abs_diff(a, b));
                }
            }
            const Tensor baseline(x.shape());
            const AttributionMap ia = integrated_gradients(orig, x, baseline, c, opts.ig_steps, ScoreKind::post_softmax);
            const AttributionMap ib = integrated_gradients(atk, x, baseline, c, opts.ig_steps, ScoreKind::post_softmax);
            v.ig_deviation = std::max(v.ig_deviation, max_abs_diff(ia.values, ib.values));
        }
    }

    const EquivalenceReport& e = v.equivalence;
    const Tolerances& t = opts.tolerances;
    v.criteria = {
        {"output_equivalence", e.max_output_deviation, t.output, true},
        {"prediction_agreement", e.prediction_agreement, 1.0, false},
        {"postsoftmax_gradient_equality", e.max_postsoftmax_gradient_deviation, t.gradient, true},
        {"training_gradient_equality", e.max_parameter_gradient_deviation, t.parameter_gradient, true},
        {"gradcam_gap_invariance", v.gradcam_gap_deviation, t.attribution, true},
        {"gradcam_elementwise_invariance", v.gradcam_elementwise_deviation, t.attribution, true},
        {"ig_invariance", v.ig_deviation, t.attribution, true},
    };
    return v;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err)
{
    CLI::App app{"Logit-shift attribution experiments"};
    app.name("logitshift");
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Train the reference CNN on synthetic blob images");
    train_cmd->add_option("--seed", train.seed, "Seed for data, initialization and batch order");
    train_cmd->add_option("--epochs", train.epochs, "Training epochs");
    train_cmd->add_option("--lr", train.lr, "SGD learning rate");
    train_cmd->add_option("--batch", train.batch, "Minibatch size");
    train_cmd->add_option("--size", train.size, "Image side length");
    train_cmd->add_option("--count", train.count, "Training images");
    train_cmd->add_option("--out", train.out, "Model file to write")->required();
    train_cmd->add_option("--metrics", train.metrics, "Loss-curve file (default: <out>.metrics.json)");

    AttackArgs attack;
    auto* attack_cmd = app.add_subcommand("attack", "Add the logit-shift branch to a model");
    attack_cmd->add_option("--model", attack.model, "Base model file")->required();
    attack_cmd->add_option("--out", attack.out, "Attacked model file to write")->required();
    attack_cmd->add_option("--k", attack.k, "Gain K");
    attack_cmd->add_option("--tap-i", attack.tap_i, "Tap row");
    attack_cmd->add_option("--tap-j", attack.tap_j, "Tap column");
    attack_cmd->add_option("--tap-layer", attack.tap_layer, "Tap layer (default: final pooling layer)");
    attack_cmd->add_option("--control-class", attack.control_class,
                           "Shift only this class's logit (negative control, not output-preserving)");

    ExplainArgs explain;
    auto* explain_cmd = app.add_subcommand("explain", "Compute one heatmap for one image");
    explain_cmd->add_option("--model", explain.model, "Model file")->required();
    explain_cmd->add_option("--image", explain.image, "PGM or PPM image")->required();
    explain_cmd->add_option("--class", explain.class_index, "Class to explain (default: predicted)");
    explain_cmd->add_option("--method", explain.method, "saliency, gradcam or ig")
        ->check(CLI::IsMember({"saliency", "gradcam", "ig"}));
    explain_cmd->add_option("--variant", explain.variant, "Grad-CAM variant: gap or elementwise")
        ->check(CLI::IsMember({"gap", "elementwise"}));
    explain_cmd->add_option("--score", explain.score, "pre or post")->check(CLI::IsMember({"pre", "post"}));
    explain_cmd->add_option("--layer", explain.layer, "Grad-CAM target layer (default: last spatial layer)");
    explain_cmd->add_option("--steps", explain.steps, "Integrated-gradients steps")->check(CLI::PositiveNumber);
    explain_cmd->add_option("--out-prefix", explain.out_prefix, "Prefix for the output files")->required();

    VerifyArgs verify;
    auto* verify_cmd = app.add_subcommand("verify", "Check that an attacked model preserves outputs and training");
    verify_cmd->add_option("--model", verify.model, "Original model file")->required();
    verify_cmd->add_option("--attacked", verify.attacked, "Attacked model file")->required();
    auto* probes_opt = verify_cmd->add_option("--probes", verify.probes, "Dataset directory with probe images");
    auto* random_opt = verify_cmd->add_option("--random", verify.random, "Number of uniform random probes");
    probes_opt->excludes(random_opt);
    verify_cmd->add_option("--seed", verify.seed, "Seed for random probes");
    verify_cmd->add_option("--report", verify.report, "JSON report to write")->required();
    verify_cmd->add_option("--attribution-probes", verify.attribution_probes, "Probes used for attribution checks");
    verify_cmd->add_option("--ig-steps", verify.ig_steps, "Integrated-gradients steps")->check(CLI::PositiveNumber);

    DemoArgs demo;
    auto* demo_cmd = app.add_subcommand("demo", "Train, attack, verify and render the full experiment");
    demo_cmd->add_option("--out-dir", demo.out_dir, "Directory for all artifacts")->required();
    demo_cmd->add_option("--seed", demo.seed, "Experiment seed");

    try {
        app.parse(argc, argv);
        if (verify_cmd->parsed() && !verify.random && verify.probes.empty()) {
            throw UsageError("verify needs --probes DIR or --random N");
        }
    }
    catch (const CLI::ParseError& e) {
        // Help and version requests exit 0; everything else is a usage error.
        return app.exit(e, out, err) == 0 ? kExitPass : kExitUsage;
    }
    catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(train, out);
        if (attack_cmd->parsed()) return cmd_attack(attack, out);
        if (explain_cmd->parsed()) return cmd_explain(explain, out);
        if (verify_cmd->parsed()) return cmd_verify(verify, out, err);
        return cmd_demo(demo, out, err);
    }
    catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    std::vector<const char*> argv{"logitshift"};
    for (const auto& a : args) argv.push_back(a.c_str());
    return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

} // namespace logitshift::cli
