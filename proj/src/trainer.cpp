#include "logitshift/trainer.hpp"

#include "logitshift/file_util.hpp"
#include "logitshift/image_io.hpp"
#include "logitshift/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace logitshift {

namespace {

constexpr double kNoiseLevel = 0.1;

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng)
{
    Tensor t(std::move(shape));
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : t.data()) v = stddev * rng.normal();
    return t;
}

} // namespace

std::vector<LabeledSample> SyntheticDataset::samples() const
{
    std::vector<LabeledSample> out;
    out.reserve(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) out.push_back({images[i], labels[i]});
    return out;
}

std::size_t quadrant_of(double row, double col, std::size_t image_size)
{
    const double half = static_cast<double>(image_size / 2);
    return (row < half ? 0 : 2) + (col < half ? 0 : 1);
}

Tensor blob_component(std::size_t image_size, double center_row, double center_col)
{
    const double sigma = static_cast<double>(image_size) / 10.0;
    Tensor blob({image_size, image_size, 1});
    for (std::size_t i = 0; i < image_size; ++i) {
        for (std::size_t j = 0; j < image_size; ++j) {
            const double dr = static_cast<double>(i) - center_row;
            const double dc = static_cast<double>(j) - center_col;
            blob.at(i, j, 0) = std::exp(-(dr * dr + dc * dc) / (2.0 * sigma * sigma));
        }
    }
    return blob;
}

SyntheticDataset gen_blob_dataset(std::size_t count, std::size_t image_size, std::uint64_t seed)
{
    if (count < kBlobClasses) throw std::invalid_argument("dataset needs at least one image per class");
    if (image_size < 8) throw std::invalid_argument("image size must be at least 8");

    SyntheticDataset data;
    data.image_size = image_size;
    data.seed = seed;
    const std::size_t half = image_size / 2;
    for (std::size_t n = 0; n < count; ++n) {
        Rng rng(derive_seed(seed, n));
        const std::size_t label = n % kBlobClasses;
        // Centers stay one pixel away from the quadrant edges so the nearest
        // pixel of the blob peak is inside the quadrant.
        const double row0 = label >= 2 ? static_cast<double>(half) : 0.0;
        const double col0 = label % 2 == 1 ? static_cast<double>(half) : 0.0;
        const double row_span = static_cast<double>((label >= 2 ? image_size - half : half)) - 3.0;
        const double col_span = static_cast<double>((label % 2 == 1 ? image_size - half : half)) - 3.0;
        const double cr = row0 + 1.0 + row_span * rng.uniform();
        const double cc = col0 + 1.0 + col_span * rng.uniform();

        Tensor image = blob_component(image_size, cr, cc);
        for (double& v : image.data()) v = std::min(1.0, v + kNoiseLevel * rng.uniform());
        data.images.push_back(std::move(image));
        data.labels.push_back(label);
        data.centers.emplace_back(cr, cc);
    }
    return data;
}

Network init_network(std::uint64_t seed, std::size_t image_size)
{
    if (image_size < 4 || image_size % 4 != 0) throw std::invalid_argument("image size must be a multiple of 4");
    Rng rng(seed);
    const std::size_t flat = (image_size / 4) * (image_size / 4) * 16;
    std::vector<Layer> layers;
    layers.push_back({"conv1", Conv2D{he_normal({8, 3, 3, 1}, 9, rng), Tensor({8}), 1, 1}});
    layers.push_back({"relu1", ReLU{}});
    layers.push_back({"pool1", MaxPool{2, 2, 2}});
    layers.push_back({"conv2", Conv2D{he_normal({16, 3, 3, 8}, 72, rng), Tensor({16}), 1, 1}});
    layers.push_back({"relu2", ReLU{}});
    layers.push_back({"pool2", MaxPool{2, 2, 2}});
    layers.push_back({"flatten", Flatten{}});
    layers.push_back({"dense", Dense{he_normal({kBlobClasses, flat}, flat, rng), Tensor({kBlobClasses})}});
    return Network({image_size, image_size, 1}, std::move(layers));
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, const TrainConfig& cfg, std::size_t epoch)
{
    if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");
    Rng rng(derive_seed(cfg.seed, epoch));
    const auto order = permutation(count, rng);
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t start = 0; start < count; start += cfg.batch_size) {
        const std::size_t end = std::min(count, start + cfg.batch_size);
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                             order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    return batches;
}

void sgd_step(Network& net, std::span<const std::optional<ParameterGradient>> grads, double lr)
{
    net.update_parameters([&](std::size_t layer, std::span<double> w, std::span<double> b) {
        const auto& g = grads[layer];
        if (!g) throw std::invalid_argument("missing gradient for a parameter layer");
        for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g->weights[i];
        for (std::size_t i = 0; i < b.size(); ++i) b[i] -= lr * g->bias[i];
    });
}

double accuracy(ModelRef model, const SyntheticDataset& data)
{
    if (data.size() == 0) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (predict(model, data.images[i]) == data.labels[i]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

double mean_loss(ModelRef model, const SyntheticDataset& data)
{
    double total = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) total += cross_entropy(forward(model, data.images[i]), data.labels[i]);
    return total / static_cast<double>(data.size());
}

namespace {

std::vector<LabeledSample> gather(const SyntheticDataset& data, const std::vector<std::size_t>& idx)
{
    std::vector<LabeledSample> batch;
    batch.reserve(idx.size());
    for (auto i : idx) batch.push_back({data.images[i], data.labels[i]});
    return batch;
}

void validate(const Network& net, const SyntheticDataset& data, const TrainConfig& cfg)
{
    if (data.size() == 0) throw std::invalid_argument("training data is empty");
    if (net.class_count() != kBlobClasses) throw std::invalid_argument("network must have 4 output classes");
    if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) {
        throw std::invalid_argument("learning rate must be finite and non-negative");
    }
    if (cfg.batch_size == 0) throw std::invalid_argument("batch size must be positive");
    for (const auto& x : data.images) {
        if (x.shape() != net.input_shape()) {
            throw std::invalid_argument("image shape " + to_string(x.shape()) + " does not match network input " +
                                        to_string(net.input_shape()));
        }
    }
}

[[noreturn]] void diverged(std::size_t epoch, std::size_t step, double lr, const std::string& detail)
{
    throw std::runtime_error("training diverged at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                             " (learning rate " + std::to_string(lr) + "): " + detail);
}

} // namespace

TrainResult train_sgd(Network net, const SyntheticDataset& data, const TrainConfig& cfg)
{
    validate(net, data, cfg);
    TrainResult result{std::move(net), 0.0, {}, 0.0, 0};
    result.initial_loss = mean_loss(result.network, data);

    std::vector<double> sample_loss(data.size());
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (const auto& idx : epoch_batches(data.size(), cfg, epoch)) {
            BatchGradient g;
            try {
                g = batch_gradient(result.network, gather(data, idx));
            }
            catch (const std::invalid_argument& e) {
                // Shapes were validated up front; this is overflow in the logits.
                diverged(epoch, result.steps, cfg.learning_rate, e.what());
            }
            if (!std::isfinite(g.loss)) diverged(epoch, result.steps, cfg.learning_rate, "non-finite loss");
            for (std::size_t k = 0; k < idx.size(); ++k) sample_loss[idx[k]] = g.sample_losses[k];
            sgd_step(result.network, g.parameters, cfg.learning_rate);
            ++result.steps;
        }
        double total = 0.0;
        for (double l : sample_loss) total += l;
        result.epoch_loss.push_back(total / static_cast<double>(data.size()));
    }
    result.train_accuracy = accuracy(result.network, data);
    return result;
}

double max_parameter_difference(const Network& a, const Network& b)
{
    std::vector<std::pair<const Tensor*, const Tensor*>> pa, pb;
    a.visit_parameters([&](std::size_t, const Tensor& w, const Tensor& bias) { pa.emplace_back(&w, &bias); });
    b.visit_parameters([&](std::size_t, const Tensor& w, const Tensor& bias) { pb.emplace_back(&w, &bias); });
    if (pa.size() != pb.size()) throw std::invalid_argument("networks have different parameter layouts");
    double worst = 0.0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        worst = std::max(worst, max_abs_diff(*pa[i].first, *pb[i].first));
        worst = std::max(worst, max_abs_diff(*pa[i].second, *pb[i].second));
    }
    return worst;
}

LockstepReport lockstep_training_check(std::uint64_t seed, const SyntheticDataset& data, const TrainConfig& cfg,
                                       const AttackConfig& attack, std::optional<std::size_t> max_steps,
                                       std::optional<std::size_t> control_class)
{
    Network original = init_network(seed, data.image_size);
    Network attacked_base = original;
    validate(original, data, cfg);
    // The branch only needs a network to validate against; it is re-bound to
    // the evolving parameters through ModelRef below.
    const AttackedNetwork probe(std::make_shared<const Network>(original), attack, control_class);
    const LogitShift branch = probe.branch();

    LockstepReport report;
    const std::size_t limit = max_steps.value_or(static_cast<std::size_t>(-1));
    for (std::size_t epoch = 0; epoch < cfg.epochs && report.steps < limit; ++epoch) {
        for (const auto& idx : epoch_batches(data.size(), cfg, epoch)) {
            if (report.steps >= limit) break;
            const auto batch = gather(data, idx);
            const BatchGradient ga = batch_gradient(original, batch);
            const BatchGradient gb = batch_gradient(ModelRef(attacked_base, &branch), batch);
            if (!std::isfinite(ga.loss) || !std::isfinite(gb.loss)) {
                throw std::runtime_error("lockstep training diverged at step " + std::to_string(report.steps));
            }
            report.max_step_gradient_deviation =
                std::max(report.max_step_gradient_deviation, max_parameter_gradient_deviation(ga.parameters, gb.parameters));
            sgd_step(original, ga.parameters, cfg.learning_rate);
            sgd_step(attacked_base, gb.parameters, cfg.learning_rate);
            ++report.steps;
            report.max_parameter_divergence =
                std::max(report.max_parameter_divergence, max_parameter_difference(original, attacked_base));
        }
        report.checkpoint_divergence.push_back(max_parameter_difference(original, attacked_base));
    }
    return report;
}

void export_dataset(const SyntheticDataset& data, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["format"] = "logitshift.dataset";
    manifest["version"] = 1;
    manifest["seed"] = data.seed;
    manifest["image_size"] = data.image_size;
    auto& entries = manifest["images"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < data.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof name, "image_%04zu.pgm", i);
        write_netpbm(dir / name, gray_image(data.images[i], 65535));
        entries.push_back({{"file", name}, {"label", data.labels[i]}});
    }
    write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

std::vector<LabeledSample> load_dataset_dir(const std::filesystem::path& dir)
{
    const auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    if (manifest.value("format", "") != "logitshift.dataset") {
        throw std::runtime_error("'" + (dir / "manifest.json").string() + "' is not a dataset manifest");
    }
    std::vector<LabeledSample> samples;
    for (const auto& entry : manifest.at("images")) {
        const auto file = entry.at("file").get<std::string>();
        samples.push_back({to_grayscale_tensor(read_netpbm(dir / file)), entry.at("label").get<std::size_t>()});
    }
    return samples;
}

} // namespace logitshift
