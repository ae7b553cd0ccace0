#ifndef LOGITSHIFT_TRAINER_HPP
#define LOGITSHIFT_TRAINER_HPP

#include "logitshift/network.hpp"
#include "logitshift/surgery.hpp"
#include "logitshift/tensor.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <utility>
#include <vector>

namespace logitshift {

inline constexpr std::size_t kBlobClasses = 4;

/// Images of a single Gaussian blob on low-level noise, labelled by the
/// quadrant holding the blob center:
///   0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
struct SyntheticDataset
{
    std::vector<Tensor> images;
    std::vector<std::size_t> labels;
    /// Blob centers as (row, col) in pixel coordinates.
    std::vector<std::pair<double, double>> centers;
    std::size_t image_size = 0;
    std::uint64_t seed = 0;

    std::size_t size() const { return images.size(); }
    std::vector<LabeledSample> samples() const;
};

/// Quadrant label of a pixel position in an S x S image.
std::size_t quadrant_of(double row, double col, std::size_t image_size);

/// The noise-free blob: exp(-d^2 / (2 sigma^2)) with sigma = S/10.
Tensor blob_component(std::size_t image_size, double center_row, double center_col);

/// `count` images of size S x S x 1 with labels cycling 0,1,2,3. Each image
/// draws from its own substream of `seed`.
SyntheticDataset gen_blob_dataset(std::size_t count, std::size_t image_size, std::uint64_t seed);

/// Reference classifier for S x S x 1 inputs:
/// conv1(8, 3x3, pad 1) relu1 pool1(2x2) conv2(16, 3x3, pad 1) relu2 pool2(2x2)
/// flatten dense(4). Weights ~ N(0, 2/fan_in), biases zero.
Network init_network(std::uint64_t seed, std::size_t image_size = 32);

struct TrainConfig
{
    double learning_rate = 0.05;
    std::size_t epochs = 10;
    std::size_t batch_size = 10;
    std::uint64_t seed = 0;
};

/// Batches for one epoch: a seeded permutation cut into consecutive chunks.
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t count, const TrainConfig& cfg, std::size_t epoch);

/// theta -= lr * grad for every parameter.
void sgd_step(Network& net, std::span<const std::optional<ParameterGradient>> grads, double lr);

double accuracy(ModelRef model, const SyntheticDataset& data);

/// Mean cross-entropy over the dataset, summed in index order.
double mean_loss(ModelRef model, const SyntheticDataset& data);

struct TrainResult
{
    Network network;
    /// Mean loss over the dataset before any update.
    double initial_loss = 0.0;
    /// Mean per-sample loss seen during each epoch.
    std::vector<double> epoch_loss;
    double train_accuracy = 0.0;
    std::size_t steps = 0;
};

/// Plain minibatch SGD on mean cross-entropy. Throws std::runtime_error when
/// the loss stops being finite.
TrainResult train_sgd(Network net, const SyntheticDataset& data, const TrainConfig& cfg);

struct LockstepReport
{
    /// Max elementwise parameter difference over all checkpoints.
    double max_parameter_divergence = 0.0;
    /// Max elementwise difference of the per-step batch gradients.
    double max_step_gradient_deviation = 0.0;
    /// Parameter divergence after each completed epoch (and after the last step).
    std::vector<double> checkpoint_divergence;
    std::size_t steps = 0;
};

/// Trains an original and an attacked copy of init_network(seed) on the same
/// batch schedule, comparing gradients every step and parameters every step.
/// `max_steps` truncates the run; `control_class` swaps in the single-class
/// shift used as a negative control.
LockstepReport lockstep_training_check(std::uint64_t seed, const SyntheticDataset& data, const TrainConfig& cfg,
                                       const AttackConfig& attack, std::optional<std::size_t> max_steps = std::nullopt,
                                       std::optional<std::size_t> control_class = std::nullopt);

double max_parameter_difference(const Network& a, const Network& b);

/// Writes image_NNNN.pgm files (16-bit) plus manifest.json with labels and seed.
void export_dataset(const SyntheticDataset& data, const std::filesystem::path& dir);

/// Reads a directory written by export_dataset.
std::vector<LabeledSample> load_dataset_dir(const std::filesystem::path& dir);

} // namespace logitshift

#endif
