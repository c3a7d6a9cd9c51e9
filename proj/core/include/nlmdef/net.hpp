#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlmdef/image.hpp"

namespace nlmdef {

struct ShapeMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// One residual block: 3x3 conv (stride below) -> ReLU -> 3x3 conv, added to
/// the skip path. The skip is the identity when shape is preserved and a
/// strided 1x1 projection otherwise. No activation after the add, so a block
/// with zeroed conv weights is exactly the identity map.
struct BlockSpec {
    int channels = 16;
    int stride = 1;

    bool operator==(const BlockSpec&) const = default;
};

struct ArchSpec {
    int in_channels = 1;
    int in_height = 28;
    int in_width = 28;
    int stem_channels = 16;
    std::vector<BlockSpec> blocks;
    int num_classes = 10;

    bool operator==(const ArchSpec&) const = default;

    /// stem 16 -> two identity blocks at 16 -> projection block to 32 at
    /// stride 2 -> identity block at 32 -> global average pool -> affine.
    static ArchSpec desk_scale(int in_channels, int in_height, int in_width, int num_classes = 10);

    /// Channel count entering the global average pool.
    int feature_channels() const { return blocks.empty() ? stem_channels : blocks.back().channels; }

    void validate() const;
};

/// One contiguous slice of the flat parameter vector.
struct ParamPiece {
    std::string name;
    std::size_t offset = 0;
    std::size_t count = 0;
    std::size_t fan_in = 0;  // 0 for biases
    bool is_bias = false;
};

/// Declared parameter order: stem conv w,b; per block conv1 w,b, conv2 w,b,
/// [projection w,b]; final affine w,b. Checkpoints store arrays in this order.
std::vector<ParamPiece> param_layout(const ArchSpec& arch);
std::size_t param_count(const ArchSpec& arch);

struct MicroResNet {
    ArchSpec arch;
    std::vector<double> params;
};

/// Weights ~ N(0, 2/fan_in), biases zero, drawn in declared parameter order
/// from a seeded generator.
MicroResNet init_params(const ArchSpec& arch, std::uint64_t seed);

/// Logits for a batch, row-major batch x num_classes. Throws ShapeMismatch if
/// any image disagrees with the architecture's input shape.
std::vector<double> forward(const MicroResNet& net, std::span<const ImageTensor> batch, int threads = 1);

struct LossGrad {
    double loss = 0.0;
    std::vector<double> dlogits;  // (softmax - onehot) / batch
};

/// Mean softmax cross-entropy with max-subtraction stabilization.
LossGrad cross_entropy_loss(std::span<const double> logits, std::span<const int> labels, int num_classes);

struct GradientSet {
    std::vector<double> params;  // same layout as MicroResNet::params
    std::vector<double> input;   // batch x C x H x W, the loss gradient at the input
    std::vector<double> logits;  // forward logits, batch x num_classes
    double loss = 0.0;
};

/// Analytic gradients of the mean cross-entropy over the batch with respect
/// to every parameter and to the input pixels. Per-item contributions are
/// reduced in item order regardless of thread count.
GradientSet backward(const MicroResNet& net, std::span<const ImageTensor> batch, std::span<const int> labels,
                     int threads = 1);

struct TrainConfig {
    double learning_rate = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    int epochs = 30;
    int batch_size = 256;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Cosine annealing with T_max = cfg.epochs and eta_min = 0, stepped once per
/// epoch: lr(t) = lr_max * (1 + cos(pi*t/T_max)) / 2.
double cosine_lr(int epoch, const TrainConfig& cfg);

/// Momentum SGD with decay folded into the gradient:
/// g' = g + wd*w; v = momentum*v + g'; w -= lr*v.
void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity, double lr,
              const TrainConfig& cfg);

struct EpochStats {
    int epoch = 0;
    double learning_rate = 0.0;
    double mean_loss = 0.0;
    double train_accuracy = 0.0;
};

struct TrainResult {
    MicroResNet net;
    std::vector<EpochStats> history;
};

/// Seeded Fisher-Yates shuffle per epoch (seed + epoch), sequential batches,
/// cosine learning rate. Bit-deterministic given the config seed.
TrainResult train_model(const MicroResNet& initial, const LabeledDataset& train, const TrainConfig& cfg,
                        int threads = 1);

/// Fraction of images whose argmax logit equals the label; argmax ties break
/// toward the lowest class index.
double evaluate_accuracy(const MicroResNet& net, const LabeledDataset& ds, int threads = 1);

/// Index of the largest value, lowest index on ties.
int argmax_class(std::span<const double> logits_row);

// Checkpoints: binary, little-endian, layout in docs/formats.md.
void save_checkpoint(const MicroResNet& net, std::uint64_t seed, int epoch, const std::filesystem::path& path);

struct Checkpoint {
    MicroResNet net;
    std::uint64_t seed = 0;
    int epoch = 0;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

namespace detail {

/// Loss gradient at the input only; skips parameter-gradient accumulation.
std::vector<double> input_gradients(const MicroResNet& net, std::span<const ImageTensor> batch,
                                    std::span<const int> labels, int threads = 1);

}  // namespace detail

}  // namespace nlmdef
