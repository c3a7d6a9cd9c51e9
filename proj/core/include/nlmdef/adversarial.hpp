#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "nlmdef/image.hpp"
#include "nlmdef/net.hpp"

namespace nlmdef {

/// Attack sweep settings: the perturbation budgets and the pixel domain the
/// attacked images are clipped back into.
struct FgsmParams {
    std::vector<double> eps_list = {0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3};
    double clip_min = 0.0;
    double clip_max = 1.0;

    void validate() const;
};

/// One measured point: accuracy of `model_id` under perturbation `eps`.
/// `seed` is empty for rows aggregated across seeds.
struct ReportRow {
    std::string model_id;
    std::string train_source;
    std::optional<double> transform_h;
    std::optional<long> seed;
    double eps = 0.0;
    double accuracy = 0.0;
    long n = 0;
};

using RobustnessReport = std::vector<ReportRow>;

/// Single-step sign attack against the given model at the true label:
/// x_adv = clip(x + eps * sign(dLoss/dx)). sign(0) contributes nothing, so
/// pixels with zero gradient are left untouched.
ImageTensor fgsm_perturb(const MicroResNet& net, const ImageTensor& x, int label, double eps);

/// Batched attack; per-image results equal the single-image call.
std::vector<ImageTensor> fgsm_perturb_batch(const MicroResNet& net, std::span<const ImageTensor> images,
                                            std::span<const int> labels, double eps, int threads = 1);

/// Identity columns for the rows a sweep produces.
struct SweepContext {
    std::string model_id;
    std::string train_source;
    std::optional<double> transform_h;
    std::optional<long> seed;
};

/// Called for every attacked image; lets callers audit the attack output.
using SweepObserver = std::function<void(const ImageTensor& clean, const ImageTensor& adversarial, double eps)>;

/// White-box accuracy at every eps in params.eps_list, attacking each test
/// image against this same model. The eps = 0 row is exactly the clean
/// accuracy. Rows come back ordered by eps.
RobustnessReport robustness_sweep(const MicroResNet& net, const LabeledDataset& test, const FgsmParams& params,
                                  const SweepContext& context, int threads = 1,
                                  const SweepObserver* observer = nullptr);

struct Misclassification {
    ImageTensor adversarial;
    int true_label = 0;
    int predicted = 0;     // model output on the attacked image
    std::size_t index = 0; // position in the test set
};

/// First k test images whose prediction flips under the attack at this eps,
/// in dataset order. May return fewer than k.
std::vector<Misclassification> misclassification_grid(const MicroResNet& net, const LabeledDataset& test, double eps,
                                                      std::size_t k, int threads = 1);

}  // namespace nlmdef
