#include "nlmdef/adversarial.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nlmdef/parallel.hpp"

namespace nlmdef {

void FgsmParams::validate() const {
    if (eps_list.empty()) throw std::invalid_argument("FgsmParams: eps_list must not be empty");
    double prev = -1.0;
    for (double e : eps_list) {
        if (!(e >= 0.0) || !std::isfinite(e)) throw std::invalid_argument("FgsmParams: eps must be >= 0");
        if (e <= prev) throw std::invalid_argument("FgsmParams: eps_list must be strictly increasing");
        prev = e;
    }
    if (!(clip_min < clip_max)) throw std::invalid_argument("FgsmParams: clip_min must be below clip_max");
}

namespace {

ImageTensor apply_sign_step(const ImageTensor& x, const double* grad, double eps, double clip_min, double clip_max) {
    std::vector<double> out(x.data().size());
    const double* src = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double g = grad[i];
        const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
        double v = src[i] + eps * s;
        v = std::min(std::max(v, clip_min), clip_max);
        out[i] = v;
    }
    return ImageTensor(x.channels(), x.height(), x.width(), std::move(out));
}

}  // namespace

std::vector<ImageTensor> fgsm_perturb_batch(const MicroResNet& net, std::span<const ImageTensor> images,
                                            std::span<const int> labels, double eps, int threads) {
    if (!(eps >= 0.0) || !std::isfinite(eps)) throw std::invalid_argument("fgsm_perturb: eps must be >= 0");
    if (images.size() != labels.size()) throw ShapeMismatch("fgsm_perturb: image/label count mismatch");
    std::vector<ImageTensor> out;
    out.reserve(images.size());
    if (eps == 0.0) {
        // eps * sign(g) vanishes identically, so skip the gradient pass
        out.assign(images.begin(), images.end());
        return out;
    }
    const std::vector<double> grads = detail::input_gradients(net, images, labels, threads);
    const std::size_t item = grads.size() / images.size();
    for (std::size_t i = 0; i < images.size(); ++i) {
        out.push_back(apply_sign_step(images[i], grads.data() + i * item, eps, 0.0, 1.0));
    }
    return out;
}

ImageTensor fgsm_perturb(const MicroResNet& net, const ImageTensor& x, int label, double eps) {
    std::vector<ImageTensor> batch = fgsm_perturb_batch(net, std::span<const ImageTensor>(&x, 1),
                                                        std::span<const int>(&label, 1), eps, 1);
    return std::move(batch.front());
}

RobustnessReport robustness_sweep(const MicroResNet& net, const LabeledDataset& test, const FgsmParams& params,
                                  const SweepContext& context, int threads, const SweepObserver* observer) {
    params.validate();
    if (test.size() == 0) throw std::invalid_argument("robustness_sweep: empty test set");

    RobustnessReport rows;
    constexpr std::size_t kBatch = 256;
    for (double eps : params.eps_list) {
        double accuracy = 0.0;
        if (eps == 0.0) {
            accuracy = evaluate_accuracy(net, test, threads);
            if (observer != nullptr) {
                for (std::size_t i = 0; i < test.size(); ++i) (*observer)(test.image(i), test.image(i), eps);
            }
        } else {
            std::size_t correct = 0;
            for (std::size_t start = 0; start < test.size(); start += kBatch) {
                const std::size_t stop = std::min(test.size(), start + kBatch);
                std::vector<ImageTensor> clean(test.images().begin() + static_cast<std::ptrdiff_t>(start),
                                               test.images().begin() + static_cast<std::ptrdiff_t>(stop));
                std::vector<int> labels(test.labels().begin() + static_cast<std::ptrdiff_t>(start),
                                        test.labels().begin() + static_cast<std::ptrdiff_t>(stop));
                const std::vector<ImageTensor> adv = fgsm_perturb_batch(net, clean, labels, eps, threads);
                const std::vector<double> logits = forward(net, adv, threads);
                const int classes = net.arch.num_classes;
                for (std::size_t i = 0; i < adv.size(); ++i) {
                    const int pred = argmax_class(std::span<const double>(
                        logits.data() + i * static_cast<std::size_t>(classes), static_cast<std::size_t>(classes)));
                    if (pred == labels[i]) ++correct;
                    if (observer != nullptr) (*observer)(clean[i], adv[i], eps);
                }
            }
            accuracy = static_cast<double>(correct) / static_cast<double>(test.size());
        }
        ReportRow row;
        row.model_id = context.model_id;
        row.train_source = context.train_source;
        row.transform_h = context.transform_h;
        row.seed = context.seed;
        row.eps = eps;
        row.accuracy = accuracy;
        row.n = static_cast<long>(test.size());
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<Misclassification> misclassification_grid(const MicroResNet& net, const LabeledDataset& test, double eps,
                                                      std::size_t k, int threads) {
    std::vector<Misclassification> out;
    if (k == 0 || test.size() == 0) return out;

    constexpr std::size_t kBatch = 256;
    const int classes = net.arch.num_classes;
    for (std::size_t start = 0; start < test.size() && out.size() < k; start += kBatch) {
        const std::size_t stop = std::min(test.size(), start + kBatch);
        std::vector<ImageTensor> clean(test.images().begin() + static_cast<std::ptrdiff_t>(start),
                                       test.images().begin() + static_cast<std::ptrdiff_t>(stop));
        std::vector<int> labels(test.labels().begin() + static_cast<std::ptrdiff_t>(start),
                                test.labels().begin() + static_cast<std::ptrdiff_t>(stop));
        const std::vector<double> clean_logits = forward(net, clean, threads);
        std::vector<ImageTensor> adv = fgsm_perturb_batch(net, clean, labels, eps, threads);
        const std::vector<double> adv_logits = forward(net, adv, threads);
        for (std::size_t i = 0; i < adv.size() && out.size() < k; ++i) {
            const auto row = [&](const std::vector<double>& l) {
                return std::span<const double>(l.data() + i * static_cast<std::size_t>(classes),
                                               static_cast<std::size_t>(classes));
            };
            const int before = argmax_class(row(clean_logits));
            const int after = argmax_class(row(adv_logits));
            if (before != after) {
                out.push_back(Misclassification{std::move(adv[i]), labels[i], after, start + i});
            }
        }
    }
    return out;
}

}  // namespace nlmdef
