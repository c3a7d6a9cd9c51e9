#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "nlmdef/adversarial.hpp"
#include "nlmdef/image.hpp"
#include "nlmdef/net.hpp"

namespace nlmdef {

class ConfigError : public std::runtime_error {
  public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error("config key '" + key + "': " + what), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

  private:
    std::string key_;
};

enum class DatasetKind { mnist, cifar10 };

/// Everything one experiment run needs. Defaults are the desk-scale recipe;
/// the full-scale settings are a flag away (train_subset = 0, epochs = 30).
struct ExperimentConfig {
    DatasetKind dataset = DatasetKind::mnist;
    std::filesystem::path train_images;            // MNIST IDX
    std::filesystem::path train_labels;
    std::filesystem::path test_images;
    std::filesystem::path test_labels;
    std::vector<std::filesystem::path> train_batches;  // CIFAR-10 binary
    std::filesystem::path test_batch;

    std::vector<double> h_values = {3.0, 5.0, 15.0};
    double sigma = 0.0;
    std::size_t train_subset = 10000;  // 0 = all
    std::size_t test_subset = 2000;    // 0 = all
    TrainConfig train{.epochs = 3};
    FgsmParams fgsm;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::filesystem::path output_dir;
    bool combine_h = false;  // also train one model on the union of all h sets
    int threads = 0;         // 0 = hardware

    void validate() const;
};

/// Flat `key = value` file, '#' comments. Unknown keys and malformed values
/// raise ConfigError naming the key. See docs/formats.md for the key list.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig parse_config_file(const std::filesystem::path& path);

/// Applies one key/value pair on top of an existing config (CLI overrides).
void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value);

/// Canonical serialization; parsing it back yields an equivalent config.
std::string format_config(const ExperimentConfig& cfg);

/// One denoised copy of the training set per h, labels preserved and
/// transform_h recorded. The input dataset is left untouched.
std::vector<LabeledDataset> augment_dataset(const LabeledDataset& train, const std::vector<double>& h_values,
                                            double sigma, int threads = 1);

/// Optional instrumentation for run_experiment.
struct RunHooks {
    const SweepObserver* sweep_observer = nullptr;
    std::function<void(const std::string&)> on_stage;  // human-readable progress lines
};

/// The full protocol: load data, build the per-h augmented training sets,
/// train a baseline and one model per h for every seed, sweep each model
/// against the clean test set, and write datasets, checkpoints, the config
/// snapshot, a log, and the CSV report under cfg.output_dir. Returns per-seed
/// rows plus per-model mean rows; identical runs produce identical bytes.
RobustnessReport run_experiment(const ExperimentConfig& cfg, const RunHooks* hooks = nullptr);

/// CSV with the pinned header `model_id,train_source,transform_h,seed,eps,accuracy,n`,
/// rows sorted by (model_id, seed, eps), reals with 6 decimals. Mean rows
/// print "mean" in the seed column and sort after numeric seeds.
std::string format_report(const RobustnessReport& report);
void emit_report(const RobustnessReport& report, const std::filesystem::path& path);
RobustnessReport parse_report_text(const std::string& text);
RobustnessReport parse_report_file(const std::filesystem::path& path);

/// Appends one mean row per (model_id, eps) group, averaging the per-seed
/// accuracies; n is summed.
RobustnessReport with_mean_rows(RobustnessReport report);

}  // namespace nlmdef
