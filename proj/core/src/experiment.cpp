#include "nlmdef/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "nlmdef/dataset_io.hpp"
#include "nlmdef/nlm.hpp"
#include "nlmdef/parallel.hpp"

namespace nlmdef {

namespace {

std::string shortest_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string fixed6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : s) {
        if (ch == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    parts.push_back(cur);
    return parts;
}

double parse_double(const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key, "expected a real number, got '" + text + "'");
    }
}

long long parse_int(const std::string& key, const std::string& text) {
    try {
        std::size_t used = 0;
        const long long v = std::stoll(text, &used);
        if (used != text.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ConfigError(key, "expected an integer, got '" + text + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(key, "expected true/false, got '" + text + "'");
}

std::vector<double> parse_double_list(const std::string& key, const std::string& text) {
    std::vector<double> out;
    if (trim(text).empty()) return out;
    for (const std::string& part : split(text, ',')) out.push_back(parse_double(key, trim(part)));
    return out;
}

}  // namespace

void ExperimentConfig::validate() const {
    train.validate();
    fgsm.validate();
    if (seeds.empty()) throw ConfigError("seeds", "at least one seed is required");
    for (double h : h_values) {
        if (!(h > 0.0) || !std::isfinite(h)) throw ConfigError("h_values", "h must be positive");
    }
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("sigma", "sigma must be >= 0");
    if (threads < 0) throw ConfigError("threads", "threads must be >= 0");
    if (output_dir.empty()) throw ConfigError("output_dir", "an output directory is required");
    if (dataset == DatasetKind::mnist) {
        if (train_images.empty() || train_labels.empty() || test_images.empty() || test_labels.empty()) {
            throw ConfigError("train_images", "MNIST runs need train_images/train_labels/test_images/test_labels");
        }
    } else {
        if (train_batches.empty() || test_batch.empty()) {
            throw ConfigError("train_batches", "CIFAR-10 runs need train_batches and test_batch");
        }
    }
}

void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    const std::string v = trim(value);
    if (key == "dataset") {
        if (v == "mnist") {
            cfg.dataset = DatasetKind::mnist;
        } else if (v == "cifar10") {
            cfg.dataset = DatasetKind::cifar10;
        } else {
            throw ConfigError(key, "expected mnist or cifar10, got '" + v + "'");
        }
    } else if (key == "train_images") {
        cfg.train_images = v;
    } else if (key == "train_labels") {
        cfg.train_labels = v;
    } else if (key == "test_images") {
        cfg.test_images = v;
    } else if (key == "test_labels") {
        cfg.test_labels = v;
    } else if (key == "train_batches") {
        cfg.train_batches.clear();
        for (const std::string& part : split(v, ',')) {
            if (!trim(part).empty()) cfg.train_batches.emplace_back(trim(part));
        }
    } else if (key == "test_batch") {
        cfg.test_batch = v;
    } else if (key == "h_values") {
        cfg.h_values = parse_double_list(key, v);
    } else if (key == "sigma") {
        cfg.sigma = parse_double(key, v);
    } else if (key == "train_subset") {
        cfg.train_subset = static_cast<std::size_t>(parse_int(key, v));
    } else if (key == "test_subset") {
        cfg.test_subset = static_cast<std::size_t>(parse_int(key, v));
    } else if (key == "epochs") {
        cfg.train.epochs = static_cast<int>(parse_int(key, v));
    } else if (key == "batch_size") {
        cfg.train.batch_size = static_cast<int>(parse_int(key, v));
    } else if (key == "learning_rate") {
        cfg.train.learning_rate = parse_double(key, v);
    } else if (key == "momentum") {
        cfg.train.momentum = parse_double(key, v);
    } else if (key == "weight_decay") {
        cfg.train.weight_decay = parse_double(key, v);
    } else if (key == "seeds") {
        cfg.seeds.clear();
        for (const std::string& part : split(v, ',')) {
            const long long s = parse_int(key, trim(part));
            if (s < 0) throw ConfigError(key, "seeds must be non-negative");
            cfg.seeds.push_back(static_cast<std::uint64_t>(s));
        }
    } else if (key == "eps_list") {
        cfg.fgsm.eps_list = parse_double_list(key, v);
    } else if (key == "output_dir") {
        cfg.output_dir = v;
    } else if (key == "combine_h") {
        cfg.combine_h = parse_bool(key, v);
    } else if (key == "threads") {
        cfg.threads = static_cast<int>(parse_int(key, v));
    } else {
        throw ConfigError(key, "unknown key");
    }
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(line, "line " + std::to_string(lineno) + " is not of the form key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(line, "line " + std::to_string(lineno) + " has an empty key");
        set_config_key(cfg, key, value);
    }
    return cfg;
}

ExperimentConfig parse_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(IoErrc::io_failure, "cannot open config: " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

std::string format_config(const ExperimentConfig& cfg) {
    std::ostringstream out;
    out << "dataset = " << (cfg.dataset == DatasetKind::mnist ? "mnist" : "cifar10") << "\n";
    if (!cfg.train_images.empty()) out << "train_images = " << cfg.train_images.string() << "\n";
    if (!cfg.train_labels.empty()) out << "train_labels = " << cfg.train_labels.string() << "\n";
    if (!cfg.test_images.empty()) out << "test_images = " << cfg.test_images.string() << "\n";
    if (!cfg.test_labels.empty()) out << "test_labels = " << cfg.test_labels.string() << "\n";
    if (!cfg.train_batches.empty()) {
        out << "train_batches = ";
        for (std::size_t i = 0; i < cfg.train_batches.size(); ++i) {
            if (i > 0) out << ",";
            out << cfg.train_batches[i].string();
        }
        out << "\n";
    }
    if (!cfg.test_batch.empty()) out << "test_batch = " << cfg.test_batch.string() << "\n";
    out << "h_values = ";
    for (std::size_t i = 0; i < cfg.h_values.size(); ++i) out << (i ? "," : "") << shortest_double(cfg.h_values[i]);
    out << "\n";
    out << "sigma = " << shortest_double(cfg.sigma) << "\n";
    out << "train_subset = " << cfg.train_subset << "\n";
    out << "test_subset = " << cfg.test_subset << "\n";
    out << "epochs = " << cfg.train.epochs << "\n";
    out << "batch_size = " << cfg.train.batch_size << "\n";
    out << "learning_rate = " << shortest_double(cfg.train.learning_rate) << "\n";
    out << "momentum = " << shortest_double(cfg.train.momentum) << "\n";
    out << "weight_decay = " << shortest_double(cfg.train.weight_decay) << "\n";
    out << "seeds = ";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) out << (i ? "," : "") << cfg.seeds[i];
    out << "\n";
    out << "eps_list = ";
    for (std::size_t i = 0; i < cfg.fgsm.eps_list.size(); ++i) {
        out << (i ? "," : "") << shortest_double(cfg.fgsm.eps_list[i]);
    }
    out << "\n";
    out << "output_dir = " << cfg.output_dir.string() << "\n";
    out << "combine_h = " << (cfg.combine_h ? "true" : "false") << "\n";
    out << "threads = " << cfg.threads << "\n";
    return out.str();
}

std::vector<LabeledDataset> augment_dataset(const LabeledDataset& train, const std::vector<double>& h_values,
                                            double sigma, int threads) {
    std::vector<LabeledDataset> out;
    for (double h : h_values) {
        NlmParams params;
        params.h = h;
        params.sigma = sigma;
        params.validate();
        std::vector<ImageTensor> denoised;
        denoised.reserve(train.size());
        if (train.size() == 0) {
            out.emplace_back(train.shape(), train.num_classes(), train.source_tag() + "-nlm-h" + shortest_double(h),
                             h);
            continue;
        }
        // denoise in parallel across images, order preserved
        std::vector<std::vector<double>> planes(train.size());
        parallel_for(static_cast<std::int64_t>(train.size()), threads, [&](std::int64_t lo, std::int64_t hi) {
            for (std::int64_t i = lo; i < hi; ++i) {
                planes[static_cast<std::size_t>(i)] =
                    denoise_image(train.image(static_cast<std::size_t>(i)), params).data();
            }
        });
        const ImageShape shape = train.shape();
        for (std::size_t i = 0; i < train.size(); ++i) {
            denoised.emplace_back(shape.channels, shape.height, shape.width, std::move(planes[i]));
        }
        out.emplace_back(std::move(denoised), train.labels(), train.num_classes(),
                         train.source_tag() + "-nlm-h" + shortest_double(h), h);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Report CSV
// ---------------------------------------------------------------------------

namespace {

constexpr const char* kReportHeader = "model_id,train_source,transform_h,seed,eps,accuracy,n";

bool row_less(const ReportRow& a, const ReportRow& b) {
    if (a.model_id != b.model_id) return a.model_id < b.model_id;
    // numeric seeds ascending, aggregate ("mean") rows after them
    if (a.seed.has_value() != b.seed.has_value()) return a.seed.has_value();
    if (a.seed.has_value() && *a.seed != *b.seed) return *a.seed < *b.seed;
    if (a.eps != b.eps) return a.eps < b.eps;
    return a.train_source < b.train_source;
}

void check_field(const std::string& field, const char* name) {
    if (field.find(',') != std::string::npos || field.find('\n') != std::string::npos) {
        throw std::invalid_argument(std::string("report ") + name + " must not contain commas or newlines");
    }
}

}  // namespace

std::string format_report(const RobustnessReport& report) {
    RobustnessReport rows = report;
    std::sort(rows.begin(), rows.end(), row_less);
    std::string out = kReportHeader;
    out += "\n";
    for (const ReportRow& r : rows) {
        check_field(r.model_id, "model_id");
        check_field(r.train_source, "train_source");
        out += r.model_id;
        out += ",";
        out += r.train_source;
        out += ",";
        if (r.transform_h) out += fixed6(*r.transform_h);
        out += ",";
        out += r.seed ? std::to_string(*r.seed) : "mean";
        out += ",";
        out += fixed6(r.eps);
        out += ",";
        out += fixed6(r.accuracy);
        out += ",";
        out += std::to_string(r.n);
        out += "\n";
    }
    return out;
}

void emit_report(const RobustnessReport& report, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(IoErrc::io_failure, "cannot open for writing: " + path.string());
    const std::string text = format_report(report);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError(IoErrc::io_failure, "write failed: " + path.string());
}

RobustnessReport parse_report_text(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || trim(line) != kReportHeader) {
        throw IoError(IoErrc::parse_error, "report is missing the expected CSV header");
    }
    RobustnessReport rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        const std::vector<std::string> f = split(trim(line), ',');
        if (f.size() != 7) {
            throw IoError(IoErrc::parse_error, "report line " + std::to_string(lineno) + " has " +
                                                   std::to_string(f.size()) + " fields, expected 7");
        }
        ReportRow row;
        row.model_id = f[0];
        row.train_source = f[1];
        if (!f[2].empty()) row.transform_h = parse_double("transform_h", f[2]);
        if (f[3] != "mean") row.seed = parse_int("seed", f[3]);
        row.eps = parse_double("eps", f[4]);
        row.accuracy = parse_double("accuracy", f[5]);
        row.n = static_cast<long>(parse_int("n", f[6]));
        rows.push_back(std::move(row));
    }
    return rows;
}

RobustnessReport parse_report_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrc::io_failure, "cannot open report: " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_report_text(buf.str());
}

RobustnessReport with_mean_rows(RobustnessReport report) {
    std::sort(report.begin(), report.end(), row_less);
    // group per-seed rows by (model_id, eps); seed order inside a group is
    // already canonical, so the accumulation order is deterministic
    std::map<std::pair<std::string, double>, ReportRow> groups;
    std::map<std::pair<std::string, double>, std::pair<double, int>> sums;
    for (const ReportRow& r : report) {
        if (!r.seed) continue;
        const auto key = std::make_pair(r.model_id, r.eps);
        auto [it, fresh] = sums.try_emplace(key, 0.0, 0);
        it->second.first += r.accuracy;
        it->second.second += 1;
        if (fresh) {
            ReportRow mean = r;
            mean.seed.reset();
            groups.emplace(key, std::move(mean));
        }
    }
    for (auto& [key, row] : groups) {
        const auto& [acc_sum, count] = sums.at(key);
        row.accuracy = acc_sum / static_cast<double>(count);
        report.push_back(std::move(row));
    }
    std::sort(report.begin(), report.end(), row_less);
    return report;
}

// ---------------------------------------------------------------------------
// Full protocol
// ---------------------------------------------------------------------------

namespace {

struct RunLog {
    std::ofstream file;
    const RunHooks* hooks;

    void line(const std::string& text) {
        if (file.is_open()) file << text << "\n" << std::flush;
        if (hooks != nullptr && hooks->on_stage) hooks->on_stage(text);
    }
};

LabeledDataset load_train(const ExperimentConfig& cfg) {
    if (cfg.dataset == DatasetKind::mnist) {
        return load_mnist_files(cfg.train_images, cfg.train_labels, "mnist-train");
    }
    return load_cifar10_files(cfg.train_batches, "cifar10-train");
}

LabeledDataset load_test(const ExperimentConfig& cfg) {
    if (cfg.dataset == DatasetKind::mnist) {
        return load_mnist_files(cfg.test_images, cfg.test_labels, "mnist-test");
    }
    return load_cifar10_files({cfg.test_batch}, "cifar10-test");
}

std::string seed_name(std::uint64_t seed) { return "seed" + std::to_string(seed); }

}  // namespace

RobustnessReport run_experiment(const ExperimentConfig& cfg, const RunHooks* hooks) {
    cfg.validate();
    const int threads = cfg.threads;

    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);
    fs::create_directories(cfg.output_dir / "datasets");
    fs::create_directories(cfg.output_dir / "checkpoints");

    RunLog log{std::ofstream(cfg.output_dir / "run.log", std::ios::trunc), hooks};

    {
        std::ofstream snap(cfg.output_dir / "config.snapshot.cfg", std::ios::trunc);
        snap << format_config(cfg);
    }

    log.line("loading " + std::string(cfg.dataset == DatasetKind::mnist ? "mnist" : "cifar10"));
    LabeledDataset train = load_train(cfg);
    LabeledDataset test = load_test(cfg);
    if (cfg.train_subset > 0 && cfg.train_subset < train.size()) {
        train = prefix_subset(train, cfg.train_subset, train.source_tag());
    }
    if (cfg.test_subset > 0 && cfg.test_subset < test.size()) {
        test = prefix_subset(test, cfg.test_subset, test.source_tag());
    }
    log.line("train " + std::to_string(train.size()) + " images, test " + std::to_string(test.size()) + " images");

    DatasetManifest manifest;
    const auto save_with_manifest = [&](const LabeledDataset& ds, const std::string& filename) {
        const fs::path path = cfg.output_dir / "datasets" / filename;
        save_dataset(ds, path);
        ManifestEntry entry;
        entry.tag = ds.source_tag();
        entry.file = filename;
        entry.transform_h = ds.transform_h();
        entry.count = ds.size();
        entry.checksum = fnv1a64(read_file_bytes(path));
        manifest.add(std::move(entry));
    };
    save_with_manifest(train, "original.nds");

    std::vector<LabeledDataset> augmented;
    for (std::size_t i = 0; i < cfg.h_values.size(); ++i) {
        const double h = cfg.h_values[i];
        log.line("denoising train set at h=" + shortest_double(h));
        std::vector<LabeledDataset> one = augment_dataset(train, {h}, cfg.sigma, threads);
        save_with_manifest(one.front(), "nlm-h" + shortest_double(h) + ".nds");
        augmented.push_back(std::move(one.front()));
    }
    write_manifest(manifest, cfg.output_dir / "datasets" / "manifest.txt");

    const ArchSpec arch = ArchSpec::desk_scale(train.shape().channels, train.shape().height, train.shape().width,
                                               train.num_classes());

    RobustnessReport rows;
    const fs::path report_path = cfg.output_dir / "report.csv";

    const auto train_and_sweep = [&](const std::string& model_id, const LabeledDataset& train_set,
                                     std::optional<double> transform_h, std::uint64_t seed) {
        TrainConfig tc = cfg.train;
        tc.seed = seed;
        log.line("training " + model_id + " " + seed_name(seed) + " on " + std::to_string(train_set.size()) +
                 " images");
        const MicroResNet net0 = init_params(arch, seed);
        const TrainResult trained = train_model(net0, train_set, tc, threads);
        for (const EpochStats& e : trained.history) {
            log.line("  epoch " + std::to_string(e.epoch) + " lr=" + shortest_double(e.learning_rate) +
                     " loss=" + fixed6(e.mean_loss) + " train_acc=" + fixed6(e.train_accuracy));
        }
        save_checkpoint(trained.net, seed, tc.epochs,
                        cfg.output_dir / "checkpoints" / (model_id + "-" + seed_name(seed) + ".ckpt"));

        SweepContext ctx;
        ctx.model_id = model_id;
        ctx.train_source = train_set.source_tag();
        ctx.transform_h = transform_h;
        ctx.seed = static_cast<long>(seed);
        const RobustnessReport swept = robustness_sweep(trained.net, test, cfg.fgsm, ctx, threads,
                                                        hooks != nullptr ? hooks->sweep_observer : nullptr);
        for (const ReportRow& r : swept) {
            log.line("  " + model_id + " eps=" + fixed6(r.eps) + " accuracy=" + fixed6(r.accuracy));
        }
        rows.insert(rows.end(), swept.begin(), swept.end());
        emit_report(rows, report_path);  // partial flush per completed model
    };

    for (std::uint64_t seed : cfg.seeds) {
        train_and_sweep("baseline", train, std::nullopt, seed);
        for (std::size_t i = 0; i < cfg.h_values.size(); ++i) {
            const double h = cfg.h_values[i];
            const LabeledDataset joined =
                concat_datasets(train, augmented[i], train.source_tag() + "+" + augmented[i].source_tag());
            train_and_sweep("nlm-h" + shortest_double(h), joined, h, seed);
        }
        if (cfg.combine_h && cfg.h_values.size() > 1) {
            LabeledDataset joined = train;
            std::string tag = train.source_tag();
            for (const LabeledDataset& aug : augmented) {
                tag += "+" + aug.source_tag();
                joined = concat_datasets(joined, aug, tag);
            }
            train_and_sweep("nlm-hall", joined, std::nullopt, seed);
        }
    }

    RobustnessReport final_report = with_mean_rows(std::move(rows));
    emit_report(final_report, report_path);
    log.line("report written: " + report_path.string());
    return final_report;
}

}  // namespace nlmdef
