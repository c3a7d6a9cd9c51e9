#include "nlmdef/dataset_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "binio.hpp"

namespace nlmdef {

using binio::append_f64;
using binio::append_u32;
using binio::append_u64;
using binio::Cursor;
using binio::write_bytes;

namespace {

constexpr std::uint32_t kIdxImageMagic = 2051;  // 0x00000803
constexpr std::uint32_t kIdxLabelMagic = 2049;  // 0x00000801
constexpr std::size_t kCifarRecordLen = 3073;   // 1 label byte + 3*1024 pixels

std::uint32_t read_be32(const std::uint8_t* p) {
    return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
           std::uint32_t(p[3]);
}

}  // namespace

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(IoErrc::io_failure, "cannot open: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError(IoErrc::io_failure, "read failed: " + path.string());
    return bytes;
}

IdxHeader parse_idx_header(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4) throw IoError(IoErrc::truncated_file, "IDX header shorter than 4 bytes");
    IdxHeader header;
    header.magic = read_be32(bytes.data());
    if (header.magic != kIdxImageMagic && header.magic != kIdxLabelMagic) {
        throw IoError(IoErrc::bad_magic, "IDX magic " + std::to_string(header.magic) + " not recognized");
    }
    const std::size_t ndims = header.magic & 0xFF;  // 3 for images, 1 for labels
    if (bytes.size() < 4 + 4 * ndims) throw IoError(IoErrc::truncated_file, "IDX header truncated");
    for (std::size_t i = 0; i < ndims; ++i) header.dims.push_back(read_be32(bytes.data() + 4 + 4 * i));
    return header;
}

LabeledDataset load_mnist(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                          const std::string& source_tag) {
    const IdxHeader img_header = parse_idx_header(image_bytes);
    if (img_header.magic != kIdxImageMagic) {
        throw IoError(IoErrc::bad_magic, "expected image magic 2051, got " + std::to_string(img_header.magic));
    }
    const IdxHeader lbl_header = parse_idx_header(label_bytes);
    if (lbl_header.magic != kIdxLabelMagic) {
        throw IoError(IoErrc::bad_magic, "expected label magic 2049, got " + std::to_string(lbl_header.magic));
    }

    const std::size_t count = img_header.dims[0];
    const std::size_t rows = img_header.dims[1];
    const std::size_t cols = img_header.dims[2];
    if (lbl_header.dims[0] != count) {
        throw IoError(IoErrc::count_mismatch, "image count " + std::to_string(count) + " != label count " +
                                                  std::to_string(lbl_header.dims[0]));
    }
    if (rows == 0 || cols == 0) throw IoError(IoErrc::parse_error, "IDX image dims must be positive");
    if (image_bytes.size() < 16 + count * rows * cols) {
        throw IoError(IoErrc::truncated_file, "IDX image payload shorter than declared count");
    }
    if (label_bytes.size() < 8 + count) {
        throw IoError(IoErrc::truncated_file, "IDX label payload shorter than declared count");
    }

    if (count == 0) {
        return LabeledDataset(ImageShape{1, static_cast<int>(rows), static_cast<int>(cols)}, 10, source_tag);
    }

    const std::uint8_t* px = image_bytes.data() + 16;
    const std::uint8_t* lb = label_bytes.data() + 8;
    std::vector<ImageTensor> images;
    images.reserve(count);
    std::vector<int> labels(count);
    const std::size_t npix = rows * cols;
    for (std::size_t i = 0; i < count; ++i) {
        std::vector<double> data(npix);
        for (std::size_t k = 0; k < npix; ++k) data[k] = static_cast<double>(px[i * npix + k]) / 255.0;
        images.emplace_back(1, static_cast<int>(rows), static_cast<int>(cols), std::move(data));
        if (lb[i] > 9) throw IoError(IoErrc::label_out_of_range, "MNIST label " + std::to_string(lb[i]) + " > 9");
        labels[i] = lb[i];
    }
    return LabeledDataset(std::move(images), std::move(labels), 10, source_tag);
}

LabeledDataset load_mnist_files(const std::filesystem::path& images, const std::filesystem::path& labels,
                                const std::string& source_tag) {
    const std::vector<std::uint8_t> ib = read_file_bytes(images);
    const std::vector<std::uint8_t> lb = read_file_bytes(labels);
    return load_mnist(ib, lb, source_tag);
}

LabeledDataset load_cifar10(std::span<const std::uint8_t> batch_bytes, const std::string& source_tag) {
    if (batch_bytes.size() % kCifarRecordLen != 0) {
        throw IoError(IoErrc::bad_record_length,
                      "CIFAR-10 batch size " + std::to_string(batch_bytes.size()) + " not a multiple of 3073");
    }
    const std::size_t count = batch_bytes.size() / kCifarRecordLen;
    if (count == 0) return LabeledDataset(ImageShape{3, 32, 32}, 10, source_tag);

    std::vector<ImageTensor> images;
    images.reserve(count);
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint8_t* rec = batch_bytes.data() + i * kCifarRecordLen;
        if (rec[0] > 9) {
            throw IoError(IoErrc::label_out_of_range,
                          "CIFAR-10 label " + std::to_string(rec[0]) + " in record " + std::to_string(i));
        }
        labels[i] = rec[0];
        std::vector<double> data(3 * 1024);
        for (std::size_t k = 0; k < 3 * 1024; ++k) data[k] = static_cast<double>(rec[1 + k]) / 255.0;
        images.emplace_back(3, 32, 32, std::move(data));
    }
    return LabeledDataset(std::move(images), std::move(labels), 10, source_tag);
}

LabeledDataset load_cifar10_files(const std::vector<std::filesystem::path>& batches, const std::string& source_tag) {
    if (batches.empty()) return LabeledDataset(ImageShape{3, 32, 32}, 10, source_tag);
    LabeledDataset out = load_cifar10(read_file_bytes(batches[0]), source_tag);
    for (std::size_t i = 1; i < batches.size(); ++i) {
        out = concat_datasets(out, load_cifar10(read_file_bytes(batches[i]), source_tag), source_tag);
    }
    return out;
}

// Container layout (see docs/formats.md):
//   "NLMDSv1\n" | u32 version | u32 channels | u32 height | u32 width |
//   u64 count | u32 num_classes | u32 tag_len | tag | u8 has_h | f64 h |
//   count * u32 labels | count*C*H*W * f64 pixels        (all little-endian)
static constexpr char kDatasetMagic[9] = "NLMDSv1\n";

void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path) {
    std::string out;
    const std::size_t pixels_per_image = static_cast<std::size_t>(ds.shape().channels) * ds.shape().height *
                                         static_cast<std::size_t>(ds.shape().width);
    out.reserve(64 + ds.source_tag().size() + ds.size() * (4 + 8 * pixels_per_image));
    out.append(kDatasetMagic, 8);
    append_u32(out, 1);
    append_u32(out, static_cast<std::uint32_t>(ds.shape().channels));
    append_u32(out, static_cast<std::uint32_t>(ds.shape().height));
    append_u32(out, static_cast<std::uint32_t>(ds.shape().width));
    append_u64(out, ds.size());
    append_u32(out, static_cast<std::uint32_t>(ds.num_classes()));
    append_u32(out, static_cast<std::uint32_t>(ds.source_tag().size()));
    out.append(ds.source_tag());
    out.push_back(ds.transform_h() ? 1 : 0);
    append_f64(out, ds.transform_h().value_or(0.0));
    for (std::size_t i = 0; i < ds.size(); ++i) append_u32(out, static_cast<std::uint32_t>(ds.label(i)));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (double v : ds.image(i).data()) append_f64(out, v);
    }
    write_bytes(path, out);
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    Cursor cur(bytes, path.string());
    if (cur.str(8) != std::string(kDatasetMagic, 8)) {
        throw IoError(IoErrc::bad_magic, path.string() + ": not a dataset container");
    }
    const std::uint32_t version = cur.u32();
    if (version != 1) {
        throw IoError(IoErrc::version_mismatch, path.string() + ": container version " + std::to_string(version));
    }
    const int channels = static_cast<int>(cur.u32());
    const int height = static_cast<int>(cur.u32());
    const int width = static_cast<int>(cur.u32());
    const std::uint64_t count = cur.u64();
    const int num_classes = static_cast<int>(cur.u32());
    const std::uint32_t tag_len = cur.u32();
    const std::string tag = cur.str(tag_len);
    const bool has_h = cur.u8() != 0;
    const double h = cur.f64();
    const std::optional<double> transform_h = has_h ? std::optional<double>(h) : std::nullopt;

    std::vector<int> labels(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        labels[i] = static_cast<int>(cur.u32());
        if (labels[i] < 0 || labels[i] >= num_classes) {
            throw IoError(IoErrc::label_out_of_range, path.string() + ": stored label out of range");
        }
    }
    if (count == 0) return LabeledDataset(ImageShape{channels, height, width}, num_classes, tag, transform_h);

    const std::size_t npix = static_cast<std::size_t>(channels) * height * static_cast<std::size_t>(width);
    std::vector<ImageTensor> images;
    images.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        std::vector<double> data(npix);
        for (std::size_t k = 0; k < npix; ++k) data[k] = cur.f64();
        images.emplace_back(channels, height, width, std::move(data));
    }
    return LabeledDataset(std::move(images), std::move(labels), num_classes, tag, transform_h);
}

namespace {

std::uint8_t quantize255(double v) {
    // round half away from zero; v is in [0,1] so this is round-half-up
    return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

void export_pnm_impl(const ImageTensor& img, const std::filesystem::path& path, bool color) {
    std::string out;
    out += color ? "P6\n" : "P5\n";
    out += std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n255\n";
    const int h = img.height(), w = img.width();
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (color) {
                for (int c = 0; c < 3; ++c) out.push_back(static_cast<char>(quantize255(img.at(c, y, x))));
            } else {
                out.push_back(static_cast<char>(quantize255(img.at(0, y, x))));
            }
        }
    }
    write_bytes(path, out);
}

}  // namespace

void export_pgm(const ImageTensor& img, const std::filesystem::path& path) {
    if (img.channels() != 1) throw IoError(IoErrc::channel_mismatch, "PGM export requires a 1-channel image");
    export_pnm_impl(img, path, false);
}

void export_ppm(const ImageTensor& img, const std::filesystem::path& path) {
    if (img.channels() != 3) throw IoError(IoErrc::channel_mismatch, "PPM export requires a 3-channel image");
    export_pnm_impl(img, path, true);
}

void export_pnm(const ImageTensor& img, const std::filesystem::path& path) {
    if (img.channels() == 1) {
        export_pgm(img, path);
    } else if (img.channels() == 3) {
        export_ppm(img, path);
    } else {
        throw IoError(IoErrc::channel_mismatch, "PNM export requires 1 or 3 channels");
    }
}

namespace {

// Skips netpbm whitespace and '#' comments, then reads one unsigned decimal.
std::size_t pnm_token(std::span<const std::uint8_t> bytes, std::size_t pos, std::uint64_t& value,
                      const std::string& what) {
    while (pos < bytes.size()) {
        const char ch = static_cast<char>(bytes[pos]);
        if (ch == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        } else if (ch == ' ' || ch == '\t' || ch == '\r' || ch == '\n') {
            ++pos;
        } else {
            break;
        }
    }
    if (pos >= bytes.size() || bytes[pos] < '0' || bytes[pos] > '9') {
        throw IoError(IoErrc::parse_error, what + ": malformed netpbm header");
    }
    value = 0;
    while (pos < bytes.size() && bytes[pos] >= '0' && bytes[pos] <= '9') {
        value = value * 10 + (bytes[pos] - '0');
        if (value > 1u << 30) throw IoError(IoErrc::parse_error, what + ": netpbm header value too large");
        ++pos;
    }
    return pos;
}

}  // namespace

ImageTensor load_pnm(const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    const std::string what = path.string();
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw IoError(IoErrc::bad_magic, what + ": only binary P5/P6 netpbm is supported");
    }
    const int channels = bytes[1] == '5' ? 1 : 3;
    std::uint64_t w = 0, h = 0, maxval = 0;
    std::size_t pos = 2;
    pos = pnm_token(bytes, pos, w, what);
    pos = pnm_token(bytes, pos, h, what);
    pos = pnm_token(bytes, pos, maxval, what);
    if (w == 0 || h == 0) throw IoError(IoErrc::parse_error, what + ": zero netpbm dimensions");
    if (maxval == 0 || maxval > 255) {
        throw IoError(IoErrc::parse_error, what + ": only 8-bit netpbm (maxval <= 255) is supported");
    }
    ++pos;  // single whitespace byte after maxval
    const std::size_t need = static_cast<std::size_t>(w) * h * channels;
    if (bytes.size() < pos + need) throw IoError(IoErrc::truncated_file, what + ": netpbm payload truncated");

    std::vector<double> data(need);
    // interleaved on disk, planar in memory
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (int c = 0; c < channels; ++c) {
                const std::uint8_t b = bytes[pos + (y * w + x) * channels + c];
                data[(static_cast<std::size_t>(c) * h + y) * w + x] = static_cast<double>(b) / static_cast<double>(maxval);
            }
        }
    }
    return ImageTensor(channels, static_cast<int>(h), static_cast<int>(w), std::move(data));
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
    std::uint64_t hash = 1469598103934665603ULL;
    for (std::uint8_t b : bytes) {
        hash ^= b;
        hash *= 1099511628211ULL;
    }
    return hash;
}

void DatasetManifest::add(ManifestEntry entry) {
    for (const ManifestEntry& e : entries) {
        if (e.tag == entry.tag) throw IoError(IoErrc::duplicate_tag, "manifest tag not unique: " + entry.tag);
    }
    entries.push_back(std::move(entry));
}

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
    std::ostringstream out;
    out << "nlmdef-manifest " << manifest.format_version << "\n";
    for (const ManifestEntry& e : manifest.entries) {
        out << "entry\t" << e.tag << "\t" << e.file << "\t";
        if (e.transform_h) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", *e.transform_h);
            out << buf;
        } else {
            out << "-";
        }
        char cksum[32];
        std::snprintf(cksum, sizeof cksum, "%016llx", static_cast<unsigned long long>(e.checksum));
        out << "\t" << e.count << "\t" << cksum << "\n";
    }
    write_bytes(path, out.str());
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(IoErrc::io_failure, "cannot open: " + path.string());
    std::string head;
    int version = 0;
    if (!(in >> head >> version) || head != "nlmdef-manifest") {
        throw IoError(IoErrc::bad_magic, path.string() + ": not a dataset manifest");
    }
    if (version != 1) throw IoError(IoErrc::version_mismatch, path.string() + ": manifest version unsupported");
    DatasetManifest manifest;
    manifest.format_version = version;
    std::string line;
    std::getline(in, line);  // rest of header line
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string kind, tag, file, h_text, cksum_text;
        std::uint64_t count = 0;
        if (!(std::getline(row, kind, '\t') && std::getline(row, tag, '\t') && std::getline(row, file, '\t') &&
              std::getline(row, h_text, '\t') && (row >> count >> cksum_text)) ||
            kind != "entry") {
            throw IoError(IoErrc::parse_error, path.string() + ": malformed manifest line: " + line);
        }
        ManifestEntry entry;
        entry.tag = tag;
        entry.file = file;
        if (h_text != "-") entry.transform_h = std::stod(h_text);
        entry.count = count;
        entry.checksum = std::stoull(cksum_text, nullptr, 16);
        manifest.add(std::move(entry));
    }
    return manifest;
}

void verify_manifest(const DatasetManifest& manifest, const std::filesystem::path& base_dir) {
    for (const ManifestEntry& e : manifest.entries) {
        const std::filesystem::path file = base_dir / e.file;
        const std::vector<std::uint8_t> bytes = read_file_bytes(file);
        if (fnv1a64(bytes) != e.checksum) {
            throw IoError(IoErrc::parse_error, file.string() + ": checksum mismatch for tag " + e.tag);
        }
        const LabeledDataset ds = load_dataset(file);
        if (ds.size() != e.count) {
            throw IoError(IoErrc::count_mismatch, file.string() + ": image count differs from manifest");
        }
    }
}

}  // namespace nlmdef
