#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "nlmdef/image.hpp"

namespace nlmdef {

enum class IoErrc {
    bad_magic,
    truncated_file,
    count_mismatch,
    bad_record_length,
    label_out_of_range,
    channel_mismatch,
    version_mismatch,
    io_failure,
    parse_error,
    duplicate_tag,
};

class IoError : public std::runtime_error {
  public:
    IoError(IoErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
    IoErrc code() const { return code_; }

  private:
    IoErrc code_;
};

// ---------------------------------------------------------------------------
// MNIST IDX (big-endian). Image files: magic 0x00000803, dims
// [count, rows, cols], one byte per pixel. Label files: magic 0x00000801,
// dims [count], one byte per label.
// ---------------------------------------------------------------------------

struct IdxHeader {
    std::uint32_t magic = 0;
    std::vector<std::uint32_t> dims;
};

/// Parses and validates an IDX header. The low byte of the magic is the
/// dimension count; only the unsigned-byte image (2051) and label (2049)
/// variants are accepted.
IdxHeader parse_idx_header(std::span<const std::uint8_t> bytes);

/// Decodes an MNIST-style image/label file pair. Pixels come out as
/// byte/255, so every value sits on the 1/255 grid; ordering is preserved.
LabeledDataset load_mnist(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                          const std::string& source_tag);
LabeledDataset load_mnist_files(const std::filesystem::path& images, const std::filesystem::path& labels,
                                const std::string& source_tag);

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches: 3073-byte records, 1 label byte then
// 1024 R + 1024 G + 1024 B bytes, each plane row-major 32x32.
// ---------------------------------------------------------------------------

LabeledDataset load_cifar10(std::span<const std::uint8_t> batch_bytes, const std::string& source_tag);
LabeledDataset load_cifar10_files(const std::vector<std::filesystem::path>& batches, const std::string& source_tag);

// ---------------------------------------------------------------------------
// Dataset container: lossless persistence for derived (denoised) datasets.
// Pixels are stored as little-endian doubles because denoised values leave
// the 1/255 grid. Byte layout documented in docs/formats.md.
// ---------------------------------------------------------------------------

void save_dataset(const LabeledDataset& ds, const std::filesystem::path& path);
LabeledDataset load_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Netpbm export/import for eyeballing images. Binary P5 (1 channel) and
// P6 (3 channels), maxval 255, byte = round(value*255) half away from zero.
// ---------------------------------------------------------------------------

void export_pgm(const ImageTensor& img, const std::filesystem::path& path);
void export_ppm(const ImageTensor& img, const std::filesystem::path& path);
/// Writes PGM or PPM according to channel count.
void export_pnm(const ImageTensor& img, const std::filesystem::path& path);
/// Reads binary P5/P6 with maxval <= 255; pixel = byte / maxval.
ImageTensor load_pnm(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Manifest: index of generated dataset files with integrity checksums.
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string tag;
    std::string file;  // path relative to the manifest
    std::optional<double> transform_h;
    std::uint64_t count = 0;
    std::uint64_t checksum = 0;  // FNV-1a over the file bytes
};

struct DatasetManifest {
    int format_version = 1;
    std::vector<ManifestEntry> entries;

    /// Rejects duplicate tags.
    void add(ManifestEntry entry);
};

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

void write_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);
DatasetManifest read_manifest(const std::filesystem::path& path);
/// Re-checks counts and checksums of every referenced file.
void verify_manifest(const DatasetManifest& manifest, const std::filesystem::path& base_dir);

/// Whole-file read helper used by the loaders and the CLI.
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace nlmdef
