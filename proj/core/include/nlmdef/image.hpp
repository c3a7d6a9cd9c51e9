#pragma once

#include <optional>
#include <string>
#include <vector>

namespace nlmdef {

/// Integer pixel coordinate. May lie outside an image; boundary resolution
/// happens in get_pixel_padded.
struct PixelCoord {
    int row = 0;
    int col = 0;
};

/// Shape of one image: channels x height x width.
struct ImageShape {
    int channels = 0;
    int height = 0;
    int width = 0;

    bool operator==(const ImageShape&) const = default;
};

/// Immutable channels x height x width stack of pixel values in [0, 1],
/// stored row-major per channel. Construction validates every value.
class ImageTensor {
  public:
    ImageTensor(int channels, int height, int width, std::vector<double> data);

    static ImageTensor constant(int channels, int height, int width, double value);

    int channels() const { return shape_.channels; }
    int height() const { return shape_.height; }
    int width() const { return shape_.width; }
    const ImageShape& shape() const { return shape_; }

    /// Value at an in-bounds coordinate.
    double at(int channel, int row, int col) const {
        return data_[static_cast<std::size_t>((channel * shape_.height + row) * shape_.width + col)];
    }

    const std::vector<double>& data() const { return data_; }

    bool same_shape(const ImageTensor& other) const { return shape_ == other.shape_; }

  private:
    ImageShape shape_;
    std::vector<double> data_;
};

/// Maps an arbitrary integer index onto [0, n) by mirror reflection without
/// edge repetition (..., 2, 1 | 0, 1, 2 | 1, 0, ...). n = 1 always maps to 0.
int mirror_index(int i, int n);

/// Pixel read with mirror-reflected boundary handling; total over all integer
/// coordinates. In-bounds coordinates return the stored value verbatim.
double get_pixel_padded(const ImageTensor& img, int channel, PixelCoord coord);

/// Mirrors every channel left-right: column j -> width-1-j.
ImageTensor flip_horizontal(const ImageTensor& img);

/// Immutable collection of same-shaped images with integer class labels and
/// provenance metadata. transform_h records the denoiser bandwidth used to
/// produce a derived dataset; originals leave it unset.
class LabeledDataset {
  public:
    /// Empty dataset with a declared shape.
    LabeledDataset(ImageShape shape, int num_classes, std::string source_tag,
                   std::optional<double> transform_h = std::nullopt);

    LabeledDataset(std::vector<ImageTensor> images, std::vector<int> labels, int num_classes,
                   std::string source_tag, std::optional<double> transform_h = std::nullopt);

    std::size_t size() const { return images_.size(); }
    const ImageTensor& image(std::size_t i) const { return images_[i]; }
    const std::vector<ImageTensor>& images() const { return images_; }
    int label(std::size_t i) const { return labels_[i]; }
    const std::vector<int>& labels() const { return labels_; }
    int num_classes() const { return num_classes_; }
    const ImageShape& shape() const { return shape_; }
    const std::string& source_tag() const { return source_tag_; }
    const std::optional<double>& transform_h() const { return transform_h_; }

  private:
    ImageShape shape_;
    std::vector<ImageTensor> images_;
    std::vector<int> labels_;
    int num_classes_;
    std::string source_tag_;
    std::optional<double> transform_h_;
};

/// First n items (or all, if fewer) under a new tag.
LabeledDataset prefix_subset(const LabeledDataset& ds, std::size_t n, const std::string& tag);

/// Concatenation a then b; shapes and class counts must agree.
LabeledDataset concat_datasets(const LabeledDataset& a, const LabeledDataset& b, const std::string& tag);

}  // namespace nlmdef
