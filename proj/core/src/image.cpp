#include "nlmdef/image.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <utility>

namespace nlmdef {

namespace {

void check_shape(int channels, int height, int width) {
    if (channels <= 0 || height <= 0 || width <= 0) {
        throw std::invalid_argument("ImageTensor: dimensions must be positive");
    }
}

}  // namespace

ImageTensor::ImageTensor(int channels, int height, int width, std::vector<double> data)
    : shape_{channels, height, width}, data_(std::move(data)) {
    check_shape(channels, height, width);
    const std::size_t expected =
        static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    if (data_.size() != expected) {
        throw std::invalid_argument("ImageTensor: data length does not match channels*height*width");
    }
    for (double v : data_) {
        if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
            throw std::invalid_argument("ImageTensor: pixel value outside [0, 1]");
        }
    }
}

ImageTensor ImageTensor::constant(int channels, int height, int width, double value) {
    check_shape(channels, height, width);
    const std::size_t n =
        static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    return ImageTensor(channels, height, width, std::vector<double>(n, value));
}

int mirror_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * (n - 1);
    int r = std::abs(i) % period;
    if (r >= n) r = period - r;
    return r;
}

double get_pixel_padded(const ImageTensor& img, int channel, PixelCoord coord) {
    const int r = mirror_index(coord.row, img.height());
    const int c = mirror_index(coord.col, img.width());
    return img.at(channel, r, c);
}

ImageTensor flip_horizontal(const ImageTensor& img) {
    const int ch = img.channels(), h = img.height(), w = img.width();
    std::vector<double> out(img.data().size());
    const double* src = img.data().data();
    for (int c = 0; c < ch; ++c) {
        for (int y = 0; y < h; ++y) {
            const std::size_t base = static_cast<std::size_t>((c * h + y)) * w;
            for (int x = 0; x < w; ++x) {
                out[base + static_cast<std::size_t>(w - 1 - x)] = src[base + static_cast<std::size_t>(x)];
            }
        }
    }
    return ImageTensor(ch, h, w, std::move(out));
}

LabeledDataset::LabeledDataset(ImageShape shape, int num_classes, std::string source_tag,
                               std::optional<double> transform_h)
    : shape_(shape), num_classes_(num_classes), source_tag_(std::move(source_tag)),
      transform_h_(transform_h) {
    check_shape(shape.channels, shape.height, shape.width);
    if (num_classes_ <= 0) throw std::invalid_argument("LabeledDataset: num_classes must be positive");
}

LabeledDataset::LabeledDataset(std::vector<ImageTensor> images, std::vector<int> labels, int num_classes,
                               std::string source_tag, std::optional<double> transform_h)
    : images_(std::move(images)), labels_(std::move(labels)), num_classes_(num_classes),
      source_tag_(std::move(source_tag)), transform_h_(transform_h) {
    if (num_classes_ <= 0) throw std::invalid_argument("LabeledDataset: num_classes must be positive");
    if (images_.empty()) throw std::invalid_argument("LabeledDataset: use the shape constructor for empty datasets");
    if (images_.size() != labels_.size()) {
        throw std::invalid_argument("LabeledDataset: image/label count mismatch");
    }
    shape_ = images_.front().shape();
    for (const ImageTensor& im : images_) {
        if (!(im.shape() == shape_)) throw std::invalid_argument("LabeledDataset: images differ in shape");
    }
    for (int l : labels_) {
        if (l < 0 || l >= num_classes_) throw std::invalid_argument("LabeledDataset: label out of range");
    }
}

LabeledDataset prefix_subset(const LabeledDataset& ds, std::size_t n, const std::string& tag) {
    const std::size_t k = std::min(n, ds.size());
    if (k == 0) return LabeledDataset(ds.shape(), ds.num_classes(), tag, ds.transform_h());
    std::vector<ImageTensor> images(ds.images().begin(), ds.images().begin() + static_cast<std::ptrdiff_t>(k));
    std::vector<int> labels(ds.labels().begin(), ds.labels().begin() + static_cast<std::ptrdiff_t>(k));
    return LabeledDataset(std::move(images), std::move(labels), ds.num_classes(), tag, ds.transform_h());
}

LabeledDataset concat_datasets(const LabeledDataset& a, const LabeledDataset& b, const std::string& tag) {
    if (!(a.shape() == b.shape()) || a.num_classes() != b.num_classes()) {
        throw std::invalid_argument("concat_datasets: incompatible datasets");
    }
    if (a.size() + b.size() == 0) return LabeledDataset(a.shape(), a.num_classes(), tag);
    std::vector<ImageTensor> images;
    images.reserve(a.size() + b.size());
    images.insert(images.end(), a.images().begin(), a.images().end());
    images.insert(images.end(), b.images().begin(), b.images().end());
    std::vector<int> labels;
    labels.reserve(a.size() + b.size());
    labels.insert(labels.end(), a.labels().begin(), a.labels().end());
    labels.insert(labels.end(), b.labels().begin(), b.labels().end());
    return LabeledDataset(std::move(images), std::move(labels), a.num_classes(), tag);
}

}  // namespace nlmdef
