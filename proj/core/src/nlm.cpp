#include "nlmdef/nlm.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

#include "nlmdef/parallel.hpp"

// This translation unit is compiled with floating-point contraction disabled
// (see core/CMakeLists.txt) so that the production kernel and the reference
// path run the exact same sequence of IEEE operations and can be compared
// bit for bit.

namespace nlmdef {

void NlmParams::validate() const {
    if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("NlmParams: h must be positive");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("NlmParams: sigma must be >= 0");
    if (patch_radius < 0) throw std::invalid_argument("NlmParams: patch_radius must be >= 0");
    if (search_radius < 0) throw std::invalid_argument("NlmParams: search_radius must be >= 0");
}

double patch_distance(const ImageTensor& img, PixelCoord p, PixelCoord q, int patch_radius) {
    const int r = patch_radius;
    const int side = 2 * r + 1;
    double acc = 0.0;
    for (int c = 0; c < img.channels(); ++c) {
        for (int dr = -r; dr <= r; ++dr) {
            for (int dc = -r; dc <= r; ++dc) {
                const double a = get_pixel_padded(img, c, {p.row + dr, p.col + dc});
                const double b = get_pixel_padded(img, c, {q.row + dr, q.col + dc});
                const double diff = a - b;
                acc += diff * diff;
            }
        }
    }
    return acc / (static_cast<double>(img.channels()) * side * side);
}

double nlm_weight(double d2, const NlmParams& params) {
    double excess = d2 - 2.0 * params.sigma * params.sigma;
    if (excess < 0.0) excess = 0.0;
    return std::exp(-(excess / (params.h * params.h)));
}

double denoise_pixel(const ImageTensor& img, PixelCoord p, int channel, const NlmParams& params) {
    return detail::denoise_pixel_scaled(img, p, channel, params, 1.0);
}

namespace detail {

double denoise_pixel_scaled(const ImageTensor& img, PixelCoord p, int channel, const NlmParams& params,
                            double weight_scale) {
    params.validate();
    const int s = params.search_radius;
    double num = 0.0;
    double den = 0.0;
    for (int qr = p.row - s; qr <= p.row + s; ++qr) {
        for (int qc = p.col - s; qc <= p.col + s; ++qc) {
            const double d2 = patch_distance(img, p, {qr, qc}, params.patch_radius);
            const double w = nlm_weight(d2, params) * weight_scale;
            num += get_pixel_padded(img, channel, {qr, qc}) * w;
            den += w;
        }
    }
    return num / den;  // den > 0: the q = p term always contributes exp(0) = 1
}

}  // namespace detail

ImageTensor denoise_image_reference(const ImageTensor& img, const NlmParams& params) {
    params.validate();
    const int ch = img.channels(), h = img.height(), w = img.width();
    std::vector<double> out(img.data().size());
    for (int c = 0; c < ch; ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                out[static_cast<std::size_t>((c * h + y)) * w + x] = denoise_pixel(img, {y, x}, c, params);
            }
        }
    }
    return ImageTensor(ch, h, w, std::move(out));
}

ImageTensor denoise_image(const ImageTensor& img, const NlmParams& params, int threads) {
    params.validate();
    const int ch = img.channels(), h = img.height(), w = img.width();
    const int r = params.patch_radius;
    const int s = params.search_radius;
    const int side = 2 * r + 1;
    const double norm = static_cast<double>(ch) * side * side;

    // Materialize the mirror padding once; every read below is branch-free.
    const int pad = r + s;
    const int ph = h + 2 * pad, pw = w + 2 * pad;
    std::vector<double> padded(static_cast<std::size_t>(ch) * ph * pw);
    {
        std::vector<int> ys(ph), xs(pw);
        for (int y = 0; y < ph; ++y) ys[y] = mirror_index(y - pad, h);
        for (int x = 0; x < pw; ++x) xs[x] = mirror_index(x - pad, w);
        for (int c = 0; c < ch; ++c) {
            for (int y = 0; y < ph; ++y) {
                double* dst = padded.data() + (static_cast<std::size_t>(c) * ph + y) * pw;
                for (int x = 0; x < pw; ++x) dst[x] = img.at(c, ys[y], xs[x]);
            }
        }
    }

    std::vector<double> out(img.data().size());
    const double* pd = padded.data();
    const std::size_t plane = static_cast<std::size_t>(ph) * pw;

    parallel_for(h, threads, [&](std::int64_t y_lo, std::int64_t y_hi) {
        std::vector<double> num(static_cast<std::size_t>(ch));
        for (int y = static_cast<int>(y_lo); y < static_cast<int>(y_hi); ++y) {
            for (int x = 0; x < w; ++x) {
                for (int c = 0; c < ch; ++c) num[static_cast<std::size_t>(c)] = 0.0;
                double den = 0.0;
                const int py = y + pad, px = x + pad;
                for (int qy = py - s; qy <= py + s; ++qy) {
                    for (int qx = px - s; qx <= px + s; ++qx) {
                        double acc = 0.0;
                        for (int c = 0; c < ch; ++c) {
                            const double* cp = pd + static_cast<std::size_t>(c) * plane;
                            for (int dr = -r; dr <= r; ++dr) {
                                const double* prow = cp + static_cast<std::size_t>(py + dr) * pw + (px - r);
                                const double* qrow = cp + static_cast<std::size_t>(qy + dr) * pw + (qx - r);
                                for (int k = 0; k < side; ++k) {
                                    const double diff = prow[k] - qrow[k];
                                    acc += diff * diff;
                                }
                            }
                        }
                        const double wgt = nlm_weight(acc / norm, params);
                        for (int c = 0; c < ch; ++c) {
                            num[static_cast<std::size_t>(c)] +=
                                pd[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(qy) * pw + qx] * wgt;
                        }
                        den += wgt;
                    }
                }
                for (int c = 0; c < ch; ++c) {
                    out[(static_cast<std::size_t>(c) * h + y) * w + x] = num[static_cast<std::size_t>(c)] / den;
                }
            }
        }
    });

    return ImageTensor(ch, h, w, std::move(out));
}

}  // namespace nlmdef
