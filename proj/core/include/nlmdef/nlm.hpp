#pragma once

#include "nlmdef/image.hpp"

namespace nlmdef {

/// Non-local means filter parameters. Defaults give 7x7 similarity patches
/// inside a 21x21 search window.
struct NlmParams {
    double h = 3.0;        ///< bandwidth; larger smooths more
    double sigma = 0.0;    ///< assumed noise standard deviation, in pixel units
    int patch_radius = 3;  ///< 2r+1 square similarity patch
    int search_radius = 10;///< 2r+1 square averaging window

    void validate() const;
};

/// Mean squared per-pixel, per-channel difference between the square patches
/// centered at p and q. Patches reaching outside the image read through the
/// mirror padding. Symmetric in (p, q); zero iff the patches are identical.
double patch_distance(const ImageTensor& img, PixelCoord p, PixelCoord q, int patch_radius);

/// exp(-max(d2 - 2*sigma^2, 0) / h^2). In (0, 1]; equals 1 whenever
/// d2 <= 2*sigma^2. Any constant prefactor would cancel against the
/// normalization, so none is applied.
double nlm_weight(double d2, const NlmParams& params);

/// Weighted average of one channel over the search window centered at p.
/// Weights are computed from all channels jointly and the window is walked
/// in row-major order, so the result is bit-reproducible.
double denoise_pixel(const ImageTensor& img, PixelCoord p, int channel, const NlmParams& params);

/// Denoises every pixel of the image from the original input (never from
/// already-denoised values). Output pixels stay in [0, 1] because each is a
/// convex combination of input values. Identical results for any `threads`.
ImageTensor denoise_image(const ImageTensor& img, const NlmParams& params, int threads = 1);

/// Literal per-pixel transliteration of the estimate formula; the correctness
/// anchor for the production kernel. Slow on purpose.
ImageTensor denoise_image_reference(const ImageTensor& img, const NlmParams& params);

namespace detail {

/// denoise_pixel with every weight multiplied by `weight_scale`; exists so
/// tests can show the output does not depend on a constant prefactor.
double denoise_pixel_scaled(const ImageTensor& img, PixelCoord p, int channel, const NlmParams& params,
                            double weight_scale);

}  // namespace detail

}  // namespace nlmdef
