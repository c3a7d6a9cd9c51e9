#include "nlmdef/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "binio.hpp"
#include "nlmdef/parallel.hpp"
#include "nlmdef/rng.hpp"

namespace nlmdef {

// ---------------------------------------------------------------------------
// Architecture bookkeeping
// ---------------------------------------------------------------------------

ArchSpec ArchSpec::desk_scale(int in_channels, int in_height, int in_width, int num_classes) {
    ArchSpec arch;
    arch.in_channels = in_channels;
    arch.in_height = in_height;
    arch.in_width = in_width;
    arch.stem_channels = 16;
    arch.blocks = {{16, 1}, {16, 1}, {32, 2}, {32, 1}};
    arch.num_classes = num_classes;
    return arch;
}

void ArchSpec::validate() const {
    if (in_channels <= 0 || in_height <= 0 || in_width <= 0) {
        throw std::invalid_argument("ArchSpec: input dimensions must be positive");
    }
    if (stem_channels <= 0) throw std::invalid_argument("ArchSpec: stem_channels must be positive");
    if (num_classes <= 1) throw std::invalid_argument("ArchSpec: need at least two classes");
    int h = in_height, w = in_width;
    for (const BlockSpec& b : blocks) {
        if (b.channels <= 0) throw std::invalid_argument("ArchSpec: block channels must be positive");
        if (b.stride < 1) throw std::invalid_argument("ArchSpec: block stride must be >= 1");
        h = (h - 1) / b.stride + 1;
        w = (w - 1) / b.stride + 1;
        if (h < 1 || w < 1) throw std::invalid_argument("ArchSpec: spatial size collapsed to zero");
    }
}

namespace {

struct StageDims {
    int c = 0, h = 0, w = 0;
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    std::size_t size() const { return static_cast<std::size_t>(c) * plane(); }
    std::size_t padded_size() const { return static_cast<std::size_t>(c) * (h + 2) * (w + 2); }
};

struct BlockOffsets {
    std::size_t w1 = 0, b1 = 0, w2 = 0, b2 = 0, wp = 0, bp = 0;
    bool proj = false;
};

// Dimensions and flat-parameter offsets derived from an ArchSpec.
struct NetPlan {
    StageDims input;                  // network input
    StageDims stem;                   // stem output (stride 1)
    std::vector<StageDims> block_in;  // per block
    std::vector<StageDims> block_out;
    std::vector<int> stride;
    std::size_t stem_w = 0, stem_b = 0;
    std::vector<BlockOffsets> blocks;
    std::size_t fc_w = 0, fc_b = 0;
    std::size_t total = 0;
    int classes = 0;

    explicit NetPlan(const ArchSpec& arch) {
        arch.validate();
        input = {arch.in_channels, arch.in_height, arch.in_width};
        stem = {arch.stem_channels, arch.in_height, arch.in_width};
        StageDims cur = stem;
        std::size_t off = 0;
        stem_w = off;
        off += static_cast<std::size_t>(arch.stem_channels) * arch.in_channels * 9;
        stem_b = off;
        off += static_cast<std::size_t>(arch.stem_channels);
        for (const BlockSpec& spec : arch.blocks) {
            BlockOffsets bo;
            StageDims out;
            out.c = spec.channels;
            out.h = (cur.h - 1) / spec.stride + 1;
            out.w = (cur.w - 1) / spec.stride + 1;
            bo.proj = spec.channels != cur.c || spec.stride != 1;
            bo.w1 = off;
            off += static_cast<std::size_t>(out.c) * cur.c * 9;
            bo.b1 = off;
            off += static_cast<std::size_t>(out.c);
            bo.w2 = off;
            off += static_cast<std::size_t>(out.c) * out.c * 9;
            bo.b2 = off;
            off += static_cast<std::size_t>(out.c);
            if (bo.proj) {
                bo.wp = off;
                off += static_cast<std::size_t>(out.c) * cur.c;
                bo.bp = off;
                off += static_cast<std::size_t>(out.c);
            }
            block_in.push_back(cur);
            block_out.push_back(out);
            stride.push_back(spec.stride);
            blocks.push_back(bo);
            cur = out;
        }
        classes = arch.num_classes;
        fc_w = off;
        off += static_cast<std::size_t>(classes) * cur.c;
        fc_b = off;
        off += static_cast<std::size_t>(classes);
        total = off;
    }

    const StageDims& features() const { return block_out.empty() ? stem : block_out.back(); }
};

// ---------------------------------------------------------------------------
// Convolution kernels. Inputs to the 3x3 kernels are zero-padded by one pixel
// so the hot loops carry no bounds checks.
// ---------------------------------------------------------------------------

void zero_pad1(const double* src, const StageDims& d, double* dst) {
    const int ph = d.h + 2, pw = d.w + 2;
    std::memset(dst, 0, static_cast<std::size_t>(d.c) * ph * pw * sizeof(double));
    for (int c = 0; c < d.c; ++c) {
        for (int y = 0; y < d.h; ++y) {
            std::memcpy(dst + (static_cast<std::size_t>(c) * ph + y + 1) * pw + 1,
                        src + (static_cast<std::size_t>(c) * d.h + y) * d.w, static_cast<std::size_t>(d.w) * sizeof(double));
        }
    }
}

void crop_pad1(const double* padded, const StageDims& d, double* dst) {
    const int pw = d.w + 2;
    for (int c = 0; c < d.c; ++c) {
        for (int y = 0; y < d.h; ++y) {
            std::memcpy(dst + (static_cast<std::size_t>(c) * d.h + y) * d.w,
                        padded + (static_cast<std::size_t>(c) * (d.h + 2) + y + 1) * pw + 1,
                        static_cast<std::size_t>(d.w) * sizeof(double));
        }
    }
}

void conv3x3_fwd(const double* pin, const StageDims& in, const double* w, const double* b, int stride,
                 double* out, const StageDims& od) {
    const int pw = in.w + 2;
    const std::size_t pplane = static_cast<std::size_t>(in.h + 2) * pw;
    const std::size_t oplane_n = od.plane();
    for (int co = 0; co < od.c; ++co) {
        double* oplane = out + static_cast<std::size_t>(co) * oplane_n;
        const double bias = b[co];
        for (std::size_t i = 0; i < oplane_n; ++i) oplane[i] = bias;
        for (int ci = 0; ci < in.c; ++ci) {
            const double* iplane = pin + static_cast<std::size_t>(ci) * pplane;
            const double* wk = w + (static_cast<std::size_t>(co) * in.c + ci) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const double wv = wk[ky * 3 + kx];
                    for (int oy = 0; oy < od.h; ++oy) {
                        const double* irow = iplane + static_cast<std::size_t>(oy * stride + ky) * pw + kx;
                        double* orow = oplane + static_cast<std::size_t>(oy) * od.w;
                        if (stride == 1) {
                            for (int ox = 0; ox < od.w; ++ox) orow[ox] += wv * irow[ox];
                        } else {
                            for (int ox = 0; ox < od.w; ++ox) orow[ox] += wv * irow[ox * stride];
                        }
                    }
                }
            }
        }
    }
}

void conv3x3_bwd_input(const double* dout, const StageDims& od, const double* w, const StageDims& in, int stride,
                       double* dpin /* zeroed padded buffer, accumulated */) {
    const int pw = in.w + 2;
    const std::size_t pplane = static_cast<std::size_t>(in.h + 2) * pw;
    const std::size_t oplane_n = od.plane();
    for (int co = 0; co < od.c; ++co) {
        const double* gplane = dout + static_cast<std::size_t>(co) * oplane_n;
        for (int ci = 0; ci < in.c; ++ci) {
            double* dplane = dpin + static_cast<std::size_t>(ci) * pplane;
            const double* wk = w + (static_cast<std::size_t>(co) * in.c + ci) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    const double wv = wk[ky * 3 + kx];
                    for (int oy = 0; oy < od.h; ++oy) {
                        const double* grow = gplane + static_cast<std::size_t>(oy) * od.w;
                        double* drow = dplane + static_cast<std::size_t>(oy * stride + ky) * pw + kx;
                        if (stride == 1) {
                            for (int ox = 0; ox < od.w; ++ox) drow[ox] += wv * grow[ox];
                        } else {
                            for (int ox = 0; ox < od.w; ++ox) drow[ox * stride] += wv * grow[ox];
                        }
                    }
                }
            }
        }
    }
}

// Row dot product with four accumulators to hide add latency; the summation
// order is fixed by this code, not by thread count.
double dot_rows(const double* a, const double* b, int n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    int i = 0;
    for (; i + 4 <= n; i += 4) {
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    for (; i < n; ++i) s0 += a[i] * b[i];
    return ((s0 + s1) + s2) + s3;
}

void conv3x3_bwd_params(const double* dout, const StageDims& od, const double* pin, const StageDims& in, int stride,
                        double* dw, double* db) {
    const int pw = in.w + 2;
    const std::size_t pplane = static_cast<std::size_t>(in.h + 2) * pw;
    const std::size_t oplane_n = od.plane();
    for (int co = 0; co < od.c; ++co) {
        const double* gplane = dout + static_cast<std::size_t>(co) * oplane_n;
        double bsum = 0.0;
        for (std::size_t i = 0; i < oplane_n; ++i) bsum += gplane[i];
        db[co] += bsum;
        for (int ci = 0; ci < in.c; ++ci) {
            const double* iplane = pin + static_cast<std::size_t>(ci) * pplane;
            double* dwk = dw + (static_cast<std::size_t>(co) * in.c + ci) * 9;
            for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                    double acc = 0.0;
                    for (int oy = 0; oy < od.h; ++oy) {
                        const double* grow = gplane + static_cast<std::size_t>(oy) * od.w;
                        const double* irow = iplane + static_cast<std::size_t>(oy * stride + ky) * pw + kx;
                        if (stride == 1) {
                            acc += dot_rows(grow, irow, od.w);
                        } else {
                            double s = 0.0;
                            for (int ox = 0; ox < od.w; ++ox) s += grow[ox] * irow[ox * stride];
                            acc += s;
                        }
                    }
                    dwk[ky * 3 + kx] += acc;
                }
            }
        }
    }
}

// 1x1 projection, applied on the unpadded block input, results added on top
// of the residual branch output.
void conv1x1_fwd_add(const double* src, const StageDims& in, const double* w, const double* b, int stride,
                     double* out, const StageDims& od) {
    const std::size_t oplane_n = od.plane();
    for (int co = 0; co < od.c; ++co) {
        double* oplane = out + static_cast<std::size_t>(co) * oplane_n;
        const double bias = b[co];
        for (std::size_t i = 0; i < oplane_n; ++i) oplane[i] += bias;
        for (int ci = 0; ci < in.c; ++ci) {
            const double wv = w[static_cast<std::size_t>(co) * in.c + ci];
            const double* iplane = src + static_cast<std::size_t>(ci) * in.plane();
            for (int oy = 0; oy < od.h; ++oy) {
                const double* irow = iplane + static_cast<std::size_t>(oy * stride) * in.w;
                double* orow = oplane + static_cast<std::size_t>(oy) * od.w;
                for (int ox = 0; ox < od.w; ++ox) orow[ox] += wv * irow[ox * stride];
            }
        }
    }
}

void conv1x1_bwd(const double* dout, const StageDims& od, const double* src, const StageDims& in, const double* w,
                 int stride, double* dsrc /* accumulated */, double* dw, double* db, bool want_params) {
    const std::size_t oplane_n = od.plane();
    for (int co = 0; co < od.c; ++co) {
        const double* gplane = dout + static_cast<std::size_t>(co) * oplane_n;
        if (want_params) {
            double bsum = 0.0;
            for (std::size_t i = 0; i < oplane_n; ++i) bsum += gplane[i];
            db[co] += bsum;
        }
        for (int ci = 0; ci < in.c; ++ci) {
            const double wv = w[static_cast<std::size_t>(co) * in.c + ci];
            const double* iplane = src + static_cast<std::size_t>(ci) * in.plane();
            double* dplane = dsrc + static_cast<std::size_t>(ci) * in.plane();
            double acc = 0.0;
            for (int oy = 0; oy < od.h; ++oy) {
                const double* grow = gplane + static_cast<std::size_t>(oy) * od.w;
                const double* irow = iplane + static_cast<std::size_t>(oy * stride) * in.w;
                double* drow = dplane + static_cast<std::size_t>(oy * stride) * in.w;
                for (int ox = 0; ox < od.w; ++ox) {
                    drow[ox * stride] += wv * grow[ox];
                    acc += grow[ox] * irow[ox * stride];
                }
            }
            if (want_params) dw[static_cast<std::size_t>(co) * in.c + ci] += acc;
        }
    }
}

void relu_inplace(double* v, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) v[i] = v[i] > 0.0 ? v[i] : 0.0;
}

// ---------------------------------------------------------------------------
// Per-item pipeline
// ---------------------------------------------------------------------------

struct BlockBuffers {
    std::vector<double> pad_x;    // padded block input
    std::vector<double> a1;       // ReLU(conv1(x))
    std::vector<double> pad_a1;
    std::vector<double> d_pad;    // gradient scratch, sized for the larger pad
};

struct Workspace {
    const NetPlan& plan;
    std::vector<double> pad_in;
    std::vector<std::vector<double>> act;    // act[0] = stem output, act[i+1] = block i output
    std::vector<std::vector<double>> d_act;  // same shapes
    std::vector<BlockBuffers> blocks;
    std::vector<double> gap;
    std::vector<double> logits;
    std::vector<double> dlogits;
    std::vector<double> d_gap;
    std::vector<double> d_pad_in;

    explicit Workspace(const NetPlan& p) : plan(p) {
        pad_in.resize(p.input.padded_size());
        d_pad_in.resize(p.input.padded_size());
        act.emplace_back(p.stem.size());
        d_act.emplace_back(p.stem.size());
        for (std::size_t i = 0; i < p.block_in.size(); ++i) {
            act.emplace_back(p.block_out[i].size());
            d_act.emplace_back(p.block_out[i].size());
            BlockBuffers bb;
            bb.pad_x.resize(p.block_in[i].padded_size());
            bb.a1.resize(p.block_out[i].size());
            bb.pad_a1.resize(p.block_out[i].padded_size());
            bb.d_pad.resize(std::max(p.block_in[i].padded_size(), p.block_out[i].padded_size()));
            blocks.push_back(std::move(bb));
        }
        gap.resize(static_cast<std::size_t>(p.features().c));
        d_gap.resize(gap.size());
        logits.resize(static_cast<std::size_t>(p.classes));
        dlogits.resize(logits.size());
    }
};

void forward_item(const NetPlan& plan, const double* params, const double* input, Workspace& ws) {
    zero_pad1(input, plan.input, ws.pad_in.data());
    conv3x3_fwd(ws.pad_in.data(), plan.input, params + plan.stem_w, params + plan.stem_b, 1, ws.act[0].data(),
                plan.stem);
    relu_inplace(ws.act[0].data(), plan.stem.size());

    for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
        const StageDims& din = plan.block_in[i];
        const StageDims& dout = plan.block_out[i];
        const BlockOffsets& off = plan.blocks[i];
        const double* x = ws.act[i].data();
        double* y = ws.act[i + 1].data();
        BlockBuffers& bb = ws.blocks[i];

        zero_pad1(x, din, bb.pad_x.data());
        conv3x3_fwd(bb.pad_x.data(), din, params + off.w1, params + off.b1, plan.stride[i], bb.a1.data(), dout);
        relu_inplace(bb.a1.data(), dout.size());
        zero_pad1(bb.a1.data(), dout, bb.pad_a1.data());
        conv3x3_fwd(bb.pad_a1.data(), dout, params + off.w2, params + off.b2, 1, y, dout);
        if (off.proj) {
            conv1x1_fwd_add(x, din, params + off.wp, params + off.bp, plan.stride[i], y, dout);
        } else {
            for (std::size_t k = 0; k < dout.size(); ++k) y[k] += x[k];
        }
    }

    const StageDims& feat = plan.features();
    const double* flast = ws.act.back().data();
    const double inv_plane = 1.0 / static_cast<double>(feat.plane());
    for (int c = 0; c < feat.c; ++c) {
        double s = 0.0;
        const double* p = flast + static_cast<std::size_t>(c) * feat.plane();
        for (std::size_t k = 0; k < feat.plane(); ++k) s += p[k];
        ws.gap[static_cast<std::size_t>(c)] = s * inv_plane;
    }
    const double* fw = params + plan.fc_w;
    const double* fb = params + plan.fc_b;
    for (int k = 0; k < plan.classes; ++k) {
        double s = fb[k];
        for (int c = 0; c < feat.c; ++c) s += fw[static_cast<std::size_t>(k) * feat.c + c] * ws.gap[static_cast<std::size_t>(c)];
        ws.logits[static_cast<std::size_t>(k)] = s;
    }
}

// Backpropagates ws.dlogits. Parameter gradients accumulate into `grad`
// (may be null for input-only mode); input gradients land in `dinput`
// (may be null when only parameter gradients are needed).
void backward_item(const NetPlan& plan, const double* params, Workspace& ws, double* grad, double* dinput) {
    const bool want_params = grad != nullptr;
    const StageDims& feat = plan.features();

    if (want_params) {
        double* dfw = grad + plan.fc_w;
        double* dfb = grad + plan.fc_b;
        for (int k = 0; k < plan.classes; ++k) {
            const double g = ws.dlogits[static_cast<std::size_t>(k)];
            dfb[k] += g;
            for (int c = 0; c < feat.c; ++c) dfw[static_cast<std::size_t>(k) * feat.c + c] += g * ws.gap[static_cast<std::size_t>(c)];
        }
    }
    const double* fw = params + plan.fc_w;
    for (int c = 0; c < feat.c; ++c) {
        double s = 0.0;
        for (int k = 0; k < plan.classes; ++k) s += fw[static_cast<std::size_t>(k) * feat.c + c] * ws.dlogits[static_cast<std::size_t>(k)];
        ws.d_gap[static_cast<std::size_t>(c)] = s;
    }

    // spread the pooled gradient uniformly over the feature plane
    std::vector<double>& d_last = ws.d_act.back();
    const double inv_plane = 1.0 / static_cast<double>(feat.plane());
    for (int c = 0; c < feat.c; ++c) {
        const double g = ws.d_gap[static_cast<std::size_t>(c)] * inv_plane;
        double* p = d_last.data() + static_cast<std::size_t>(c) * feat.plane();
        for (std::size_t k = 0; k < feat.plane(); ++k) p[k] = g;
    }

    for (std::size_t ii = plan.blocks.size(); ii-- > 0;) {
        const StageDims& din = plan.block_in[ii];
        const StageDims& dout = plan.block_out[ii];
        const BlockOffsets& off = plan.blocks[ii];
        BlockBuffers& bb = ws.blocks[ii];
        const double* g_out = ws.d_act[ii + 1].data();
        double* g_in = ws.d_act[ii].data();

        // conv2
        std::fill(bb.d_pad.begin(), bb.d_pad.begin() + static_cast<std::ptrdiff_t>(dout.padded_size()), 0.0);
        conv3x3_bwd_input(g_out, dout, params + off.w2, dout, 1, bb.d_pad.data());
        if (want_params) {
            conv3x3_bwd_params(g_out, dout, bb.pad_a1.data(), dout, 1, grad + off.w2, grad + off.b2);
        }
        // The skip gradient must land in g_in before d_a1 overwrites the
        // g_out storage below.
        if (off.proj) {
            std::fill(g_in, g_in + din.size(), 0.0);
            conv1x1_bwd(g_out, dout, ws.act[ii].data(), din, params + off.wp, plan.stride[ii], g_in,
                        want_params ? grad + off.wp : nullptr, want_params ? grad + off.bp : nullptr, want_params);
        } else {
            std::memcpy(g_in, g_out, din.size() * sizeof(double));
        }
        std::vector<double>& d_a1 = ws.d_act[ii + 1];
        crop_pad1(bb.d_pad.data(), dout, d_a1.data());
        {
            const double* a1 = bb.a1.data();
            double* d = d_a1.data();
            for (std::size_t k = 0; k < dout.size(); ++k) d[k] = a1[k] > 0.0 ? d[k] : 0.0;
        }
        if (want_params) {
            conv3x3_bwd_params(d_a1.data(), dout, bb.pad_x.data(), din, plan.stride[ii], grad + off.w1,
                               grad + off.b1);
        }
        std::fill(bb.d_pad.begin(), bb.d_pad.begin() + static_cast<std::ptrdiff_t>(din.padded_size()), 0.0);
        conv3x3_bwd_input(d_a1.data(), dout, params + off.w1, din, plan.stride[ii], bb.d_pad.data());
        // add the conv path onto the skip gradient already in g_in
        {
            const int pw = din.w + 2;
            for (int c = 0; c < din.c; ++c) {
                for (int y = 0; y < din.h; ++y) {
                    const double* src = bb.d_pad.data() + (static_cast<std::size_t>(c) * (din.h + 2) + y + 1) * pw + 1;
                    double* dst = g_in + (static_cast<std::size_t>(c) * din.h + y) * din.w;
                    for (int x = 0; x < din.w; ++x) dst[x] += src[x];
                }
            }
        }
    }

    // stem
    {
        double* d_stem = ws.d_act[0].data();
        const double* stem_a = ws.act[0].data();
        for (std::size_t k = 0; k < plan.stem.size(); ++k) d_stem[k] = stem_a[k] > 0.0 ? d_stem[k] : 0.0;
        if (want_params) {
            conv3x3_bwd_params(d_stem, plan.stem, ws.pad_in.data(), plan.input, 1, grad + plan.stem_w,
                               grad + plan.stem_b);
        }
        if (dinput != nullptr) {
            std::fill(ws.d_pad_in.begin(), ws.d_pad_in.end(), 0.0);
            conv3x3_bwd_input(d_stem, plan.stem, params + plan.stem_w, plan.input, 1, ws.d_pad_in.data());
            crop_pad1(ws.d_pad_in.data(), plan.input, dinput);
        }
    }
}

// Per-item softmax cross-entropy pieces; total loss is the item sum / batch.
double loss_and_dlogits(const double* logits, int label, int classes, double inv_batch, double* dlogits) {
    double m = logits[0];
    for (int k = 1; k < classes; ++k) m = std::max(m, logits[k]);
    double sumexp = 0.0;
    for (int k = 0; k < classes; ++k) sumexp += std::exp(logits[k] - m);
    const double log_z = std::log(sumexp);
    for (int k = 0; k < classes; ++k) {
        const double p = std::exp(logits[k] - m) / sumexp;
        dlogits[k] = (p - (k == label ? 1.0 : 0.0)) * inv_batch;
    }
    return -(logits[label] - m - log_z);
}

enum class BatchMode { forward_only, full_gradients, input_gradients };

struct BatchResult {
    std::vector<double> logits;      // n x classes
    std::vector<double> item_loss;   // n (not yet divided by n)
    std::vector<double> input_grads; // n x input size (modes with input grads)
    std::vector<double> param_grads; // layout-sized (full mode, merged in item order)
};

void check_batch(const NetPlan& plan, const ArchSpec& arch, std::span<const ImageTensor> batch) {
    (void)plan;
    for (const ImageTensor& img : batch) {
        if (img.channels() != arch.in_channels || img.height() != arch.in_height || img.width() != arch.in_width) {
            throw ShapeMismatch("batch image shape does not match the network input shape");
        }
    }
}

BatchResult run_batch(const NetPlan& plan, const double* params, const std::vector<const double*>& items,
                      std::span<const int> labels, BatchMode mode, int threads) {
    const std::size_t n = items.size();
    const int classes = plan.classes;
    BatchResult res;
    res.logits.resize(n * static_cast<std::size_t>(classes));
    const bool want_loss = mode != BatchMode::forward_only;
    const bool want_params = mode == BatchMode::full_gradients;
    if (want_loss) {
        if (labels.size() != n) throw ShapeMismatch("label count does not match batch size");
        for (int l : labels) {
            if (l < 0 || l >= classes) throw ShapeMismatch("label outside [0, num_classes)");
        }
        res.item_loss.resize(n);
        res.input_grads.resize(n * plan.input.size());
    }
    std::vector<double> item_param_grads;
    if (want_params) item_param_grads.assign(n * plan.total, 0.0);

    const double inv_batch = want_loss ? 1.0 / static_cast<double>(n) : 0.0;
    parallel_for(static_cast<std::int64_t>(n), threads, [&](std::int64_t lo, std::int64_t hi) {
        Workspace ws(plan);
        for (std::int64_t i = lo; i < hi; ++i) {
            forward_item(plan, params, items[static_cast<std::size_t>(i)], ws);
            std::copy(ws.logits.begin(), ws.logits.end(),
                      res.logits.begin() + static_cast<std::ptrdiff_t>(i * classes));
            if (!want_loss) continue;
            res.item_loss[static_cast<std::size_t>(i)] = loss_and_dlogits(
                ws.logits.data(), labels[static_cast<std::size_t>(i)], classes, inv_batch, ws.dlogits.data());
            double* grad = want_params ? item_param_grads.data() + static_cast<std::size_t>(i) * plan.total : nullptr;
            double* dinput = res.input_grads.data() + static_cast<std::size_t>(i) * plan.input.size();
            backward_item(plan, params, ws, grad, dinput);
        }
    });

    if (want_params) {
        res.param_grads.assign(plan.total, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* g = item_param_grads.data() + i * plan.total;
            double* acc = res.param_grads.data();
            for (std::size_t k = 0; k < plan.total; ++k) acc[k] += g[k];
        }
    }
    return res;
}

std::vector<const double*> collect_items(std::span<const ImageTensor> batch) {
    std::vector<const double*> items;
    items.reserve(batch.size());
    for (const ImageTensor& img : batch) items.push_back(img.data().data());
    return items;
}

}  // namespace

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

std::vector<ParamPiece> param_layout(const ArchSpec& arch) {
    const NetPlan plan(arch);
    std::vector<ParamPiece> pieces;
    auto add = [&pieces](const std::string& name, std::size_t off, std::size_t count, std::size_t fan_in,
                         bool is_bias) {
        pieces.push_back(ParamPiece{name, off, count, fan_in, is_bias});
    };
    add("stem.w", plan.stem_w, static_cast<std::size_t>(plan.stem.c) * plan.input.c * 9,
        static_cast<std::size_t>(plan.input.c) * 9, false);
    add("stem.b", plan.stem_b, static_cast<std::size_t>(plan.stem.c), 0, true);
    for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
        const BlockOffsets& off = plan.blocks[i];
        const int cin = plan.block_in[i].c;
        const int cout = plan.block_out[i].c;
        const std::string tag = "block" + std::to_string(i);
        add(tag + ".conv1.w", off.w1, static_cast<std::size_t>(cout) * cin * 9, static_cast<std::size_t>(cin) * 9,
            false);
        add(tag + ".conv1.b", off.b1, static_cast<std::size_t>(cout), 0, true);
        add(tag + ".conv2.w", off.w2, static_cast<std::size_t>(cout) * cout * 9, static_cast<std::size_t>(cout) * 9,
            false);
        add(tag + ".conv2.b", off.b2, static_cast<std::size_t>(cout), 0, true);
        if (off.proj) {
            add(tag + ".proj.w", off.wp, static_cast<std::size_t>(cout) * cin, static_cast<std::size_t>(cin), false);
            add(tag + ".proj.b", off.bp, static_cast<std::size_t>(cout), 0, true);
        }
    }
    add("fc.w", plan.fc_w, static_cast<std::size_t>(plan.classes) * plan.features().c,
        static_cast<std::size_t>(plan.features().c), false);
    add("fc.b", plan.fc_b, static_cast<std::size_t>(plan.classes), 0, true);
    return pieces;
}

std::size_t param_count(const ArchSpec& arch) { return NetPlan(arch).total; }

MicroResNet init_params(const ArchSpec& arch, std::uint64_t seed) {
    MicroResNet net;
    net.arch = arch;
    net.params.assign(param_count(arch), 0.0);
    Rng rng(seed);
    for (const ParamPiece& piece : param_layout(arch)) {
        if (piece.is_bias) continue;
        const double stddev = std::sqrt(2.0 / static_cast<double>(piece.fan_in));
        for (std::size_t k = 0; k < piece.count; ++k) net.params[piece.offset + k] = stddev * rng.gaussian();
    }
    return net;
}

std::vector<double> forward(const MicroResNet& net, std::span<const ImageTensor> batch, int threads) {
    const NetPlan plan(net.arch);
    check_batch(plan, net.arch, batch);
    BatchResult res = run_batch(plan, net.params.data(), collect_items(batch), {}, BatchMode::forward_only, threads);
    return std::move(res.logits);
}

LossGrad cross_entropy_loss(std::span<const double> logits, std::span<const int> labels, int num_classes) {
    if (num_classes <= 0 || labels.empty() || logits.size() != labels.size() * static_cast<std::size_t>(num_classes)) {
        throw ShapeMismatch("cross_entropy_loss: logits size must be batch * num_classes");
    }
    LossGrad out;
    out.dlogits.resize(logits.size());
    const double inv_batch = 1.0 / static_cast<double>(labels.size());
    double total = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes) throw ShapeMismatch("cross_entropy_loss: label out of range");
        total += loss_and_dlogits(logits.data() + i * static_cast<std::size_t>(num_classes), labels[i], num_classes,
                                  inv_batch, out.dlogits.data() + i * static_cast<std::size_t>(num_classes));
    }
    out.loss = total / static_cast<double>(labels.size());
    return out;
}

GradientSet backward(const MicroResNet& net, std::span<const ImageTensor> batch, std::span<const int> labels,
                     int threads) {
    const NetPlan plan(net.arch);
    check_batch(plan, net.arch, batch);
    if (batch.empty()) throw ShapeMismatch("backward: empty batch");
    BatchResult res =
        run_batch(plan, net.params.data(), collect_items(batch), labels, BatchMode::full_gradients, threads);
    GradientSet out;
    out.params = std::move(res.param_grads);
    out.input = std::move(res.input_grads);
    out.logits = std::move(res.logits);
    double total = 0.0;
    for (double l : res.item_loss) total += l;
    out.loss = total / static_cast<double>(batch.size());
    return out;
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("TrainConfig: learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("TrainConfig: momentum must be in [0, 1)");
    if (weight_decay < 0.0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
    if (epochs <= 0) throw std::invalid_argument("TrainConfig: epochs must be positive");
    if (batch_size <= 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
}

double cosine_lr(int epoch, const TrainConfig& cfg) {
    cfg.validate();
    if (epoch < 0 || epoch > cfg.epochs) throw std::invalid_argument("cosine_lr: epoch outside [0, T_max]");
    constexpr double kEtaMin = 0.0;
    constexpr double kPi = 3.14159265358979323846;
    const double t = static_cast<double>(epoch) / static_cast<double>(cfg.epochs);
    return kEtaMin + (cfg.learning_rate - kEtaMin) * (1.0 + std::cos(kPi * t)) / 2.0;
}

void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity, double lr,
              const TrainConfig& cfg) {
    if (params.size() != grads.size() || params.size() != velocity.size()) {
        throw ShapeMismatch("sgd_step: parameter, gradient, and velocity sizes differ");
    }
    const double wd = cfg.weight_decay;
    const double m = cfg.momentum;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[i] + wd * params[i];
        velocity[i] = m * velocity[i] + g;
        params[i] -= lr * velocity[i];
    }
}

int argmax_class(std::span<const double> logits_row) {
    int best = 0;
    for (int k = 1; k < static_cast<int>(logits_row.size()); ++k) {
        if (logits_row[static_cast<std::size_t>(k)] > logits_row[static_cast<std::size_t>(best)]) best = k;
    }
    return best;
}

TrainResult train_model(const MicroResNet& initial, const LabeledDataset& train, const TrainConfig& cfg,
                        int threads) {
    cfg.validate();
    if (train.size() == 0) throw std::invalid_argument("train_model: empty dataset");
    if (train.num_classes() != initial.arch.num_classes) {
        throw ShapeMismatch("train_model: dataset class count does not match the network");
    }
    const NetPlan plan(initial.arch);
    check_batch(plan, initial.arch, train.images());

    TrainResult result;
    result.net = initial;
    std::vector<double> velocity(result.net.params.size(), 0.0);

    const std::size_t n = train.size();
    std::vector<std::uint32_t> order(n);
    std::vector<const double*> items;
    std::vector<int> labels;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cosine_lr(epoch, cfg);
        Rng rng(cfg.seed + static_cast<std::uint64_t>(epoch));
        for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<std::uint32_t>(i);
        fisher_yates(order, rng);

        double loss_sum = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t stop = std::min(n, start + static_cast<std::size_t>(cfg.batch_size));
            items.clear();
            labels.clear();
            for (std::size_t i = start; i < stop; ++i) {
                items.push_back(train.image(order[i]).data().data());
                labels.push_back(train.label(order[i]));
            }
            BatchResult res =
                run_batch(plan, result.net.params.data(), items, labels, BatchMode::full_gradients, threads);
            for (double l : res.item_loss) loss_sum += l;
            for (std::size_t i = 0; i < items.size(); ++i) {
                const int pred = argmax_class(
                    std::span<const double>(res.logits.data() + i * static_cast<std::size_t>(plan.classes),
                                            static_cast<std::size_t>(plan.classes)));
                if (pred == labels[i]) ++correct;
            }
            sgd_step(result.net.params, res.param_grads, velocity, lr, cfg);
        }
        EpochStats stats;
        stats.epoch = epoch;
        stats.learning_rate = lr;
        stats.mean_loss = loss_sum / static_cast<double>(n);
        stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
        result.history.push_back(stats);
    }
    return result;
}

double evaluate_accuracy(const MicroResNet& net, const LabeledDataset& ds, int threads) {
    if (ds.size() == 0) throw std::invalid_argument("evaluate_accuracy: empty dataset");
    const NetPlan plan(net.arch);
    check_batch(plan, net.arch, ds.images());
    constexpr std::size_t kEvalBatch = 256;
    std::size_t correct = 0;
    std::vector<const double*> items;
    for (std::size_t start = 0; start < ds.size(); start += kEvalBatch) {
        const std::size_t stop = std::min(ds.size(), start + kEvalBatch);
        items.clear();
        for (std::size_t i = start; i < stop; ++i) items.push_back(ds.image(i).data().data());
        BatchResult res = run_batch(plan, net.params.data(), items, {}, BatchMode::forward_only, threads);
        for (std::size_t i = 0; i < items.size(); ++i) {
            const int pred =
                argmax_class(std::span<const double>(res.logits.data() + i * static_cast<std::size_t>(plan.classes),
                                                     static_cast<std::size_t>(plan.classes)));
            if (pred == ds.label(start + i)) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace detail {

std::vector<double> input_gradients(const MicroResNet& net, std::span<const ImageTensor> batch,
                                    std::span<const int> labels, int threads) {
    const NetPlan plan(net.arch);
    check_batch(plan, net.arch, batch);
    if (batch.empty()) throw ShapeMismatch("input_gradients: empty batch");
    BatchResult res =
        run_batch(plan, net.params.data(), collect_items(batch), labels, BatchMode::input_gradients, threads);
    return std::move(res.input_grads);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoints (layout in docs/formats.md)
// ---------------------------------------------------------------------------

static constexpr char kCheckpointMagic[9] = "NLMNETv1";

void save_checkpoint(const MicroResNet& net, std::uint64_t seed, int epoch, const std::filesystem::path& path) {
    std::string out;
    out.reserve(64 + net.params.size() * 8);
    out.append(kCheckpointMagic, 8);
    binio::append_u32(out, 1);
    binio::append_u32(out, static_cast<std::uint32_t>(net.arch.in_channels));
    binio::append_u32(out, static_cast<std::uint32_t>(net.arch.in_height));
    binio::append_u32(out, static_cast<std::uint32_t>(net.arch.in_width));
    binio::append_u32(out, static_cast<std::uint32_t>(net.arch.stem_channels));
    binio::append_u32(out, static_cast<std::uint32_t>(net.arch.num_classes));
    binio::append_u32(out, static_cast<std::uint32_t>(net.arch.blocks.size()));
    for (const BlockSpec& b : net.arch.blocks) {
        binio::append_u32(out, static_cast<std::uint32_t>(b.channels));
        binio::append_u32(out, static_cast<std::uint32_t>(b.stride));
    }
    binio::append_u64(out, seed);
    binio::append_u32(out, static_cast<std::uint32_t>(epoch));
    binio::append_u64(out, net.params.size());
    for (double v : net.params) binio::append_f64(out, v);
    binio::write_bytes(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    const std::vector<std::uint8_t> bytes = read_file_bytes(path);
    binio::Cursor cur(bytes, path.string());
    if (cur.str(8) != std::string(kCheckpointMagic, 8)) {
        throw IoError(IoErrc::bad_magic, path.string() + ": not a model checkpoint");
    }
    const std::uint32_t version = cur.u32();
    if (version != 1) {
        throw IoError(IoErrc::version_mismatch, path.string() + ": checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.net.arch.in_channels = static_cast<int>(cur.u32());
    ckpt.net.arch.in_height = static_cast<int>(cur.u32());
    ckpt.net.arch.in_width = static_cast<int>(cur.u32());
    ckpt.net.arch.stem_channels = static_cast<int>(cur.u32());
    ckpt.net.arch.num_classes = static_cast<int>(cur.u32());
    const std::uint32_t nblocks = cur.u32();
    for (std::uint32_t i = 0; i < nblocks; ++i) {
        BlockSpec b;
        b.channels = static_cast<int>(cur.u32());
        b.stride = static_cast<int>(cur.u32());
        ckpt.net.arch.blocks.push_back(b);
    }
    ckpt.seed = cur.u64();
    ckpt.epoch = static_cast<int>(cur.u32());
    const std::uint64_t count = cur.u64();
    if (count != param_count(ckpt.net.arch)) {
        throw IoError(IoErrc::parse_error, path.string() + ": parameter count does not match architecture");
    }
    ckpt.net.params.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) ckpt.net.params[i] = cur.f64();
    return ckpt;
}

}  // namespace nlmdef
