#pragma once

#include <algorithm>
#include <cstring>
#include <random>

#include <cblas.h>

#include "wnet/tensor.hpp"

namespace wnet {

enum class Padding { Same, Valid };

namespace detail {

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, float alpha,
                 const float* a, int lda, const float* b, int ldb, float beta,
                 float* c, int ldc) {
    cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

inline void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
                 const double* a, int lda, const double* b, int ldb, double beta,
                 double* c, int ldc) {
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, m, n, k, alpha, a, lda, b,
                ldb, beta, c, ldc);
}

// cols is (C*k*k) x (rows*OW) for output rows [row0, row0+rows).
template <typename T>
void im2col_rows(const T* x, std::int64_t c_in, std::int64_t h, std::int64_t w,
                 std::int64_t k, std::int64_t pad, std::int64_t stride,
                 std::int64_t ow, std::int64_t row0, std::int64_t rows, T* cols) {
    const std::int64_t cols_n = rows * ow;
    for (std::int64_t c = 0; c < c_in; ++c) {
        for (std::int64_t ky = 0; ky < k; ++ky) {
            for (std::int64_t kx = 0; kx < k; ++kx) {
                T* dst = cols + ((c * k + ky) * k + kx) * cols_n;
                for (std::int64_t oy = row0; oy < row0 + rows; ++oy) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        std::fill(dst, dst + ow, T{0});
                        dst += ow;
                        continue;
                    }
                    const T* src_row = x + iy * w;
                    if (stride == 1) {
                        const std::int64_t ix0 = kx - pad;
                        std::int64_t lo = std::max<std::int64_t>(0, -ix0);
                        std::int64_t hi = std::min<std::int64_t>(ow, w - ix0);
                        if (lo > 0) std::fill(dst, dst + lo, T{0});
                        if (hi > lo)
                            std::memcpy(dst + lo, src_row + ix0 + lo,
                                        static_cast<std::size_t>(hi - lo) * sizeof(T));
                        if (hi < ow) std::fill(dst + std::max(hi, lo), dst + ow, T{0});
                        dst += ow;
                    } else {
                        for (std::int64_t ox = 0; ox < ow; ++ox) {
                            const std::int64_t ix = ox * stride + kx - pad;
                            *dst++ = (ix >= 0 && ix < w) ? src_row[ix] : T{0};
                        }
                    }
                }
            }
        }
        x += h * w;
    }
}

// Scatter-add of column gradients back onto the (padded) input plane.
template <typename T>
void col2im_rows(const T* cols, std::int64_t c_in, std::int64_t h, std::int64_t w,
                 std::int64_t k, std::int64_t pad, std::int64_t stride,
                 std::int64_t ow, std::int64_t row0, std::int64_t rows, T* dx) {
    const std::int64_t cols_n = rows * ow;
    for (std::int64_t c = 0; c < c_in; ++c) {
        T* dxc = dx + c * h * w;
        for (std::int64_t ky = 0; ky < k; ++ky) {
            for (std::int64_t kx = 0; kx < k; ++kx) {
                const T* src = cols + ((c * k + ky) * k + kx) * cols_n;
                for (std::int64_t oy = row0; oy < row0 + rows; ++oy) {
                    const std::int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= h) {
                        src += ow;
                        continue;
                    }
                    T* dst_row = dxc + iy * w;
                    for (std::int64_t ox = 0; ox < ow; ++ox) {
                        const std::int64_t ix = ox * stride + kx - pad;
                        if (ix >= 0 && ix < w) dst_row[ix] += src[ox];
                    }
                    src += ow;
                }
            }
        }
    }
}

template <typename T>
std::vector<T>& conv_scratch() {
    static thread_local std::vector<T> buf;
    return buf;
}

constexpr std::int64_t kConvChunkElems = 8 << 20;  // cap on im2col buffer

}  // namespace detail

struct Conv2dGeometry {
    std::int64_t pad = 0;
    std::int64_t out_h = 0;
    std::int64_t out_w = 0;
};

inline Conv2dGeometry conv2d_geometry(std::int64_t h, std::int64_t w, std::int64_t k,
                                      Padding padding, std::int64_t stride) {
    Conv2dGeometry g;
    g.pad = (padding == Padding::Same) ? (k - 1) / 2 : 0;
    g.out_h = (h + 2 * g.pad - k) / stride + 1;
    g.out_w = (w + 2 * g.pad - k) / stride + 1;
    return g;
}

// Cross-correlation of NCHW input with FCkk weights plus bias.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 Padding padding = Padding::Same, std::int64_t stride = 1,
                 Tape<T>* tape = nullptr) {
    if (x.rank() != 4 || weight.rank() != 4)
        throw std::invalid_argument("conv2d: need NCHW input and FCkk weight, got " +
                                    shape_str(x.shape()) + " and " + shape_str(weight.shape()));
    const std::int64_t n = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t f = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != c_in || weight.dim(2) != weight.dim(3))
        throw std::invalid_argument("conv2d: weight " + shape_str(weight.shape()) +
                                    " does not match input " + shape_str(x.shape()));
    if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd");
    if (bias.numel() != f)
        throw std::invalid_argument("conv2d: bias " + shape_str(bias.shape()) +
                                    " does not match filter count " + std::to_string(f));
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
    if (padding == Padding::Valid && (h < k || w < k))
        throw std::invalid_argument("conv2d: input " + shape_str(x.shape()) +
                                    " smaller than valid kernel " + std::to_string(k));

    const auto geo = conv2d_geometry(h, w, k, padding, stride);
    const std::int64_t oh = geo.out_h, ow = geo.out_w, pad = geo.pad;
    const std::int64_t ckk = c_in * k * k;
    Tensor<T> out = Tensor<T>::zeros({n, f, oh, ow});

    const std::int64_t chunk_rows =
        std::clamp<std::int64_t>(detail::kConvChunkElems / std::max<std::int64_t>(1, ckk * ow), 1, oh);
    auto& cols = detail::conv_scratch<T>();
    cols.resize(static_cast<std::size_t>(ckk * chunk_rows * ow));

    for (std::int64_t img = 0; img < n; ++img) {
        const T* xim = x.data().data() + img * c_in * h * w;
        T* oim = out.data().data() + img * f * oh * ow;
        for (std::int64_t r0 = 0; r0 < oh; r0 += chunk_rows) {
            const std::int64_t rows = std::min(chunk_rows, oh - r0);
            detail::im2col_rows(xim, c_in, h, w, k, pad, stride, ow, r0, rows, cols.data());
            detail::gemm(false, false, static_cast<int>(f), static_cast<int>(rows * ow),
                         static_cast<int>(ckk), T{1}, weight.data().data(),
                         static_cast<int>(ckk), cols.data(), static_cast<int>(rows * ow),
                         T{0}, oim + r0 * ow, static_cast<int>(oh * ow));
        }
        for (std::int64_t fc = 0; fc < f; ++fc) {
            const T b = bias.data()[fc];
            T* dst = oim + fc * oh * ow;
            for (std::int64_t i = 0; i < oh * ow; ++i) dst[i] += b;
        }
    }

    const bool need_grad =
        x.requires_grad() || weight.requires_grad() || bias.requires_grad();
    if (detail::track(tape, need_grad)) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto wi = weight.impl();
        auto bi = bias.impl();
        auto oi = out.impl();
        tape->record(oi, [xi, wi, bi, oi, n, c_in, h, w, f, k, pad, stride, oh, ow, ckk,
                          chunk_rows] {
            std::vector<T> cols(static_cast<std::size_t>(ckk * chunk_rows * ow));
            std::vector<T> dcols;
            if (xi->requires_grad) dcols.resize(cols.size());
            for (std::int64_t img = 0; img < n; ++img) {
                const T* xim = xi->data.data() + img * c_in * h * w;
                const T* doim = oi->grad.data() + img * f * oh * ow;
                for (std::int64_t r0 = 0; r0 < oh; r0 += chunk_rows) {
                    const std::int64_t rows = std::min(chunk_rows, oh - r0);
                    if (wi->requires_grad) {
                        detail::im2col_rows(xim, c_in, h, w, k, pad, stride, ow, r0, rows,
                                            cols.data());
                        // dW += dOut_chunk * cols^T
                        detail::gemm(false, true, static_cast<int>(f), static_cast<int>(ckk),
                                     static_cast<int>(rows * ow), T{1}, doim + r0 * ow,
                                     static_cast<int>(oh * ow), cols.data(),
                                     static_cast<int>(rows * ow), T{1}, wi->grad.data(),
                                     static_cast<int>(ckk));
                    }
                    if (xi->requires_grad) {
                        // dcols = W^T * dOut_chunk, then scatter back
                        detail::gemm(true, false, static_cast<int>(ckk),
                                     static_cast<int>(rows * ow), static_cast<int>(f), T{1},
                                     wi->data.data(), static_cast<int>(ckk), doim + r0 * ow,
                                     static_cast<int>(oh * ow), T{0}, dcols.data(),
                                     static_cast<int>(rows * ow));
                        detail::col2im_rows(dcols.data(), c_in, h, w, k, pad, stride, ow, r0,
                                            rows, xi->grad.data() + img * c_in * h * w);
                    }
                }
                if (bi->requires_grad) {
                    for (std::int64_t fc = 0; fc < f; ++fc) {
                        T s{0};
                        const T* src = doim + fc * oh * ow;
                        for (std::int64_t i = 0; i < oh * ow; ++i) s += src[i];
                        bi->grad[fc] += s;
                    }
                }
            }
        });
    }
    return out;
}

// 2x2 max pooling, stride 2. Gradient goes to the first (row-major scan)
// maximal element of each window.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    if (x.rank() != 4)
        throw std::invalid_argument("maxpool2d: need NCHW input, got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (h % 2 != 0 || w % 2 != 0)
        throw std::invalid_argument("maxpool2d: extents must be even, got " +
                                    shape_str(x.shape()));
    const std::int64_t oh = h / 2, ow = w / 2;
    Tensor<T> out = Tensor<T>::zeros({n, c, oh, ow});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(out.numel()));

    const T* src = x.data().data();
    T* dst = out.data().data();
    std::int64_t oidx = 0;
    for (std::int64_t plane = 0; plane < n * c; ++plane) {
        const T* p = src + plane * h * w;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
            for (std::int64_t ox = 0; ox < ow; ++ox) {
                const std::int64_t base = (2 * oy) * w + 2 * ox;
                std::int64_t best = base;
                T bv = p[base];
                if (p[base + 1] > bv) { bv = p[base + 1]; best = base + 1; }
                if (p[base + w] > bv) { bv = p[base + w]; best = base + w; }
                if (p[base + w + 1] > bv) { bv = p[base + w + 1]; best = base + w + 1; }
                dst[oidx] = bv;
                (*argmax)[static_cast<std::size_t>(oidx)] = plane * h * w + best;
                ++oidx;
            }
        }
    }

    if (detail::track(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape->record(oi, [xi, oi, argmax] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i)
                xi->grad[static_cast<std::size_t>((*argmax)[i])] += oi->grad[i];
        });
    }
    return out;
}

// Nearest-neighbor 2x upsampling: every pixel becomes a 2x2 block.
template <typename T>
Tensor<T> upsample2x(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    if (x.rank() != 4)
        throw std::invalid_argument("upsample2x: need NCHW input, got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor<T> out = Tensor<T>::zeros({n, c, 2 * h, 2 * w});
    const T* src = x.data().data();
    T* dst = out.data().data();
    for (std::int64_t plane = 0; plane < n * c; ++plane) {
        const T* p = src + plane * h * w;
        T* q = dst + plane * 4 * h * w;
        for (std::int64_t y = 0; y < h; ++y) {
            T* row0 = q + (2 * y) * 2 * w;
            T* row1 = row0 + 2 * w;
            for (std::int64_t x2 = 0; x2 < w; ++x2) {
                const T v = p[y * w + x2];
                row0[2 * x2] = v;
                row0[2 * x2 + 1] = v;
                row1[2 * x2] = v;
                row1[2 * x2 + 1] = v;
            }
        }
    }
    if (detail::track(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape->record(oi, [xi, oi, n, c, h, w] {
            for (std::int64_t plane = 0; plane < n * c; ++plane) {
                T* gx = xi->grad.data() + plane * h * w;
                const T* go = oi->grad.data() + plane * 4 * h * w;
                for (std::int64_t y = 0; y < h; ++y) {
                    const T* row0 = go + (2 * y) * 2 * w;
                    const T* row1 = row0 + 2 * w;
                    for (std::int64_t x2 = 0; x2 < w; ++x2)
                        gx[y * w + x2] += row0[2 * x2] + row0[2 * x2 + 1] +
                                          row1[2 * x2] + row1[2 * x2 + 1];
                }
            }
        });
    }
    return out;
}

// Channel-axis concatenation, order preserved.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, Tape<T>* tape = nullptr) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    const std::int64_t n = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
    std::int64_t c_total = 0;
    bool any_grad = false;
    for (const auto& x : xs) {
        if (x.rank() != 4 || x.dim(0) != n || x.dim(2) != h || x.dim(3) != w)
            throw std::invalid_argument("concat: spatial mismatch " + shape_str(xs[0].shape()) +
                                        " vs " + shape_str(x.shape()));
        c_total += x.dim(1);
        any_grad = any_grad || x.requires_grad();
    }
    Tensor<T> out = Tensor<T>::zeros({n, c_total, h, w});
    const std::int64_t hw = h * w;
    std::int64_t c_off = 0;
    for (const auto& x : xs) {
        const std::int64_t c = x.dim(1);
        for (std::int64_t img = 0; img < n; ++img)
            std::memcpy(out.data().data() + (img * c_total + c_off) * hw,
                        x.data().data() + img * c * hw,
                        static_cast<std::size_t>(c * hw) * sizeof(T));
        c_off += c;
    }
    if (detail::track(tape, any_grad)) {
        out.set_requires_grad(true);
        std::vector<std::shared_ptr<TensorImpl<T>>> impls;
        for (const auto& x : xs) impls.push_back(x.impl());
        auto oi = out.impl();
        tape->record(oi, [impls, oi, n, c_total, hw] {
            std::int64_t c_off = 0;
            for (const auto& xi : impls) {
                const std::int64_t c = xi->shape[1];
                if (xi->requires_grad) {
                    for (std::int64_t img = 0; img < n; ++img) {
                        const T* go = oi->grad.data() + (img * c_total + c_off) * hw;
                        T* gx = xi->grad.data() + img * c * hw;
                        for (std::int64_t i = 0; i < c * hw; ++i) gx[i] += go[i];
                    }
                }
                c_off += c;
            }
        });
    }
    return out;
}

// Extract channel c of an NCHW tensor as [N,H,W].
template <typename T>
Tensor<T> slice_channel(const Tensor<T>& x, std::int64_t channel, Tape<T>* tape = nullptr) {
    if (x.rank() != 4 || channel < 0 || channel >= x.dim(1))
        throw std::invalid_argument("slice_channel: channel " + std::to_string(channel) +
                                    " out of range for " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out = Tensor<T>::zeros({n, x.dim(2), x.dim(3)});
    for (std::int64_t img = 0; img < n; ++img)
        std::memcpy(out.data().data() + img * hw,
                    x.data().data() + (img * c + channel) * hw,
                    static_cast<std::size_t>(hw) * sizeof(T));
    if (detail::track(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape->record(oi, [xi, oi, n, c, hw, channel] {
            for (std::int64_t img = 0; img < n; ++img) {
                const T* go = oi->grad.data() + img * hw;
                T* gx = xi->grad.data() + (img * c + channel) * hw;
                for (std::int64_t i = 0; i < hw; ++i) gx[i] += go[i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope, Tape<T>* tape = nullptr) {
    if (!(slope > T{0} && slope < T{1}))
        throw std::invalid_argument("leaky_relu: slope must be in (0,1)");
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const T v = x.data()[i];
        out.data()[i] = v >= T{0} ? v : slope * v;
    }
    if (detail::track(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape->record(oi, [xi, oi, slope] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i)
                xi->grad[i] += oi->grad[i] * (xi->data[i] >= T{0} ? T{1} : slope);
        });
    }
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x, Tape<T>* tape = nullptr) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const T v = x.data()[i];
        if (v >= T{0}) {
            out.data()[i] = T{1} / (T{1} + std::exp(-v));
        } else {
            const T e = std::exp(v);
            out.data()[i] = e / (T{1} + e);
        }
    }
    if (detail::track(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape->record(oi, [xi, oi] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                const T s = oi->data[i];
                xi->grad[i] += oi->grad[i] * s * (T{1} - s);
            }
        });
    }
    return out;
}

// Inverted dropout: survivors are scaled by 1/(1-rate) so eval mode is the
// identity. The mask is a pure function of the rng state.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, T rate, bool training, Rng& rng,
                  Tape<T>* tape = nullptr) {
    if (!(rate >= T{0} && rate < T{1}))
        throw std::invalid_argument("dropout: rate must be in [0,1)");
    if (!training || rate == T{0}) {
        Tensor<T> out = Tensor<T>::zeros(x.shape());
        out.data() = x.data();
        if (detail::track(tape, x.requires_grad())) {
            out.set_requires_grad(true);
            auto xi = x.impl();
            auto oi = out.impl();
            tape->record(oi, [xi, oi] {
                for (std::size_t i = 0; i < oi->grad.size(); ++i)
                    xi->grad[i] += oi->grad[i];
            });
        }
        return out;
    }
    const T keep_scale = T{1} / (T{1} - rate);
    auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(x.numel()));
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    for (auto& m : *mask)
        m = (dist(rng) < static_cast<double>(rate)) ? T{0} : keep_scale;
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i)
        out.data()[i] = x.data()[i] * (*mask)[static_cast<std::size_t>(i)];
    if (detail::track(tape, x.requires_grad())) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto oi = out.impl();
        tape->record(oi, [xi, oi, mask] {
            for (std::size_t i = 0; i < oi->grad.size(); ++i)
                xi->grad[i] += oi->grad[i] * (*mask)[i];
        });
    }
    return out;
}

template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;  // [C]
    Tensor<T> running_var;   // [C], population variance
};

// Batch normalization over (N,H,W) per channel with affine gamma/beta.
// Train mode standardizes with batch statistics and decays the running
// stats (new = momentum*old + (1-momentum)*batch); eval mode uses the
// running statistics.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool training, T momentum = T{0.9},
                     T eps = T{1e-5}, Tape<T>* tape = nullptr) {
    if (x.rank() != 4)
        throw std::invalid_argument("batch_norm: need NCHW input, got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    if (gamma.numel() != c || beta.numel() != c)
        throw std::invalid_argument("batch_norm: gamma/beta size must equal channels");
    if (training && n < 1) throw std::invalid_argument("batch_norm: empty batch");

    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const std::int64_t m = n * hw;

    auto mean = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
    auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));

    for (std::int64_t ch = 0; ch < c; ++ch) {
        T mu, var;
        if (training) {
            T s{0};
            for (std::int64_t img = 0; img < n; ++img) {
                const T* p = x.data().data() + (img * c + ch) * hw;
                for (std::int64_t i = 0; i < hw; ++i) s += p[i];
            }
            mu = s / static_cast<T>(m);
            T s2{0};
            for (std::int64_t img = 0; img < n; ++img) {
                const T* p = x.data().data() + (img * c + ch) * hw;
                for (std::int64_t i = 0; i < hw; ++i) {
                    const T d = p[i] - mu;
                    s2 += d * d;
                }
            }
            var = s2 / static_cast<T>(m);
            state.running_mean.data()[ch] =
                momentum * state.running_mean.data()[ch] + (T{1} - momentum) * mu;
            state.running_var.data()[ch] =
                momentum * state.running_var.data()[ch] + (T{1} - momentum) * var;
        } else {
            mu = state.running_mean.data()[ch];
            var = state.running_var.data()[ch];
        }
        const T is = T{1} / std::sqrt(var + eps);
        (*mean)[static_cast<std::size_t>(ch)] = mu;
        (*invstd)[static_cast<std::size_t>(ch)] = is;
        const T g = gamma.data()[ch], b = beta.data()[ch];
        for (std::int64_t img = 0; img < n; ++img) {
            const T* p = x.data().data() + (img * c + ch) * hw;
            T* q = out.data().data() + (img * c + ch) * hw;
            for (std::int64_t i = 0; i < hw; ++i) q[i] = g * (p[i] - mu) * is + b;
        }
    }

    const bool need_grad = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    if (detail::track(tape, need_grad)) {
        out.set_requires_grad(true);
        auto xi = x.impl();
        auto gi = gamma.impl();
        auto bi = beta.impl();
        auto oi = out.impl();
        tape->record(oi, [xi, gi, bi, oi, mean, invstd, n, c, hw, m, training] {
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const T mu = (*mean)[static_cast<std::size_t>(ch)];
                const T is = (*invstd)[static_cast<std::size_t>(ch)];
                const T g = gi->data[ch];
                // accumulate sums of dy and dy*xhat over the channel slice
                T sum_dy{0}, sum_dy_xhat{0};
                for (std::int64_t img = 0; img < n; ++img) {
                    const T* dy = oi->grad.data() + (img * c + ch) * hw;
                    const T* px = xi->data.data() + (img * c + ch) * hw;
                    for (std::int64_t i = 0; i < hw; ++i) {
                        sum_dy += dy[i];
                        sum_dy_xhat += dy[i] * (px[i] - mu) * is;
                    }
                }
                if (bi->requires_grad) bi->grad[ch] += sum_dy;
                if (gi->requires_grad) gi->grad[ch] += sum_dy_xhat;
                if (xi->requires_grad) {
                    if (training) {
                        const T inv_m = T{1} / static_cast<T>(m);
                        for (std::int64_t img = 0; img < n; ++img) {
                            const T* dy = oi->grad.data() + (img * c + ch) * hw;
                            const T* px = xi->data.data() + (img * c + ch) * hw;
                            T* gx = xi->grad.data() + (img * c + ch) * hw;
                            for (std::int64_t i = 0; i < hw; ++i) {
                                const T xhat = (px[i] - mu) * is;
                                gx[i] += g * is *
                                         (dy[i] - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
                            }
                        }
                    } else {
                        for (std::int64_t img = 0; img < n; ++img) {
                            const T* dy = oi->grad.data() + (img * c + ch) * hw;
                            T* gx = xi->grad.data() + (img * c + ch) * hw;
                            for (std::int64_t i = 0; i < hw; ++i) gx[i] += dy[i] * g * is;
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace wnet
