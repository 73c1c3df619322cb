#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "wnet/tensor.hpp"

namespace wnet {

// One fundus image plus optional ground-truth masks. rgb is [3,H,W] with
// values in [0,255]; masks are [H,W] with values in {0,1}.
struct ImageRecord {
    std::string id;
    Tensor<float> rgb;
    Tensor<float> od_mask;  // undefined tensor when absent
    Tensor<float> ex_mask;
    std::int64_t source_h = 0;
    std::int64_t source_w = 0;

    bool has_od() const { return od_mask.defined(); }
    bool has_ex() const { return ex_mask.defined(); }
};

inline void validate_record(const ImageRecord& rec) {
    if (!rec.rgb.defined() || rec.rgb.rank() != 3 || rec.rgb.dim(0) != 3)
        throw std::invalid_argument("record '" + rec.id + "': rgb must be [3,H,W]");
    for (const auto* m : {&rec.od_mask, &rec.ex_mask}) {
        if (!m->defined()) continue;
        if (m->rank() != 2 || m->dim(0) != rec.rgb.dim(1) || m->dim(1) != rec.rgb.dim(2))
            throw std::invalid_argument("record '" + rec.id + "': mask extents " +
                                        shape_str(m->shape()) + " do not match image " +
                                        shape_str(rec.rgb.shape()));
        for (float v : m->data())
            if (v != 0.0f && v != 1.0f)
                throw std::invalid_argument("record '" + rec.id + "': mask values must be 0/1");
    }
}

namespace img {

// Bilinear sample with edge clamp, pixel-center convention.
inline float bilinear_at(const float* plane, std::int64_t h, std::int64_t w,
                         double y, double x) {
    const std::int64_t x0 = static_cast<std::int64_t>(std::floor(x));
    const std::int64_t y0 = static_cast<std::int64_t>(std::floor(y));
    const double fx = x - static_cast<double>(x0);
    const double fy = y - static_cast<double>(y0);
    auto clampi = [](std::int64_t v, std::int64_t n) {
        return std::max<std::int64_t>(0, std::min(v, n - 1));
    };
    const std::int64_t xa = clampi(x0, w), xb = clampi(x0 + 1, w);
    const std::int64_t ya = clampi(y0, h), yb = clampi(y0 + 1, h);
    const double v00 = plane[ya * w + xa], v01 = plane[ya * w + xb];
    const double v10 = plane[yb * w + xa], v11 = plane[yb * w + xb];
    return static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                              fy * ((1 - fx) * v10 + fx * v11));
}

enum class Sampling { Bilinear, Nearest };

inline Tensor<float> resize_plane(const Tensor<float>& src, std::int64_t oh,
                                  std::int64_t ow, Sampling sampling) {
    const std::int64_t h = src.dim(src.rank() - 2), w = src.dim(src.rank() - 1);
    const std::int64_t planes = src.numel() / (h * w);
    Shape out_shape = src.shape();
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    Tensor<float> out = Tensor<float>::zeros(out_shape);
    const double sy = static_cast<double>(h) / static_cast<double>(oh);
    const double sx = static_cast<double>(w) / static_cast<double>(ow);
    for (std::int64_t p = 0; p < planes; ++p) {
        const float* sp = src.data().data() + p * h * w;
        float* dp = out.data().data() + p * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y) {
            const double ys = (static_cast<double>(y) + 0.5) * sy - 0.5;
            for (std::int64_t x = 0; x < ow; ++x) {
                const double xs = (static_cast<double>(x) + 0.5) * sx - 0.5;
                if (sampling == Sampling::Bilinear) {
                    dp[y * ow + x] = bilinear_at(sp, h, w, ys, xs);
                } else {
                    const std::int64_t yn = std::max<std::int64_t>(
                        0, std::min<std::int64_t>(h - 1, std::llround(ys)));
                    const std::int64_t xn = std::max<std::int64_t>(
                        0, std::min<std::int64_t>(w - 1, std::llround(xs)));
                    dp[y * ow + x] = sp[yn * w + xn];
                }
            }
        }
    }
    return out;
}

inline Tensor<float> pad_center(const Tensor<float>& src, std::int64_t oh,
                                std::int64_t ow) {
    const std::int64_t h = src.dim(src.rank() - 2), w = src.dim(src.rank() - 1);
    const std::int64_t planes = src.numel() / (h * w);
    Shape out_shape = src.shape();
    out_shape[out_shape.size() - 2] = oh;
    out_shape[out_shape.size() - 1] = ow;
    Tensor<float> out = Tensor<float>::zeros(out_shape);
    const std::int64_t y0 = (oh - h) / 2, x0 = (ow - w) / 2;
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                out.data()[(p * oh + y0 + y) * ow + x0 + x] =
                    src.data()[(p * h + y) * w + x];
    return out;
}

inline void binarize(Tensor<float>& mask, float threshold = 0.5f) {
    for (auto& v : mask.data()) v = v > threshold ? 1.0f : 0.0f;
}

}  // namespace img

// Geometric normalization to target x target: larger images are scaled down
// preserving aspect ratio, everything is centered with zero padding. Masks
// follow the same geometry with nearest sampling and stay binary.
inline ImageRecord resize_or_pad(const ImageRecord& rec, std::int64_t target) {
    if (target % 8 != 0)
        throw std::invalid_argument("resize_or_pad: target " + std::to_string(target) +
                                    " must be divisible by 8");
    const std::int64_t h = rec.rgb.dim(1), w = rec.rgb.dim(2);
    ImageRecord out;
    out.id = rec.id;
    out.source_h = h;
    out.source_w = w;

    std::int64_t rh = h, rw = w;
    if (h > target || w > target) {
        const double s = std::min(static_cast<double>(target) / static_cast<double>(h),
                                  static_cast<double>(target) / static_cast<double>(w));
        rh = std::max<std::int64_t>(1, std::llround(static_cast<double>(h) * s));
        rw = std::max<std::int64_t>(1, std::llround(static_cast<double>(w) * s));
        rh = std::min(rh, target);
        rw = std::min(rw, target);
    }

    auto transform = [&](const Tensor<float>& plane, img::Sampling sampling) {
        Tensor<float> t = plane;
        if (rh != h || rw != w) t = img::resize_plane(t, rh, rw, sampling);
        if (rh != target || rw != target) t = img::pad_center(t, target, target);
        return t;
    };
    out.rgb = transform(rec.rgb, img::Sampling::Bilinear);
    if (rec.has_od()) {
        out.od_mask = transform(rec.od_mask, img::Sampling::Nearest);
        img::binarize(out.od_mask);
    }
    if (rec.has_ex()) {
        out.ex_mask = transform(rec.ex_mask, img::Sampling::Nearest);
        img::binarize(out.ex_mask);
    }
    return out;
}

// Normalized 1-D Gaussian taps. The default sigma follows the usual
// kernel-size rule: 0.3*((k-1)/2 - 1) + 0.8.
inline std::vector<double> gaussian_taps(int k, double sigma) {
    std::vector<double> taps(static_cast<std::size_t>(k));
    const int r = k / 2;
    double s = 0;
    for (int i = 0; i < k; ++i) {
        const double d = static_cast<double>(i - r);
        taps[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        s += taps[static_cast<std::size_t>(i)];
    }
    for (auto& t : taps) t /= s;
    return taps;
}

inline double default_gaussian_sigma(int k) {
    return 0.3 * ((static_cast<double>(k) - 1.0) / 2.0 - 1.0) + 0.8;
}

// Separable Gaussian blur with reflect-101 borders; the kernel sums to 1.
inline Tensor<float> gaussian_blur(const Tensor<float>& src, int k = 9,
                                   double sigma = -1.0) {
    const std::int64_t h = src.dim(src.rank() - 2), w = src.dim(src.rank() - 1);
    if (h < k || w < k)
        throw std::invalid_argument("gaussian_blur: extents " + shape_str(src.shape()) +
                                    " smaller than kernel " + std::to_string(k));
    if (sigma <= 0) sigma = default_gaussian_sigma(k);
    const auto taps = gaussian_taps(k, sigma);
    const int r = k / 2;
    auto reflect = [](std::int64_t i, std::int64_t n) {
        while (i < 0 || i >= n) {
            if (i < 0) i = -i;
            if (i >= n) i = 2 * n - 2 - i;
        }
        return i;
    };
    const std::int64_t planes = src.numel() / (h * w);
    Tensor<float> tmp = Tensor<float>::zeros(src.shape());
    Tensor<float> out = Tensor<float>::zeros(src.shape());
    for (std::int64_t p = 0; p < planes; ++p) {
        const float* sp = src.data().data() + p * h * w;
        float* tp = tmp.data().data() + p * h * w;
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                double acc = 0;
                for (int i = -r; i <= r; ++i)
                    acc += taps[static_cast<std::size_t>(i + r)] *
                           sp[y * w + reflect(x + i, w)];
                tp[y * w + x] = static_cast<float>(acc);
            }
        float* op = out.data().data() + p * h * w;
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                double acc = 0;
                for (int i = -r; i <= r; ++i)
                    acc += taps[static_cast<std::size_t>(i + r)] *
                           tp[reflect(y + i, h) * w + x];
                op[y * w + x] = static_cast<float>(acc);
            }
    }
    return out;
}

// Contrast enhancement: clamp(alpha*I + beta*I_gauss + gamma, 0, 255).
inline Tensor<float> enhance(const Tensor<float>& img, double alpha = 4.0,
                             double beta = -4.0, double gamma = 128.0,
                             int blur_kernel = 9, double blur_sigma = -1.0) {
    auto blurred = gaussian_blur(img, blur_kernel, blur_sigma);
    Tensor<float> out = Tensor<float>::zeros(img.shape());
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        const double v = alpha * img.data()[i] + beta * blurred.data()[i] + gamma;
        out.data()[i] = static_cast<float>(std::clamp(v, 0.0, 255.0));
    }
    return out;
}

// Per-image standardization to zero mean and unit population std. Constant
// images map to all zeros.
inline Tensor<float> standardize(const Tensor<float>& img, double eps = 1e-8) {
    double mean = 0;
    for (float v : img.data()) mean += v;
    mean /= static_cast<double>(img.numel());
    double var = 0;
    for (float v : img.data()) {
        const double d = v - mean;
        var += d * d;
    }
    var /= static_cast<double>(img.numel());
    const double stddev = std::sqrt(var);
    Tensor<float> out = Tensor<float>::zeros(img.shape());
    if (stddev < eps) return out;
    for (std::int64_t i = 0; i < img.numel(); ++i)
        out.data()[i] = static_cast<float>((img.data()[i] - mean) / stddev);
    return out;
}

struct AugmentationPolicy {
    bool rotate = true;
    double angle_lo = 0.0;
    double angle_hi = 360.0;  // exclusive
    bool hflip = true;
    bool vflip = true;
    double intensity_lo = 0.8;
    double intensity_hi = 1.2;
    bool per_pixel_noise = false;  // per-pixel factors instead of one per image
    std::uint64_t seed = 0;
};

struct AugmentationSample {
    double angle_deg = 0.0;
    bool do_hflip = false;
    bool do_vflip = false;
    double factor = 1.0;
};

template <typename Rng>
AugmentationSample draw_augmentation(const AugmentationPolicy& policy, Rng& rng) {
    AugmentationSample s;
    if (policy.rotate) {
        std::uniform_real_distribution<double> dist(policy.angle_lo, policy.angle_hi);
        s.angle_deg = dist(rng);
    }
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (policy.hflip) s.do_hflip = coin(rng) < 0.5;
    if (policy.vflip) s.do_vflip = coin(rng) < 0.5;
    std::uniform_real_distribution<double> fdist(policy.intensity_lo, policy.intensity_hi);
    s.factor = fdist(rng);
    return s;
}

namespace img {

inline Tensor<float> flip_h(const Tensor<float>& src) {
    const std::int64_t h = src.dim(src.rank() - 2), w = src.dim(src.rank() - 1);
    const std::int64_t planes = src.numel() / (h * w);
    Tensor<float> out = Tensor<float>::zeros(src.shape());
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                out.data()[(p * h + y) * w + x] = src.data()[(p * h + y) * w + (w - 1 - x)];
    return out;
}

inline Tensor<float> flip_v(const Tensor<float>& src) {
    const std::int64_t h = src.dim(src.rank() - 2), w = src.dim(src.rank() - 1);
    const std::int64_t planes = src.numel() / (h * w);
    Tensor<float> out = Tensor<float>::zeros(src.shape());
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x)
                out.data()[(p * h + y) * w + x] = src.data()[(p * h + (h - 1 - y)) * w + x];
    return out;
}

// Rotation about the image center, bilinear with zero fill. Exact multiples
// of 90 degrees on square images take the lattice-permutation path.
inline Tensor<float> rotate(const Tensor<float>& src, double angle_deg) {
    const std::int64_t h = src.dim(src.rank() - 2), w = src.dim(src.rank() - 1);
    const std::int64_t planes = src.numel() / (h * w);
    double a = std::fmod(angle_deg, 360.0);
    if (a < 0) a += 360.0;
    const double quarter = a / 90.0;
    const long q = std::lround(quarter);
    if (std::abs(quarter - static_cast<double>(q)) < 1e-9 && (q % 2 == 0 || h == w)) {
        Tensor<float> out = Tensor<float>::zeros(src.shape());
        for (std::int64_t p = 0; p < planes; ++p)
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x = 0; x < w; ++x) {
                    // quarter-turn lattice permutation, same direction as
                    // the continuous path below
                    std::int64_t sy = y, sx = x;
                    switch (q % 4) {
                        case 0: break;
                        case 1: sy = h - 1 - x; sx = y; break;
                        case 2: sy = h - 1 - y; sx = w - 1 - x; break;
                        case 3: sy = x; sx = w - 1 - y; break;
                    }
                    out.data()[(p * h + y) * w + x] = src.data()[(p * h + sy) * w + sx];
                }
        return out;
    }
    const double rad = a * M_PI / 180.0;
    const double ca = std::cos(rad), sa = std::sin(rad);
    const double cy = (static_cast<double>(h) - 1.0) / 2.0;
    const double cx = (static_cast<double>(w) - 1.0) / 2.0;
    Tensor<float> out = Tensor<float>::zeros(src.shape());
    for (std::int64_t p = 0; p < planes; ++p) {
        const float* sp = src.data().data() + p * h * w;
        float* dp = out.data().data() + p * h * w;
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                const double dx = static_cast<double>(x) - cx;
                const double dy = static_cast<double>(y) - cy;
                // inverse map: rotate destination back onto the source
                const double xs = ca * dx + sa * dy + cx;
                const double ys = -sa * dx + ca * dy + cy;
                if (xs < -0.5 || xs > static_cast<double>(w) - 0.5 || ys < -0.5 ||
                    ys > static_cast<double>(h) - 0.5) {
                    dp[y * w + x] = 0.0f;
                } else {
                    dp[y * w + x] = bilinear_at(sp, h, w, ys, xs);
                }
            }
    }
    return out;
}

}  // namespace img

// Applies the same geometric transform to image and masks; the intensity
// factor touches the image only. Masks are re-binarized after resampling.
inline ImageRecord apply_augmentation(const ImageRecord& rec,
                                      const AugmentationSample& s) {
    ImageRecord out;
    out.id = rec.id;
    out.source_h = rec.source_h;
    out.source_w = rec.source_w;
    auto geom = [&](const Tensor<float>& t) {
        Tensor<float> r = t;
        if (s.angle_deg != 0.0) r = img::rotate(r, s.angle_deg);
        if (s.do_hflip) r = img::flip_h(r);
        if (s.do_vflip) r = img::flip_v(r);
        return r;
    };
    out.rgb = geom(rec.rgb);
    if (s.factor != 1.0) {
        for (auto& v : out.rgb.data())
            v = static_cast<float>(
                std::clamp(static_cast<double>(v) * s.factor, 0.0, 255.0));
    }
    if (rec.has_od()) {
        out.od_mask = geom(rec.od_mask);
        img::binarize(out.od_mask);
    }
    if (rec.has_ex()) {
        out.ex_mask = geom(rec.ex_mask);
        img::binarize(out.ex_mask);
    }
    return out;
}

template <typename Rng>
ImageRecord augment(const ImageRecord& rec, const AugmentationPolicy& policy, Rng& rng) {
    return apply_augmentation(rec, draw_augmentation(policy, rng));
}

// Per-record augmentation rng, derived from (seed, record id, epoch) so
// parallel prefetch order can never change the draw.
inline std::mt19937_64 record_rng(std::uint64_t seed, const std::string& record_id,
                                  std::int64_t epoch) {
    std::uint64_t hash = 1469598103934665603ull;  // FNV-1a
    for (unsigned char c : record_id) {
        hash ^= c;
        hash *= 1099511628211ull;
    }
    hash ^= seed + 0x9e3779b97f4a7c15ull + (hash << 6) + (hash >> 2);
    hash ^= static_cast<std::uint64_t>(epoch) * 0xbf58476d1ce4e5b9ull;
    return std::mt19937_64(hash);
}

}  // namespace wnet
