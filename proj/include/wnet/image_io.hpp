#pragma once

#include <filesystem>
#include <string>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "wnet/data.hpp"
#include "wnet/preprocess.hpp"
#include "wnet/tensor.hpp"

namespace wnet {

// 8-bit RGB image (PNG/PPM/...) as [3,H,W] in [0,255].
inline Tensor<float> load_rgb(const std::filesystem::path& path) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_COLOR);
    if (img.empty()) throw std::runtime_error("cannot read image " + path.string());
    Tensor<float> out = Tensor<float>::zeros({3, img.rows, img.cols});
    const std::int64_t hw = static_cast<std::int64_t>(img.rows) * img.cols;
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x) {
            const auto& bgr = img.at<cv::Vec3b>(y, x);
            const std::int64_t i = static_cast<std::int64_t>(y) * img.cols + x;
            out.data()[0 * hw + i] = static_cast<float>(bgr[2]);
            out.data()[1 * hw + i] = static_cast<float>(bgr[1]);
            out.data()[2 * hw + i] = static_cast<float>(bgr[0]);
        }
    return out;
}

// Single-channel image as a binary [H,W] mask; values above 127 are
// foreground.
inline Tensor<float> load_mask(const std::filesystem::path& path) {
    cv::Mat img = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
    if (img.empty()) throw std::runtime_error("cannot read mask " + path.string());
    Tensor<float> out = Tensor<float>::zeros({img.rows, img.cols});
    for (int y = 0; y < img.rows; ++y)
        for (int x = 0; x < img.cols; ++x)
            out.data()[static_cast<std::int64_t>(y) * img.cols + x] =
                img.at<std::uint8_t>(y, x) > 127 ? 1.0f : 0.0f;
    return out;
}

inline void save_rgb(const std::filesystem::path& path, const Tensor<float>& rgb) {
    if (rgb.rank() != 3 || rgb.dim(0) != 3)
        throw std::invalid_argument("save_rgb: need [3,H,W], got " + shape_str(rgb.shape()));
    const int h = static_cast<int>(rgb.dim(1)), w = static_cast<int>(rgb.dim(2));
    const std::int64_t hw = static_cast<std::int64_t>(h) * w;
    cv::Mat img(h, w, CV_8UC3);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::int64_t i = static_cast<std::int64_t>(y) * w + x;
            auto clamp8 = [](float v) {
                return static_cast<std::uint8_t>(std::clamp(v, 0.0f, 255.0f) + 0.5f);
            };
            img.at<cv::Vec3b>(y, x) = {clamp8(rgb.data()[2 * hw + i]),
                                       clamp8(rgb.data()[1 * hw + i]),
                                       clamp8(rgb.data()[0 * hw + i])};
        }
    if (!cv::imwrite(path.string(), img))
        throw std::runtime_error("cannot write image " + path.string());
}

// Grayscale writer; pass scale=255 for probability maps in [0,1] and for
// binary masks alike.
inline void save_gray(const std::filesystem::path& path, const Tensor<float>& plane,
                      float scale = 255.0f) {
    if (plane.rank() != 2)
        throw std::invalid_argument("save_gray: need [H,W], got " + shape_str(plane.shape()));
    const int h = static_cast<int>(plane.dim(0)), w = static_cast<int>(plane.dim(1));
    cv::Mat img(h, w, CV_8UC1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            img.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(
                std::clamp(plane.data()[static_cast<std::int64_t>(y) * w + x] * scale,
                           0.0f, 255.0f) + 0.5f);
    if (!cv::imwrite(path.string(), img))
        throw std::runtime_error("cannot write image " + path.string());
}

inline ImageRecord load_record(const ManifestEntry& entry,
                               const std::filesystem::path& base_dir) {
    ImageRecord rec;
    rec.id = entry.id;
    rec.rgb = load_rgb(base_dir / entry.image_path);
    rec.source_h = rec.rgb.dim(1);
    rec.source_w = rec.rgb.dim(2);
    if (entry.has_od()) rec.od_mask = load_mask(base_dir / entry.od_mask_path);
    if (entry.has_ex()) rec.ex_mask = load_mask(base_dir / entry.ex_mask_path);
    validate_record(rec);
    return rec;
}

inline std::vector<ImageRecord> load_records(const DatasetManifest& manifest) {
    std::vector<ImageRecord> out;
    out.reserve(manifest.entries.size());
    for (const auto& e : manifest.entries) out.push_back(load_record(e, manifest.base_dir));
    return out;
}

}  // namespace wnet
