#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "wnet/tensor.hpp"

namespace wnet {

namespace detail {

inline void require_binary_mask(const Tensor<float>& m, const char* what) {
    if (m.rank() != 2)
        throw std::invalid_argument(std::string(what) + ": mask must be [H,W], got " +
                                    shape_str(m.shape()));
    for (float v : m.data())
        if (v != 0.0f && v != 1.0f)
            throw std::invalid_argument(std::string(what) + ": mask must be binary");
}

inline void require_same_extents(const Tensor<float>& a, const Tensor<float>& b,
                                 const char* what) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(what) + ": extent mismatch " +
                                    shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- pixel-level metrics ----

struct PixelCounts {
    std::int64_t tp = 0, fp = 0, tn = 0, fn = 0;

    PixelCounts& operator+=(const PixelCounts& o) {
        tp += o.tp; fp += o.fp; tn += o.tn; fn += o.fn;
        return *this;
    }
};

struct PixelRates {
    double accuracy = 1, sensitivity = 1, specificity = 1, precision = 1, f1 = 1;
};

inline PixelCounts pixel_counts(const Tensor<float>& pred, const Tensor<float>& gt) {
    detail::require_same_extents(pred, gt, "pixel_counts");
    detail::require_binary_mask(pred, "pixel_counts(pred)");
    detail::require_binary_mask(gt, "pixel_counts(gt)");
    PixelCounts c;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred.data()[i] == 1.0f, g = gt.data()[i] == 1.0f;
        if (p && g) ++c.tp;
        else if (p && !g) ++c.fp;
        else if (!p && g) ++c.fn;
        else ++c.tn;
    }
    return c;
}

// Table-style rate formulas; an empty denominator counts as a perfect score.
inline PixelRates pixel_rates(const PixelCounts& c) {
    auto ratio = [](std::int64_t num, std::int64_t den) {
        return den == 0 ? 1.0 : static_cast<double>(num) / static_cast<double>(den);
    };
    PixelRates r;
    r.accuracy = ratio(c.tp + c.tn, c.tp + c.tn + c.fn + c.fp);
    r.sensitivity = ratio(c.tp, c.fn + c.tp);
    r.specificity = ratio(c.tn, c.fp + c.tn);
    r.precision = ratio(c.tp, c.fp + c.tp);
    r.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    return r;
}

// ---- connected components (8-connectivity, union-find labeling) ----

struct LesionSet {
    std::int64_t h = 0, w = 0;
    std::vector<std::vector<std::int64_t>> components;  // sorted flat indices
};

inline LesionSet connected_components(const Tensor<float>& mask) {
    detail::require_binary_mask(mask, "connected_components");
    const std::int64_t h = mask.dim(0), w = mask.dim(1);
    LesionSet out;
    out.h = h;
    out.w = w;

    std::vector<std::int64_t> label(static_cast<std::size_t>(h * w), -1);
    std::vector<std::int64_t> parent;
    auto find = [&](std::int64_t a) {
        while (parent[static_cast<std::size_t>(a)] != a) {
            parent[static_cast<std::size_t>(a)] =
                parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(a)])];
            a = parent[static_cast<std::size_t>(a)];
        }
        return a;
    };
    auto unite = [&](std::int64_t a, std::int64_t b) {
        a = find(a);
        b = find(b);
        if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
    };

    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t i = y * w + x;
            if (mask.data()[i] != 1.0f) continue;
            std::int64_t current = -1;
            // already-scanned 8-neighbors: W, NW, N, NE
            const std::pair<std::int64_t, std::int64_t> prev[] = {
                {y, x - 1}, {y - 1, x - 1}, {y - 1, x}, {y - 1, x + 1}};
            for (auto [ny, nx] : prev) {
                if (ny < 0 || nx < 0 || nx >= w) continue;
                const std::int64_t nl = label[static_cast<std::size_t>(ny * w + nx)];
                if (nl < 0) continue;
                if (current < 0) current = nl;
                else unite(current, nl);
            }
            if (current < 0) {
                current = static_cast<std::int64_t>(parent.size());
                parent.push_back(current);
            }
            label[static_cast<std::size_t>(i)] = current;
        }

    std::vector<std::int64_t> root_to_comp(parent.size(), -1);
    for (std::int64_t i = 0; i < h * w; ++i) {
        const std::int64_t l = label[static_cast<std::size_t>(i)];
        if (l < 0) continue;
        const std::int64_t r = find(l);
        auto& comp = root_to_comp[static_cast<std::size_t>(r)];
        if (comp < 0) {
            comp = static_cast<std::int64_t>(out.components.size());
            out.components.emplace_back();
        }
        out.components[static_cast<std::size_t>(comp)].push_back(i);
    }
    return out;
}

// ---- lesion-level matching ----

// Lesion-level confusion; true negatives are undefined at this level and
// deliberately absent.
struct LesionCounts {
    std::int64_t tp = 0;           // predicted components matched to gt
    std::int64_t fp = 0;           // predicted components without enough overlap
    std::int64_t fn = 0;           // gt components not sufficiently covered
    std::int64_t detected_gt = 0;
    std::int64_t pred_total = 0;
    std::int64_t gt_total = 0;

    LesionCounts& operator+=(const LesionCounts& o) {
        tp += o.tp; fp += o.fp; fn += o.fn;
        detected_gt += o.detected_gt;
        pred_total += o.pred_total;
        gt_total += o.gt_total;
        return *this;
    }
};

struct LesionRates {
    double sensitivity = 1, precision = 1, f1 = 1;
};

// Set-operation matching with overlap factor sigma: a predicted component is
// a TP when at least sigma of its pixels land on the gt union; a gt
// component is detected when at least sigma of it is covered by the pred
// union.
inline LesionCounts lesion_match(const LesionSet& pred, const LesionSet& gt,
                                 double sigma = 0.2) {
    if (!(sigma > 0.0 && sigma <= 1.0))
        throw std::invalid_argument("lesion_match: sigma must be in (0,1]");
    if (pred.h != gt.h || pred.w != gt.w)
        throw std::invalid_argument("lesion_match: extent mismatch");
    const std::size_t n = static_cast<std::size_t>(pred.h * pred.w);
    std::vector<std::uint8_t> gt_union(n, 0), pred_union(n, 0);
    for (const auto& comp : gt.components)
        for (auto i : comp) gt_union[static_cast<std::size_t>(i)] = 1;
    for (const auto& comp : pred.components)
        for (auto i : comp) pred_union[static_cast<std::size_t>(i)] = 1;

    LesionCounts c;
    c.pred_total = static_cast<std::int64_t>(pred.components.size());
    c.gt_total = static_cast<std::int64_t>(gt.components.size());
    for (const auto& comp : pred.components) {
        std::int64_t inter = 0;
        for (auto i : comp) inter += gt_union[static_cast<std::size_t>(i)];
        if (static_cast<double>(inter) >= sigma * static_cast<double>(comp.size()))
            ++c.tp;
        else
            ++c.fp;
    }
    for (const auto& comp : gt.components) {
        std::int64_t inter = 0;
        for (auto i : comp) inter += pred_union[static_cast<std::size_t>(i)];
        if (static_cast<double>(inter) >= sigma * static_cast<double>(comp.size()))
            ++c.detected_gt;
        else
            ++c.fn;
    }
    return c;
}

inline LesionRates lesion_rates(const LesionCounts& c) {
    LesionRates r;
    r.sensitivity = c.gt_total == 0
                        ? 1.0
                        : static_cast<double>(c.detected_gt) / static_cast<double>(c.gt_total);
    r.precision = c.pred_total == 0
                      ? (c.gt_total == 0 ? 1.0 : 0.0)
                      : static_cast<double>(c.tp) / static_cast<double>(c.pred_total);
    r.f1 = (r.precision + r.sensitivity) == 0.0
               ? 0.0
               : 2.0 * r.precision * r.sensitivity / (r.precision + r.sensitivity);
    return r;
}

// ---- region overlap ----

// Jaccard overlap |P∩G| / |P∪G|.
inline double overlap_eta(const Tensor<float>& pred, const Tensor<float>& gt) {
    detail::require_same_extents(pred, gt, "overlap_eta");
    detail::require_binary_mask(pred, "overlap_eta(pred)");
    detail::require_binary_mask(gt, "overlap_eta(gt)");
    std::int64_t inter = 0, uni = 0;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred.data()[i] == 1.0f, g = gt.data()[i] == 1.0f;
        if (p && g) ++inter;
        if (p || g) ++uni;
    }
    if (uni == 0) throw std::invalid_argument("overlap_eta: both masks empty");
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// ---- precision/recall curves ----

struct PrPoint {
    double threshold = 0, precision = 1, recall = 0;
};

struct PrCurve {
    std::vector<PrPoint> points;  // descending threshold, recall ascending
    double auc = 0;
};

// 201 evenly spaced thresholds plus the image's distinct probability values
// when there are few of them.
inline std::vector<double> default_thresholds(const std::vector<float>& probs,
                                              std::size_t distinct_limit = 4096) {
    std::vector<double> t;
    for (int i = 0; i <= 200; ++i) t.push_back(static_cast<double>(i) / 200.0);
    std::vector<float> sorted(probs);
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    if (sorted.size() <= distinct_limit)
        for (float v : sorted) t.push_back(static_cast<double>(v));
    std::sort(t.begin(), t.end(), std::greater<>());
    t.erase(std::unique(t.begin(), t.end()), t.end());
    return t;
}

// Pixel-level PR over a probability map. Points run from high to low
// threshold with an infinite-threshold anchor at (recall 0, precision 1);
// AUC is the trapezoidal integral over recall.
inline PrCurve pr_curve(const std::vector<float>& probs,
                        const std::vector<std::uint8_t>& gt,
                        std::vector<double> thresholds) {
    if (probs.size() != gt.size())
        throw std::invalid_argument("pr_curve: probs/gt size mismatch");
    for (float p : probs)
        if (!(p >= 0.0f && p <= 1.0f))
            throw std::invalid_argument("pr_curve: probabilities must be in [0,1]");
    std::int64_t total_pos = 0;
    for (auto g : gt) total_pos += g ? 1 : 0;
    if (total_pos == 0) throw std::invalid_argument("pr_curve: empty ground truth");

    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    // sort pixel scores once, walk thresholds over prefix sums
    std::vector<std::pair<float, std::uint8_t>> scored(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i) scored[i] = {probs[i], gt[i]};
    std::sort(scored.begin(), scored.end(),
              [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::int64_t> pos_prefix(scored.size() + 1, 0);
    for (std::size_t i = 0; i < scored.size(); ++i)
        pos_prefix[i + 1] = pos_prefix[i] + (scored[i].second ? 1 : 0);

    PrCurve out;
    out.points.push_back({std::numeric_limits<double>::infinity(), 1.0, 0.0});
    for (double t : thresholds) {
        // number of pixels with prob >= t
        auto it = std::partition_point(scored.begin(), scored.end(), [&](const auto& s) {
            return static_cast<double>(s.first) >= t;
        });
        const std::int64_t n_pred = std::distance(scored.begin(), it);
        const std::int64_t tp = pos_prefix[static_cast<std::size_t>(n_pred)];
        const double prec =
            n_pred == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(n_pred);
        const double rec = static_cast<double>(tp) / static_cast<double>(total_pos);
        out.points.push_back({t, prec, rec});
    }
    for (std::size_t i = 1; i < out.points.size(); ++i)
        out.auc += (out.points[i].recall - out.points[i - 1].recall) * 0.5 *
                   (out.points[i].precision + out.points[i - 1].precision);
    return out;
}

inline PrCurve pr_curve(const Tensor<float>& probs, const Tensor<float>& gt,
                        std::vector<double> thresholds = {}) {
    detail::require_same_extents(probs, gt, "pr_curve");
    detail::require_binary_mask(gt, "pr_curve(gt)");
    std::vector<std::uint8_t> g(static_cast<std::size_t>(gt.numel()));
    for (std::int64_t i = 0; i < gt.numel(); ++i) g[static_cast<std::size_t>(i)] =
        gt.data()[i] == 1.0f ? 1 : 0;
    if (thresholds.empty()) thresholds = default_thresholds(probs.data());
    return pr_curve(probs.data(), g, std::move(thresholds));
}

// Vertical fold averaging: precision is linearly interpolated on a fixed
// recall grid per fold, then averaged.
inline PrCurve average_pr_vertical(const std::vector<PrCurve>& folds,
                                   int recall_points = 101) {
    if (folds.empty()) throw std::invalid_argument("average_pr_vertical: no folds");
    PrCurve out;
    for (int k = 0; k < recall_points; ++k) {
        const double r = static_cast<double>(k) / static_cast<double>(recall_points - 1);
        double psum = 0;
        for (const auto& fold : folds) {
            // points have ascending recall; find the surrounding pair
            double p = fold.points.back().precision;
            for (std::size_t i = 1; i < fold.points.size(); ++i) {
                if (fold.points[i].recall >= r) {
                    const auto& a = fold.points[i - 1];
                    const auto& b = fold.points[i];
                    if (b.recall == a.recall) { p = b.precision; break; }
                    const double f = (r - a.recall) / (b.recall - a.recall);
                    p = a.precision + f * (b.precision - a.precision);
                    break;
                }
            }
            psum += p;
        }
        out.points.push_back({0.0, psum / static_cast<double>(folds.size()), r});
    }
    for (std::size_t i = 1; i < out.points.size(); ++i)
        out.auc += (out.points[i].recall - out.points[i - 1].recall) * 0.5 *
                   (out.points[i].precision + out.points[i - 1].precision);
    return out;
}

// Threshold-aligned fold averaging (both precision and recall averaged at
// each threshold index); requires the folds to share one threshold grid.
inline PrCurve average_pr_by_threshold(const std::vector<PrCurve>& folds) {
    if (folds.empty()) throw std::invalid_argument("average_pr_by_threshold: no folds");
    const std::size_t n = folds[0].points.size();
    for (const auto& f : folds)
        if (f.points.size() != n)
            throw std::invalid_argument("average_pr_by_threshold: folds use different grids");
    PrCurve out;
    for (std::size_t i = 0; i < n; ++i) {
        PrPoint p;
        p.precision = 0;
        p.recall = 0;
        p.threshold = folds[0].points[i].threshold;
        for (const auto& f : folds) {
            p.precision += f.points[i].precision;
            p.recall += f.points[i].recall;
        }
        p.precision /= static_cast<double>(folds.size());
        p.recall /= static_cast<double>(folds.size());
        out.points.push_back(p);
    }
    for (std::size_t i = 1; i < out.points.size(); ++i)
        out.auc += (out.points[i].recall - out.points[i - 1].recall) * 0.5 *
                   (out.points[i].precision + out.points[i - 1].precision);
    return out;
}

// ---- overlay ----

// Green = true positive, red = false negative, blue = false positive,
// everything else keeps the source pixel.
inline Tensor<float> overlay(const Tensor<float>& pred, const Tensor<float>& gt,
                             const Tensor<float>& image) {
    detail::require_same_extents(pred, gt, "overlay");
    detail::require_binary_mask(pred, "overlay(pred)");
    detail::require_binary_mask(gt, "overlay(gt)");
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != pred.dim(0) ||
        image.dim(2) != pred.dim(1))
        throw std::invalid_argument("overlay: image extents " + shape_str(image.shape()) +
                                    " do not match masks " + shape_str(pred.shape()));
    Tensor<float> out = image.clone();
    const std::int64_t hw = pred.numel();
    for (std::int64_t i = 0; i < hw; ++i) {
        const bool p = pred.data()[i] == 1.0f, g = gt.data()[i] == 1.0f;
        if (!p && !g) continue;
        float r = 0, gg = 0, b = 0;
        if (p && g) gg = 255;       // TP
        else if (!p && g) r = 255;  // FN
        else b = 255;               // FP
        out.data()[0 * hw + i] = r;
        out.data()[1 * hw + i] = gg;
        out.data()[2 * hw + i] = b;
    }
    return out;
}

// ---- report ----

struct TaskMetrics {
    PixelCounts pixel;
    PixelRates rates;
    LesionCounts lesion;
    LesionRates lesion_rate;
    std::optional<double> eta;  // OD task
    double auc = 0;
};

struct ImageEval {
    std::string id;
    std::optional<TaskMetrics> od, ex;
};

struct EvalReport {
    int fold = -1;
    std::vector<ImageEval> images;
    std::optional<TaskMetrics> od, ex;      // aggregates
    std::optional<PrCurve> od_pr, ex_pr;    // pooled over the fold's pixels
};

inline nlohmann::json to_json(const PixelCounts& c) {
    return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

inline nlohmann::json to_json(const LesionCounts& c) {
    // lesion level has no TN by construction
    return {{"tp", c.tp},
            {"fp", c.fp},
            {"fn", c.fn},
            {"detected_gt", c.detected_gt},
            {"pred_total", c.pred_total},
            {"gt_total", c.gt_total}};
}

inline nlohmann::json to_json(const TaskMetrics& m) {
    nlohmann::json j{{"pixel", to_json(m.pixel)},
                     {"accuracy", m.rates.accuracy},
                     {"sensitivity", m.rates.sensitivity},
                     {"specificity", m.rates.specificity},
                     {"precision", m.rates.precision},
                     {"f1", m.rates.f1},
                     {"lesion", to_json(m.lesion)},
                     {"lesion_sensitivity", m.lesion_rate.sensitivity},
                     {"lesion_precision", m.lesion_rate.precision},
                     {"lesion_f1", m.lesion_rate.f1},
                     {"auc", m.auc}};
    if (m.eta) j["eta"] = *m.eta;
    return j;
}

inline nlohmann::json to_json(const PrCurve& c) {
    nlohmann::json pts = nlohmann::json::array();
    for (const auto& p : c.points)
        pts.push_back({{"threshold", std::isinf(p.threshold) ? 1e308 : p.threshold},
                       {"precision", p.precision},
                       {"recall", p.recall}});
    return {{"auc", c.auc}, {"points", pts}};
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json imgs = nlohmann::json::array();
    for (const auto& ie : r.images) {
        nlohmann::json j{{"id", ie.id}};
        if (ie.od) j["od"] = to_json(*ie.od);
        if (ie.ex) j["ex"] = to_json(*ie.ex);
        imgs.push_back(j);
    }
    nlohmann::json j{{"fold", r.fold}, {"images", imgs}};
    if (r.od) j["od"] = to_json(*r.od);
    if (r.ex) j["ex"] = to_json(*r.ex);
    if (r.od_pr) j["od_pr"] = to_json(*r.od_pr);
    if (r.ex_pr) j["ex_pr"] = to_json(*r.ex_pr);
    return j;
}

}  // namespace wnet
