#pragma once

#include "wnet/tensor.hpp"

namespace wnet {

struct LossWeights {
    double omega = 0.6;      // exudate share of the total loss
    double lambda_od = 0.7;  // positive-class weight, OD task
    double lambda_ex = 0.9;  // positive-class weight, exudate task
};

inline void validate_weights(const LossWeights& w) {
    if (!(w.omega >= 0.0 && w.omega <= 1.0))
        throw std::invalid_argument("omega must be in [0,1]");
    if (!(w.lambda_od > 0.0 && w.lambda_od < 1.0) ||
        !(w.lambda_ex > 0.0 && w.lambda_ex < 1.0))
        throw std::invalid_argument("lambda weights must be in (0,1)");
}

enum class LossReduction {
    ImageSum,   // per-image pixel sums averaged over the batch
    PixelMean,  // per-image pixel means averaged over the batch
};

// Class-balanced binary cross-entropy on probabilities:
//   mean_batch[ -lambda * sum_pos log p - (1-lambda) * sum_neg log(1-p) ]
// Probabilities are clamped to [eps, 1-eps] before the logs.
template <typename T>
Tensor<T> class_balanced_bce(const Tensor<T>& probs, const Tensor<T>& labels,
                             T lambda, Tape<T>* tape = nullptr,
                             LossReduction reduction = LossReduction::ImageSum,
                             T eps = T{1e-7}) {
    if (!probs.same_shape(labels))
        throw std::invalid_argument("class_balanced_bce: probs " + shape_str(probs.shape()) +
                                    " vs labels " + shape_str(labels.shape()));
    if (!(lambda > T{0} && lambda < T{1}))
        throw std::invalid_argument("class_balanced_bce: lambda must be in (0,1)");
    for (T v : labels.data())
        if (v != T{0} && v != T{1})
            throw std::invalid_argument("class_balanced_bce: labels must be binary");

    const std::int64_t batch = probs.rank() >= 1 ? probs.dim(0) : 1;
    const std::int64_t per_image = probs.numel() / batch;
    const T lo = eps, hi = T{1} - eps;

    double total = 0.0;
    for (std::int64_t i = 0; i < probs.numel(); ++i) {
        const T p = std::clamp(probs.data()[i], lo, hi);
        if (labels.data()[i] == T{1})
            total -= static_cast<double>(lambda) * std::log(static_cast<double>(p));
        else
            total -= (1.0 - static_cast<double>(lambda)) *
                     std::log(1.0 - static_cast<double>(p));
    }
    double denom = static_cast<double>(batch);
    if (reduction == LossReduction::PixelMean) denom *= static_cast<double>(per_image);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / denom));

    if (detail::track(tape, probs.requires_grad())) {
        out.set_requires_grad(true);
        auto pi = probs.impl();
        auto li = labels.impl();
        auto oi = out.impl();
        const T inv_denom = static_cast<T>(1.0 / denom);
        tape->record(oi, [pi, li, oi, lambda, lo, hi, inv_denom] {
            const T g = oi->grad[0] * inv_denom;
            for (std::size_t i = 0; i < pi->data.size(); ++i) {
                const T p = pi->data[i];
                if (p < lo || p > hi) continue;  // clamped flat region
                if (li->data[i] == T{1})
                    pi->grad[i] += g * (-lambda / p);
                else
                    pi->grad[i] += g * ((T{1} - lambda) / (T{1} - p));
            }
        });
    }
    return out;
}

// omega * L_EX + (1 - omega) * L_OD
template <typename T>
Tensor<T> total_loss(const Tensor<T>& ex_loss, const Tensor<T>& od_loss, T omega,
                     Tape<T>* tape = nullptr) {
    if (!(omega >= T{0} && omega <= T{1}))
        throw std::invalid_argument("total_loss: omega must be in [0,1]");
    if (ex_loss.numel() != 1 || od_loss.numel() != 1)
        throw std::invalid_argument("total_loss: inputs must be scalars");
    Tensor<T> out =
        Tensor<T>::scalar(omega * ex_loss.data()[0] + (T{1} - omega) * od_loss.data()[0]);
    if (detail::track(tape, ex_loss.requires_grad() || od_loss.requires_grad())) {
        out.set_requires_grad(true);
        auto ei = ex_loss.impl(), di = od_loss.impl(), oi = out.impl();
        tape->record(oi, [ei, di, oi, omega] {
            const T g = oi->grad[0];
            if (ei->requires_grad) ei->grad[0] += g * omega;
            if (di->requires_grad) di->grad[0] += g * (T{1} - omega);
        });
    }
    return out;
}

// Background-pixel fraction: |negatives| / |all|, the balance heuristic of
// the holistic edge detection line of work.
template <typename T>
double auto_balance_lambda(const Tensor<T>& labels) {
    if (labels.numel() == 0)
        throw std::invalid_argument("auto_balance_lambda: empty label map");
    std::int64_t neg = 0;
    for (T v : labels.data()) {
        if (v != T{0} && v != T{1})
            throw std::invalid_argument("auto_balance_lambda: labels must be binary");
        if (v == T{0}) ++neg;
    }
    return static_cast<double>(neg) / static_cast<double>(labels.numel());
}

}  // namespace wnet
