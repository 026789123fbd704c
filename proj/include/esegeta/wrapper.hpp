#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "ops.hpp"

// Reduction of a segmentation output (per-pixel class scores) to one scalar
// per class, so classification-style attribution applies. Two strategies:
//   pixelwise-argmax: label each pixel with its argmax channel, score a
//     class as the sum of its channel's scores over pixels it won.
//   threshold-otsu:   single-channel output; min-max normalize, Otsu
//     threshold, binarize; class scalars are sums of raw scores per side.
// The assignment mask is always treated as a constant: gradients flow only
// through the summed scores, never through argmax/threshold decisions.
namespace esegeta {

enum class WrapperStrategy { PixelwiseArgmax, ThresholdOtsu };

inline WrapperStrategy wrapper_strategy_from_string(const std::string& s) {
    if (s == "pixelwise-argmax") return WrapperStrategy::PixelwiseArgmax;
    if (s == "threshold-otsu") return WrapperStrategy::ThresholdOtsu;
    throw std::invalid_argument("wrapper: unknown strategy '" + s + "'");
}

inline const char* wrapper_strategy_name(WrapperStrategy s) {
    return s == WrapperStrategy::PixelwiseArgmax ? "pixelwise-argmax" : "threshold-otsu";
}

struct WrapperSpec {
    WrapperStrategy strategy = WrapperStrategy::PixelwiseArgmax;
    int class_index = 1;
};

struct WrapperResult {
    Tensor score;          // scalar, differentiable through the selected scores
    Tensor labels;         // [B, spatial...] per-pixel class labels (as floats)
    Tensor class_mask;     // model-output-shaped 0/1 selector for (channel==c, label==c)
    std::vector<double> out_sums;    // per-class sum-of-scores Out_m
    std::vector<double> out_counts;  // per-class pixel counts
    double threshold = -1.0;         // Otsu threshold (threshold strategy only)
};

// (y - min) / (max - min); rejects constant input.
inline Tensor normalize_minmax(const Tensor& y) {
    float lo = y.values()[0], hi = y.values()[0];
    for (float v : y.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (lo == hi) throw std::invalid_argument("normalize: degenerate range (max == min)");
    const double scale = 1.0 / (static_cast<double>(hi) - lo);
    std::vector<float> out(y.values().size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>((y.values()[i] - static_cast<double>(lo)) * scale);
    return Tensor(y.shape(), std::move(out));
}

// Threshold maximizing between-class variance over a 256-bin histogram of
// [0,1] values; ties resolve to the smallest qualifying bin. Returns the bin
// upper edge (k+1)/256.
inline double otsu_threshold(const Tensor& y_norm) {
    constexpr int kBins = 256;
    for (float v : y_norm.values())
        if (v < 0.0f || v > 1.0f)
            throw std::invalid_argument("otsu: values must lie in [0,1]; normalize first");

    std::array<int64_t, kBins> hist{};
    for (float v : y_norm.values()) {
        const int bin = std::min(kBins - 1, static_cast<int>(v * kBins));
        ++hist[bin];
    }
    int occupied = 0;
    for (int64_t h : hist) occupied += h > 0 ? 1 : 0;
    if (occupied < 2) throw std::invalid_argument("otsu: degenerate input (single distinct level)");

    const double total = static_cast<double>(y_norm.numel());
    double total_mean = 0.0;
    for (int b = 0; b < kBins; ++b) total_mean += b * static_cast<double>(hist[b]);
    total_mean /= total;

    double best_var = -1.0;
    int best_k = 0;
    double w0 = 0.0, sum0 = 0.0;
    for (int k = 0; k < kBins - 1; ++k) {
        w0 += static_cast<double>(hist[k]);
        sum0 += k * static_cast<double>(hist[k]);
        const double w1 = total - w0;
        if (w0 == 0.0 || w1 == 0.0) continue;
        const double mu0 = sum0 / w0;
        const double mu1 = (total_mean * total - sum0) / w1;
        const double var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if (var > best_var) {
            best_var = var;
            best_k = k;
        }
    }
    return (best_k + 1) / static_cast<double>(kBins);
}

namespace detail {

// Builds the differentiable scalar Σ(scores ⊙ mask) with the mask frozen as
// a plain constant leaf, plus per-class sums/counts.
inline WrapperResult finish_wrapper(const Tensor& scores, const std::vector<int>& labels,
                                    int classes, int class_index) {
    const auto& s = scores.shape();
    int64_t plane = 1;
    for (size_t i = 2; i < s.size(); ++i) plane *= s[i];
    const int B = s[0], C = s[1];

    WrapperResult r;
    r.out_sums.assign(static_cast<size_t>(classes), 0.0);
    r.out_counts.assign(static_cast<size_t>(classes), 0.0);

    std::vector<float> label_vals(labels.size());
    std::vector<float> mask_vals(static_cast<size_t>(scores.numel()), 0.0f);
    for (int b = 0; b < B; ++b)
        for (int64_t p = 0; p < plane; ++p) {
            const int lab = labels[static_cast<size_t>(b * plane + p)];
            label_vals[static_cast<size_t>(b * plane + p)] = static_cast<float>(lab);
            r.out_counts[lab] += 1.0;
            r.out_sums[lab] += scores.values()[(static_cast<int64_t>(b) * C + lab) * plane + p];
            if (lab == class_index)
                mask_vals[(static_cast<int64_t>(b) * C + lab) * plane + p] = 1.0f;
        }

    std::vector<int> label_shape = {B};
    for (size_t i = 2; i < s.size(); ++i) label_shape.push_back(s[i]);
    r.labels = Tensor(label_shape, std::move(label_vals));
    r.class_mask = Tensor(scores.shape(), std::move(mask_vals));
    r.score = esegeta::sum(mul(scores, r.class_mask));
    return r;
}

}  // namespace detail

// Per-pixel argmax labels (ties -> lowest class index); the class scalar is
// the sum of the selected channel's scores over pixels assigned to it.
inline WrapperResult wrap_pixelwise(const Tensor& scores, int class_index) {
    if (scores.ndim() < 3)
        throw std::invalid_argument("wrapper: scores must be [B,C,spatial...], got " +
                                    shape_to_string(scores.shape()));
    const int C = scores.shape()[1];
    if (C < 2) throw std::invalid_argument("wrapper: pixelwise strategy needs >= 2 channels");
    if (class_index < 0 || class_index >= C)
        throw std::invalid_argument("wrapper: class index " + std::to_string(class_index) +
                                    " out of range [0," + std::to_string(C) + ")");
    const auto& s = scores.shape();
    int64_t plane = 1;
    for (size_t i = 2; i < s.size(); ++i) plane *= s[i];
    std::vector<int> labels(static_cast<size_t>(s[0]) * plane);
    for (int b = 0; b < s[0]; ++b)
        for (int64_t p = 0; p < plane; ++p) {
            int best = 0;
            float best_v = scores.values()[(static_cast<int64_t>(b) * C) * plane + p];
            for (int c = 1; c < C; ++c) {
                const float v = scores.values()[(static_cast<int64_t>(b) * C + c) * plane + p];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            labels[static_cast<size_t>(b * plane + p)] = best;
        }
    return detail::finish_wrapper(scores, labels, C, class_index);
}

// Single-channel scores: normalize -> Otsu -> binarize (y_norm > th). Class
// scalars are sums of the raw scores on each side of the threshold.
inline WrapperResult wrap_threshold(const Tensor& scores, int class_index) {
    if (scores.ndim() < 3 || scores.shape()[1] != 1)
        throw std::invalid_argument("wrapper: threshold strategy needs [B,1,spatial...] scores, got " +
                                    shape_to_string(scores.shape()));
    if (class_index < 0 || class_index > 1)
        throw std::invalid_argument("wrapper: threshold strategy classes are {0,1}");

    const Tensor norm = normalize_minmax(scores.detach());
    const double th = otsu_threshold(norm);
    std::vector<int> labels(static_cast<size_t>(scores.numel()));
    for (int64_t i = 0; i < scores.numel(); ++i)
        labels[static_cast<size_t>(i)] = norm.values()[i] > th ? 1 : 0;

    // binary labels over one channel: treat as two classes on channel 0
    const auto& s = scores.shape();
    int64_t plane = 1;
    for (size_t i = 2; i < s.size(); ++i) plane *= s[i];

    WrapperResult r;
    r.threshold = th;
    r.out_sums.assign(2, 0.0);
    r.out_counts.assign(2, 0.0);
    std::vector<float> label_vals(labels.size());
    std::vector<float> mask_vals(static_cast<size_t>(scores.numel()), 0.0f);
    for (int64_t i = 0; i < scores.numel(); ++i) {
        const int lab = labels[static_cast<size_t>(i)];
        label_vals[static_cast<size_t>(i)] = static_cast<float>(lab);
        r.out_counts[lab] += 1.0;
        r.out_sums[lab] += scores.values()[i];
        if (lab == class_index) mask_vals[static_cast<size_t>(i)] = 1.0f;
    }
    std::vector<int> label_shape = {s[0]};
    for (size_t i = 2; i < s.size(); ++i) label_shape.push_back(s[i]);
    r.labels = Tensor(label_shape, std::move(label_vals));
    r.class_mask = Tensor(scores.shape(), std::move(mask_vals));
    r.score = esegeta::sum(mul(scores, r.class_mask));
    return r;
}

inline WrapperResult apply_wrapper(const Tensor& scores, const WrapperSpec& spec) {
    return spec.strategy == WrapperStrategy::PixelwiseArgmax
               ? wrap_pixelwise(scores, spec.class_index)
               : wrap_threshold(scores, spec.class_index);
}

// Re-scores new model outputs against a previously frozen mask.
inline Tensor masked_score(const Tensor& scores, const Tensor& frozen_mask) {
    if (scores.shape() != frozen_mask.shape())
        throw std::invalid_argument("wrapper: scores shape " + shape_to_string(scores.shape()) +
                                    " does not match frozen mask " +
                                    shape_to_string(frozen_mask.shape()));
    return esegeta::sum(mul(scores, frozen_mask));
}

}  // namespace esegeta
