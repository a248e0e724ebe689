#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "semirest/common.hpp"
#include "semirest/labels.hpp"
#include "semirest/tensor.hpp"

namespace semirest {

// Bagged block map to pixel resolution: corner-aligned bilinear upscale to
// the image extent, then Gaussian smoothing.
template <typename T>
TensorT<T> postprocess_map(const TensorT<T>& theta, std::size_t image_h, std::size_t image_w,
                           double sigma) {
    return gaussian_blur(bilinear_resize(theta, image_h, image_w), sigma);
}

namespace detail {

struct ScoredPixel {
    double score;
    std::int32_t region;  // -1 for negatives, otherwise global region id
};

template <typename T>
std::vector<ScoredPixel> pool_pixels(const std::vector<TensorT<T>>& scores,
                                     const std::vector<PixelLabelMap>& truths,
                                     std::vector<std::size_t>* region_sizes) {
    if (scores.size() != truths.size() || scores.empty())
        throw ArgumentError("metrics: score and truth lists must match and be non-empty");
    std::vector<ScoredPixel> pixels;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const TensorT<T>& s = scores[i];
        const PixelLabelMap& t = truths[i];
        if (s.rank() != 2 || s.extent(0) != t.h || s.extent(1) != t.w)
            throw DimensionError("metrics: score map extent does not match its truth map");
        std::int32_t base = 0;
        ComponentMap cm;
        if (region_sizes) {
            cm = connected_components_8(t);
            base = static_cast<std::int32_t>(region_sizes->size());
            region_sizes->resize(region_sizes->size() + std::size_t(cm.count), 0);
        }
        for (std::size_t p = 0; p < t.map.size(); ++p) {
            const double sv = double(s.data[p]);
            if (!std::isfinite(sv)) throw ArgumentError("metrics: non-finite score value");
            std::int32_t region = -1;
            if (t.map[p] == kLabelAnomalous) {
                region = region_sizes ? base + cm.index[p] : 0;
                if (region_sizes) ++(*region_sizes)[std::size_t(region)];
            }
            pixels.push_back({sv, region});
        }
    }
    return pixels;
}

}  // namespace detail

// Rank-based AUROC over all pixels pooled across images; midrank ties.
template <typename T>
double pixel_auroc(const std::vector<TensorT<T>>& scores,
                   const std::vector<PixelLabelMap>& truths) {
    std::vector<detail::ScoredPixel> pixels = detail::pool_pixels(scores, truths, nullptr);
    std::size_t pos = 0;
    for (const auto& p : pixels) pos += p.region >= 0 ? 1 : 0;
    const std::size_t neg = pixels.size() - pos;
    if (pos == 0 || neg == 0)
        throw UndefinedMetricError("pixel_auroc: ground truth holds a single class");

    std::sort(pixels.begin(), pixels.end(),
              [](const auto& a, const auto& b) { return a.score < b.score; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < pixels.size()) {
        std::size_t j = i;
        while (j < pixels.size() && pixels[j].score == pixels[i].score) ++j;
        const double midrank = 0.5 * (double(i + 1) + double(j));  // ranks are 1-based
        for (std::size_t k = i; k < j; ++k)
            if (pixels[k].region >= 0) rank_sum_pos += midrank;
        i = j;
    }
    const double u = rank_sum_pos - double(pos) * (double(pos) + 1.0) / 2.0;
    return u / (double(pos) * double(neg));
}

// Area under the precision-recall curve: descending-score sweep with the
// step-wise summation sum_k (R_k - R_{k-1}) * P_k; ties enter as one group.
template <typename T>
double average_precision(const std::vector<TensorT<T>>& scores,
                         const std::vector<PixelLabelMap>& truths) {
    std::vector<detail::ScoredPixel> pixels = detail::pool_pixels(scores, truths, nullptr);
    std::size_t pos = 0;
    for (const auto& p : pixels) pos += p.region >= 0 ? 1 : 0;
    if (pos == 0) throw UndefinedMetricError("average_precision: no positive pixels");

    std::sort(pixels.begin(), pixels.end(),
              [](const auto& a, const auto& b) { return a.score > b.score; });
    double ap = 0.0;
    double prev_recall = 0.0;
    std::size_t tp = 0, fp = 0;
    std::size_t i = 0;
    while (i < pixels.size()) {
        std::size_t j = i;
        while (j < pixels.size() && pixels[j].score == pixels[i].score) ++j;
        for (std::size_t k = i; k < j; ++k)
            (pixels[k].region >= 0 ? tp : fp) += 1;
        const double recall = double(tp) / double(pos);
        const double precision = double(tp) / double(tp + fp);
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    return ap;
}

// Per-region overlap: 8-connected truth components are the regions; the mean
// region overlap is traced against FPR over all distinct thresholds and
// integrated up to fpr_limit (trapezoidal, normalized by fpr_limit).
template <typename T>
double pro_score(const std::vector<TensorT<T>>& scores, const std::vector<PixelLabelMap>& truths,
                 double fpr_limit = 0.3) {
    if (!(fpr_limit > 0.0) || fpr_limit > 1.0)
        throw ArgumentError("pro_score: fpr_limit must be in (0, 1]");
    std::vector<std::size_t> region_sizes;
    std::vector<detail::ScoredPixel> pixels = detail::pool_pixels(scores, truths, &region_sizes);
    if (region_sizes.empty()) throw UndefinedMetricError("pro_score: no anomaly regions");
    std::size_t neg = 0;
    for (const auto& p : pixels) neg += p.region < 0 ? 1 : 0;
    if (neg == 0) throw UndefinedMetricError("pro_score: no negative pixels");

    std::sort(pixels.begin(), pixels.end(),
              [](const auto& a, const auto& b) { return a.score > b.score; });

    std::vector<std::size_t> hits(region_sizes.size(), 0);
    std::size_t fp = 0;
    double prev_fpr = 0.0, prev_pro = 0.0;
    double area = 0.0;
    bool done = false;

    std::size_t i = 0;
    while (i < pixels.size() && !done) {
        std::size_t j = i;
        while (j < pixels.size() && pixels[j].score == pixels[i].score) ++j;
        for (std::size_t k = i; k < j; ++k) {
            if (pixels[k].region >= 0)
                ++hits[std::size_t(pixels[k].region)];
            else
                ++fp;
        }
        double pro = 0.0;
        for (std::size_t r = 0; r < region_sizes.size(); ++r)
            pro += double(hits[r]) / double(region_sizes[r]);
        pro /= double(region_sizes.size());
        const double fpr = double(fp) / double(neg);

        if (fpr >= fpr_limit) {
            // interpolate the curve at the integration limit
            double pro_at_limit = pro;
            if (fpr > prev_fpr)
                pro_at_limit =
                    prev_pro + (pro - prev_pro) * (fpr_limit - prev_fpr) / (fpr - prev_fpr);
            area += (fpr_limit - prev_fpr) * 0.5 * (prev_pro + pro_at_limit);
            done = true;
        } else {
            area += (fpr - prev_fpr) * 0.5 * (prev_pro + pro);
            prev_fpr = fpr;
            prev_pro = pro;
        }
        i = j;
    }
    if (!done) area += (fpr_limit - prev_fpr) * prev_pro;  // unreachable: fpr hits 1
    return area / fpr_limit;
}

struct PerImageMetrics {
    std::string id;
    double ap = 0.0;
    double pro = 0.0;
    double auroc = 0.0;
    bool degenerate = false;  // single-class truth or missing regions
};

struct MetricReport {
    double ap = 0.0;
    double pro = 0.0;
    double pixel_auroc = 0.0;
    bool auroc_degenerate = false;  // scores carried no ranking information
    std::vector<PerImageMetrics> per_image;
};

template <typename T>
MetricReport evaluate_maps(const std::vector<TensorT<T>>& scores,
                           const std::vector<PixelLabelMap>& truths,
                           const std::vector<std::string>& ids, double fpr_limit = 0.3) {
    MetricReport report;
    report.ap = average_precision(scores, truths);
    report.pro = pro_score(scores, truths, fpr_limit);
    report.pixel_auroc = pixel_auroc(scores, truths);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        PerImageMetrics m;
        m.id = i < ids.size() ? ids[i] : std::to_string(i);
        const std::vector<TensorT<T>> s{scores[i]};
        const std::vector<PixelLabelMap> t{truths[i]};
        try {
            m.ap = average_precision(s, t);
            m.pro = pro_score(s, t, fpr_limit);
            m.auroc = pixel_auroc(s, t);
        } catch (const UndefinedMetricError&) {
            m.degenerate = true;
        }
        report.per_image.push_back(std::move(m));
    }
    return report;
}

}  // namespace semirest
