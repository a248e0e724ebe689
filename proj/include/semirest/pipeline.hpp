#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "semirest/augment.hpp"
#include "semirest/common.hpp"
#include "semirest/feature.hpp"
#include "semirest/labels.hpp"
#include "semirest/memory_bank.hpp"
#include "semirest/swin.hpp"

namespace semirest {

struct FeatureConfig {
    std::size_t d_f = 64;
    std::uint64_t seed = 20240101;
    float lambda_pe = 0.1f;
    bool smooth = true;
    std::size_t rho = 1;
};

// image -> deep features -> 3x3 smoothing -> position-constrained features
inline PcfMap image_to_pcf(const Tensor& image, const FeatureConfig& cfg,
                           const std::string& image_id = {}) {
    FeatureMap fm = toy_extract(image, cfg.seed, cfg.d_f);
    fm.source_image_id = image_id;
    if (cfg.smooth) fm = smooth_hypercolumns(fm);
    return make_pcf(fm, cfg.lambda_pe, cfg.rho);
}

// Per grid position the first three bank neighbors' difference vectors
// (query - m_k), the raw material of Eq.-12 style augmentation.
struct Knn3Map {
    std::size_t h = 0, w = 0, d = 0;
    std::vector<float> diffs;  // h*w*3*d

    std::span<const float> candidate(std::size_t r, std::size_t c, std::size_t k) const {
        return std::span<const float>(diffs.data() + ((r * w + c) * 3 + k) * d, d);
    }
    std::span<float> candidate(std::size_t r, std::size_t c, std::size_t k) {
        return std::span<float>(diffs.data() + ((r * w + c) * 3 + k) * d, d);
    }
};

inline Knn3Map compute_knn3(const PcfMap& pcf, const MemoryBank& bank) {
    if (bank.size() < 3) throw ArgumentError("compute_knn3: bank must hold at least 3 entries");
    Knn3Map out;
    out.h = pcf.tensor.extent(0);
    out.w = pcf.tensor.extent(1);
    out.d = pcf.tensor.extent(2);
    if (bank.dim() != out.d) throw DimensionError("compute_knn3: bank dimension mismatch");
    out.diffs.resize(out.h * out.w * 3 * out.d);
    for (std::size_t r = 0; r < out.h; ++r) {
        for (std::size_t c = 0; c < out.w; ++c) {
            const auto query = pcf.tensor.vec3(r, c);
            const std::vector<Neighbor> nn = nearest_neighbors(bank, query, 3);
            for (std::size_t k = 0; k < 3; ++k) {
                auto dst = out.candidate(r, c, k);
                const std::vector<float>& entry = bank.entries[nn[k].index];
                for (std::size_t j = 0; j < out.d; ++j) dst[j] = query[j] - entry[j];
            }
        }
    }
    return out;
}

// Inference-path tokens: plain 1-NN PCR at every position, then tokenized.
inline TokenTensor pcr_tokens(const PcfMap& pcf, const MemoryBank& bank, ResidualMode mode,
                              std::size_t rho) {
    const std::size_t h = pcf.tensor.extent(0), w = pcf.tensor.extent(1),
                      d = pcf.tensor.extent(2);
    Tensor residuals({h, w, d});
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const Pcr pcr = compute_pcr(bank, pcf.tensor.vec3(r, c), mode);
            auto dst = residuals.vec3(r, c);
            std::copy(pcr.vector.begin(), pcr.vector.end(), dst.begin());
        }
    return tokenize(residuals, rho);
}

// Augmented window sub-tensor from precomputed 3-NN candidates. The window is
// given in token coordinates; feature coordinates scale by rho. Per feature
// position in row-major order the rng supplies one branch tau followed by the
// noise factors.
inline Tensor augmented_window(const Knn3Map& knn3, const WindowSpec& w,
                               const AugmentationConfig& cfg, ResidualMode mode, std::size_t rho,
                               Rng& rng) {
    cfg.validate();
    const std::size_t fh = w.mu * rho, fw = w.mu * rho;
    const std::size_t fr0 = w.row * rho, fc0 = w.col * rho;
    if (fr0 + fh > knn3.h || fc0 + fw > knn3.w)
        throw ArgumentError("augmented_window: window out of bounds");
    Tensor residuals({fh, fw, knn3.d});
    std::vector<std::vector<float>> candidates(3, std::vector<float>(knn3.d));
    std::vector<float> delta(knn3.d);
    for (std::size_t r = 0; r < fh; ++r) {
        for (std::size_t c = 0; c < fw; ++c) {
            for (std::size_t k = 0; k < 3; ++k) {
                const auto cand = knn3.candidate(fr0 + r, fc0 + c, k);
                std::copy(cand.begin(), cand.end(), candidates[k].begin());
            }
            const std::size_t branch = knn_branch(uniform01(rng), cfg.alpha1, cfg.alpha2);
            if (cfg.noise_per == NoisePer::vector) {
                std::fill(delta.begin(), delta.end(), knn_noise_factor(rng, cfg));
            } else {
                for (float& dv : delta) dv = knn_noise_factor(rng, cfg);
            }
            const Pcr pcr = knn_residual_from(candidates, branch, delta, mode);
            auto dst = residuals.vec3(r, c);
            std::copy(pcr.vector.begin(), pcr.vector.end(), dst.begin());
        }
    }
    return tokenize(residuals, rho).tensor;
}

// Plain (inference-style) window sub-tensor from the 1-NN candidate.
inline Tensor plain_window(const Knn3Map& knn3, const WindowSpec& w, ResidualMode mode,
                           std::size_t rho) {
    const std::size_t fh = w.mu * rho, fw = w.mu * rho;
    const std::size_t fr0 = w.row * rho, fc0 = w.col * rho;
    if (fr0 + fh > knn3.h || fc0 + fw > knn3.w)
        throw ArgumentError("plain_window: window out of bounds");
    Tensor residuals({fh, fw, knn3.d});
    for (std::size_t r = 0; r < fh; ++r)
        for (std::size_t c = 0; c < fw; ++c) {
            const auto cand = knn3.candidate(fr0 + r, fc0 + c, 0);
            const std::vector<float> v =
                apply_residual_mode(std::span<const float>(cand.data(), cand.size()), mode);
            auto dst = residuals.vec3(r, c);
            std::copy(v.begin(), v.end(), dst.begin());
        }
    return tokenize(residuals, rho).tensor;
}

// Label window on the token grid.
inline std::vector<std::int8_t> slice_labels(const BlockLabelMap& labels, const WindowSpec& w) {
    if (w.row + w.mu > labels.h || w.col + w.mu > labels.w)
        throw ArgumentError("slice_labels: window out of bounds");
    std::vector<std::int8_t> out(w.mu * w.mu);
    for (std::size_t r = 0; r < w.mu; ++r)
        for (std::size_t c = 0; c < w.mu; ++c)
            out[r * w.mu + c] = labels.at(w.row + r, w.col + c);
    return out;
}

}  // namespace semirest
