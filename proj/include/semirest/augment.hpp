#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "semirest/common.hpp"
#include "semirest/memory_bank.hpp"
#include "semirest/swin.hpp"

namespace semirest {

enum class NoisePer { element, vector };

struct AugmentationConfig {
    double alpha1 = 0.5;           // 1st-neighbor branch boundary
    double alpha2 = 0.8;           // 2nd-neighbor branch boundary
    double dropout_alpha = 0.25;   // token reset probability
    double noise_log_sigma = 0.2;  // delta = e^z, z ~ N(0, noise_log_sigma)
    double noise_clip = 0.223;     // z clamped to [-clip, clip]
    std::uint64_t rng_seed = 0;
    NoisePer noise_per = NoisePer::element;

    void validate() const {
        if (alpha1 < 0.0 || alpha1 > alpha2 || alpha2 > 1.0)
            throw ArgumentError("AugmentationConfig: need 0 <= alpha1 <= alpha2 <= 1");
        if (dropout_alpha < 0.0 || dropout_alpha > 1.0)
            throw ArgumentError("AugmentationConfig: dropout_alpha must be in [0, 1]");
        if (noise_log_sigma < 0.0 || noise_clip < 0.0)
            throw ArgumentError("AugmentationConfig: noise parameters must be >= 0");
    }
};

// Branch selection: tau in [0, a1] -> 0, (a1, a2] -> 1, (a2, 1] -> 2.
inline std::size_t knn_branch(double tau, double alpha1, double alpha2) {
    if (tau <= alpha1) return 0;
    if (tau <= alpha2) return 1;
    return 2;
}

// One clamped multiplicative noise factor.
inline float knn_noise_factor(Rng& rng, const AugmentationConfig& cfg) {
    double z = normal01(rng) * cfg.noise_log_sigma;
    z = std::clamp(z, -cfg.noise_clip, cfg.noise_clip);
    return static_cast<float>(std::exp(z));
}

// Deterministic core: residual against the given candidate difference with an
// explicit noise vector. candidates hold (query - neighbor_k) for k = 0,1,2.
inline Pcr knn_residual_from(const std::vector<std::vector<float>>& candidates,
                             std::size_t branch, std::span<const float> delta,
                             ResidualMode mode) {
    if (branch >= candidates.size())
        throw ArgumentError("knn_residual_from: branch out of range");
    const std::vector<float>& diff = candidates[branch];
    if (delta.size() != diff.size())
        throw DimensionError("knn_residual_from: delta length mismatch");
    Pcr pcr;
    pcr.vector = apply_residual_mode(diff, mode);
    for (std::size_t k = 0; k < pcr.vector.size(); ++k) pcr.vector[k] *= delta[k];
    return pcr;
}

// Randomly selects among the query's first three bank neighbors and applies
// elementwise multiplicative noise delta = e^z, z ~ N(0, sigma) clamped.
// Draw order: tau, then the noise factors.
inline Pcr knn_residual_augment(const MemoryBank& bank, std::span<const float> query,
                                const AugmentationConfig& cfg, ResidualMode mode, Rng& rng) {
    cfg.validate();
    if (bank.size() < 3)
        throw ArgumentError("knn_residual_augment: bank must hold at least 3 entries");
    const std::vector<Neighbor> nn = nearest_neighbors(bank, query, 3);
    std::vector<std::vector<float>> candidates(3, std::vector<float>(query.size()));
    for (std::size_t k = 0; k < 3; ++k) {
        const std::vector<float>& entry = bank.entries[nn[k].index];
        for (std::size_t j = 0; j < query.size(); ++j)
            candidates[k][j] = query[j] - entry[j];
    }
    const std::size_t branch = knn_branch(uniform01(rng), cfg.alpha1, cfg.alpha2);
    std::vector<float> delta(query.size());
    if (cfg.noise_per == NoisePer::vector) {
        const float dv = knn_noise_factor(rng, cfg);
        std::fill(delta.begin(), delta.end(), dv);
    } else {
        for (float& d : delta) d = knn_noise_factor(rng, cfg);
    }
    return knn_residual_from(candidates, branch, delta, mode);
}

// Every token is zeroed independently with probability alpha; a token is
// either untouched or entirely zero. One tau per token in row-major order.
template <typename T>
TokenTensorT<T> random_pcr_dropout(const TokenTensorT<T>& tokens, double alpha,
                                   std::uint64_t seed) {
    if (alpha < 0.0 || alpha > 1.0)
        throw ArgumentError("random_pcr_dropout: alpha must be in [0, 1]");
    TokenTensorT<T> out = tokens;
    if (alpha == 0.0) return out;
    Rng rng(seed);
    const std::size_t ht = out.tensor.extent(0), wt = out.tensor.extent(1);
    for (std::size_t r = 0; r < ht; ++r)
        for (std::size_t c = 0; c < wt; ++c) {
            if (uniform01(rng) <= alpha) {
                auto tok = out.tensor.vec3(r, c);
                std::fill(tok.begin(), tok.end(), T(0));
            }
        }
    return out;
}

// In-place variant driven by an external rng (training uses per-purpose
// streams); same per-token draw order.
template <typename T>
void random_pcr_dropout_inplace(TensorT<T>& sub, double alpha, Rng& rng) {
    if (alpha < 0.0 || alpha > 1.0)
        throw ArgumentError("random_pcr_dropout: alpha must be in [0, 1]");
    if (alpha == 0.0) return;
    const std::size_t ht = sub.extent(0), wt = sub.extent(1);
    for (std::size_t r = 0; r < ht; ++r)
        for (std::size_t c = 0; c < wt; ++c)
            if (uniform01(rng) <= alpha) {
                auto tok = sub.vec3(r, c);
                std::fill(tok.begin(), tok.end(), T(0));
            }
}

}  // namespace semirest
