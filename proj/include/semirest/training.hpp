#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semirest/augment.hpp"
#include "semirest/common.hpp"
#include "semirest/labels.hpp"
#include "semirest/pipeline.hpp"
#include "semirest/swin.hpp"

namespace semirest {

enum class Setting { unsupervised, supervised, semisupervised };

inline const char* to_string(Setting s) {
    switch (s) {
        case Setting::unsupervised: return "unsupervised";
        case Setting::supervised: return "supervised";
        default: return "semisupervised";
    }
}

struct FocalParams {
    double alpha = 0.25;
    double gamma = 4.0;
};

struct TrainConfig {
    Setting setting = Setting::unsupervised;
    double lr = 1e-4;
    double p = 0.25;  // kept fraction of each image's sliding windows
    double eps_plus = 0.5;
    double eps_minus = 0.08;
    std::size_t b1 = 4;  // normal images per step
    std::size_t b2 = 2;  // simulated defective images per step
    std::size_t b3 = 0;  // real defective images per step
    double weight_decay = 0.05;
    FocalParams focal;
    double ema_decay = 0.999;
    std::size_t steps = 2000;
    std::uint64_t seed = 1;
    double dropout_alpha = 0.25;

    static TrainConfig defaults_for(Setting s) {
        TrainConfig c;
        c.setting = s;
        switch (s) {
            case Setting::unsupervised:
                c.lr = 1e-4; c.p = 0.25; c.eps_plus = 0.5; c.eps_minus = 0.08;
                c.b1 = 4; c.b2 = 2; c.b3 = 0;
                break;
            case Setting::supervised:
                c.lr = 1e-4; c.p = 0.25; c.eps_plus = 0.25; c.eps_minus = 0.08;
                c.b1 = 2; c.b2 = 2; c.b3 = 2;
                break;
            case Setting::semisupervised:
                c.lr = 3e-5; c.p = 0.1; c.eps_plus = 0.25; c.eps_minus = 0.08;
                c.b1 = 3; c.b2 = 3; c.b3 = 2;
                break;
        }
        return c;
    }

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("TrainConfig: lr must be > 0");
        if (!(p > 0.0) || p > 1.0) throw ConfigError("TrainConfig: p must be in (0, 1]");
        if (eps_minus < 0.0 || eps_minus > eps_plus || eps_plus > 1.0)
            throw ConfigError("TrainConfig: need 0 <= eps_minus <= eps_plus <= 1");
        if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
        if (ema_decay < 0.0 || ema_decay > 1.0)
            throw ConfigError("TrainConfig: ema_decay must be in [0, 1]");
        if (dropout_alpha < 0.0 || dropout_alpha > 1.0)
            throw ConfigError("TrainConfig: dropout_alpha must be in [0, 1]");
    }
};

// ---------------------------------------------------------------------------
// Focal loss (per-class normalization; IGNORED tokens excluded)
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr double kProbEps = 1e-12;

inline double clamp_prob(double p) {
    return std::min(std::max(p, kProbEps), 1.0 - kProbEps);
}

}  // namespace detail

// L = -(1/|Z-|) sum_neg (1-alpha) p^gamma log(1-p)
//     -(1/|Z+|) sum_pos alpha (1-p)^gamma log(p)
// Empty class sets contribute 0. dconf, when given, accumulates dL/dp.
template <typename T>
double focal_loss(std::span<const T> conf, std::span<const std::int8_t> labels, double alpha,
                  double gamma, std::span<T> dconf = {}) {
    if (conf.size() != labels.size())
        throw ArgumentError("focal_loss: confidence/label length mismatch");
    if (!dconf.empty() && dconf.size() != conf.size())
        throw ArgumentError("focal_loss: gradient buffer length mismatch");
    std::size_t n_pos = 0, n_neg = 0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
        const double p = double(conf[i]);
        if (!(p >= 0.0 && p <= 1.0))
            throw ArgumentError("focal_loss: confidence outside [0, 1]");
        if (labels[i] == kLabelAnomalous) ++n_pos;
        else if (labels[i] == kLabelNormal) ++n_neg;
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < conf.size(); ++i) {
        if (labels[i] == kLabelIgnored) continue;
        const double p = detail::clamp_prob(double(conf[i]));
        if (labels[i] == kLabelAnomalous) {
            const double w = alpha / double(n_pos);
            loss += -w * std::pow(1.0 - p, gamma) * std::log(p);
            if (!dconf.empty())
                dconf[i] += static_cast<T>(
                    -w * (-gamma * std::pow(1.0 - p, gamma - 1.0) * std::log(p) +
                          std::pow(1.0 - p, gamma) / p));
        } else {
            const double w = (1.0 - alpha) / double(n_neg);
            loss += -w * std::pow(p, gamma) * std::log(1.0 - p);
            if (!dconf.empty())
                dconf[i] += static_cast<T>(
                    -w * (gamma * std::pow(p, gamma - 1.0) * std::log(1.0 - p) -
                          std::pow(p, gamma) / (1.0 - p)));
        }
    }
    return loss;
}

// ---------------------------------------------------------------------------
// Optimizer and train state
// ---------------------------------------------------------------------------

struct TrainState {
    SwinModel<float> model;
    std::vector<float> ema;
    std::vector<float> moment1, moment2;
    std::size_t step = 0;
};

inline TrainState init_train_state(const SwinConfig& cfg, std::uint64_t init_seed) {
    TrainState st;
    st.model = init_swin<float>(cfg, init_seed);
    st.ema = st.model.params;
    st.moment1.assign(st.model.params.size(), 0.0f);
    st.moment2.assign(st.model.params.size(), 0.0f);
    return st;
}

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;

// Decoupled weight decay applied as theta *= (1 - lr*wd) before the moment
// update; bias-corrected Adam moments with the canonical constants.
inline void optimizer_step(TrainState& state, std::span<const float> grads, double lr,
                           double weight_decay) {
    if (grads.size() != state.model.params.size())
        throw ArgumentError("optimizer_step: gradient layout mismatch");
    for (float g : grads)
        if (!std::isfinite(g))
            throw NumericalError("optimizer_step: non-finite gradient at step " +
                                 std::to_string(state.step));
    state.step += 1;
    const double t = double(state.step);
    const double bc1 = 1.0 - std::pow(kAdamBeta1, t);
    const double bc2 = 1.0 - std::pow(kAdamBeta2, t);
    for (std::size_t i = 0; i < grads.size(); ++i) {
        double theta = double(state.model.params[i]) * (1.0 - lr * weight_decay);
        const double g = double(grads[i]);
        const double m = kAdamBeta1 * double(state.moment1[i]) + (1.0 - kAdamBeta1) * g;
        const double v = kAdamBeta2 * double(state.moment2[i]) + (1.0 - kAdamBeta2) * g * g;
        state.moment1[i] = static_cast<float>(m);
        state.moment2[i] = static_cast<float>(v);
        theta -= lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps);
        state.model.params[i] = static_cast<float>(theta);
    }
}

// ---------------------------------------------------------------------------
// Window sampling and the training loop
// ---------------------------------------------------------------------------

struct TrainingImage {
    std::string id;
    Tensor image;         // source pixels (simulated defects are pasted on these)
    Knn3Map knn3;         // per-position neighbor candidates against the bank
    BlockLabelMap labels; // {0,1,-1}; all-normal for clean images
};

struct TrainingSet {
    std::vector<TrainingImage> normals;
    std::vector<TrainingImage> defects;  // pixel- or box-labeled real anomalies
};

struct TrainContext {
    const MemoryBank* bank = nullptr;
    FeatureConfig feature;
    AugmentationConfig augment;
    ResidualMode mode = ResidualMode::square;
    std::size_t mu = 8;
    std::size_t window_step = 4;
};

struct TrainWindow {
    Tensor sub;                       // mu x mu x d_t tokens, augmented
    std::vector<std::int8_t> labels;  // mu*mu block labels
};

struct StepBatch {
    std::vector<TrainWindow> windows;
};

namespace detail {

// max(1, round(p*Q)) distinct windows, uniform without replacement
inline std::vector<WindowSpec> sample_windows(const std::vector<WindowSpec>& all, double p,
                                              Rng& rng) {
    const std::size_t q = all.size();
    std::size_t keep = static_cast<std::size_t>(std::llround(p * double(q)));
    keep = std::clamp<std::size_t>(keep, 1, q);
    std::vector<std::size_t> idx(q);
    for (std::size_t i = 0; i < q; ++i) idx[i] = i;
    for (std::size_t i = 0; i < keep; ++i) {
        const std::size_t j = i + std::size_t(uniform_index(rng, q - i));
        std::swap(idx[i], idx[j]);
    }
    std::vector<WindowSpec> out(keep);
    for (std::size_t i = 0; i < keep; ++i) out[i] = all[idx[i]];
    return out;
}

inline std::vector<std::size_t> sample_image_indices(std::size_t pool, std::size_t want,
                                                     Rng& rng) {
    std::vector<std::size_t> out(want);
    if (want <= pool) {
        std::vector<std::size_t> idx(pool);
        for (std::size_t i = 0; i < pool; ++i) idx[i] = i;
        for (std::size_t i = 0; i < want; ++i) {
            const std::size_t j = i + std::size_t(uniform_index(rng, pool - i));
            std::swap(idx[i], idx[j]);
            out[i] = idx[i];
        }
    } else {
        for (std::size_t i = 0; i < want; ++i)
            out[i] = std::size_t(uniform_index(rng, pool));
    }
    return out;
}

// rng stream tags for the per-step substreams
inline constexpr std::uint64_t kStreamSampling = 1;
inline constexpr std::uint64_t kStreamSimulation = 2;
inline constexpr std::uint64_t kStreamAugment = 3;
inline constexpr std::uint64_t kStreamDropout = 4;

inline void append_image_windows(const TrainingImage& img, const TrainContext& ctx,
                                 const TrainConfig& cfg, Rng& sample_rng, Rng& augment_rng,
                                 Rng& dropout_rng, StepBatch& batch) {
    const std::size_t ht = img.knn3.h / ctx.feature.rho;
    const std::size_t wt = img.knn3.w / ctx.feature.rho;
    const std::vector<WindowSpec> all = enumerate_windows(ht, wt, ctx.mu, ctx.window_step);
    for (const WindowSpec& w : sample_windows(all, cfg.p, sample_rng)) {
        TrainWindow tw;
        tw.sub = augmented_window(img.knn3, w, ctx.augment, ctx.mode, ctx.feature.rho,
                                  augment_rng);
        if (cfg.dropout_alpha > 0.0)
            random_pcr_dropout_inplace(tw.sub, cfg.dropout_alpha, dropout_rng);
        tw.labels = slice_labels(img.labels, w);
        batch.windows.push_back(std::move(tw));
    }
}

}  // namespace detail

// Simulated defective copy of a clean training image: paste anomalies, extract
// features against the same bank, derive block labels via Eq.-14 thresholds.
inline TrainingImage simulate_defective(const TrainingImage& base, const TrainContext& ctx,
                                        const TrainConfig& cfg, std::uint64_t sim_seed) {
    const SynthResult synth = synth_anomalies(base.image, sim_seed);
    TrainingImage out;
    out.id = base.id + "+sim";
    out.image = synth.image;
    const PcfMap pcf = image_to_pcf(synth.image, ctx.feature, out.id);
    out.knn3 = compute_knn3(pcf, *ctx.bank);
    const std::size_t ht = pcf.tensor.extent(0) / ctx.feature.rho;
    const std::size_t wt = pcf.tensor.extent(1) / ctx.feature.rho;
    out.labels = blocks_from_pixels(synth.mask, synth.mask.h / ht, synth.mask.w / wt,
                                    cfg.eps_plus, cfg.eps_minus);
    return out;
}

// One deterministic training batch: b1 normal + b2 simulated (+ b3 real
// defect) images, p of each image's windows, Eq.-12 augmentation and token
// dropout applied. Rebuilding the same (cfg.seed, step) yields the same batch.
inline StepBatch build_step_batch(const TrainingSet& data, const TrainContext& ctx,
                                  const TrainConfig& cfg, std::size_t step) {
    if (data.normals.empty())
        throw ConfigError("build_step_batch: training set has no normal images");
    const bool need_defects =
        cfg.b3 > 0 &&
        (cfg.setting == Setting::supervised || cfg.setting == Setting::semisupervised);
    if (need_defects && data.defects.empty())
        throw ConfigError("build_step_batch: setting requires real defective images");

    const std::uint64_t step_seed = derive_seed(cfg.seed, step);
    Rng sample_rng(derive_seed(step_seed, detail::kStreamSampling));
    Rng augment_rng(derive_seed(step_seed, detail::kStreamAugment));
    Rng dropout_rng(derive_seed(step_seed, detail::kStreamDropout));

    StepBatch batch;
    for (std::size_t i : detail::sample_image_indices(data.normals.size(), cfg.b1, sample_rng))
        detail::append_image_windows(data.normals[i], ctx, cfg, sample_rng, augment_rng,
                                     dropout_rng, batch);
    const auto sim_indices =
        detail::sample_image_indices(data.normals.size(), cfg.b2, sample_rng);
    for (std::size_t k = 0; k < sim_indices.size(); ++k) {
        const std::uint64_t sim_seed =
            derive_seed(derive_seed(step_seed, detail::kStreamSimulation), k);
        const TrainingImage sim =
            simulate_defective(data.normals[sim_indices[k]], ctx, cfg, sim_seed);
        detail::append_image_windows(sim, ctx, cfg, sample_rng, augment_rng, dropout_rng, batch);
    }
    if (need_defects)
        for (std::size_t i :
             detail::sample_image_indices(data.defects.size(), cfg.b3, sample_rng))
            detail::append_image_windows(data.defects[i], ctx, cfg, sample_rng, augment_rng,
                                         dropout_rng, batch);
    return batch;
}

// Loss of one batch under the given parameters; token confidences pool across
// windows into one Eq.-11 focal loss. Accumulates parameter gradients when
// grads is non-empty.
inline double batch_focal_loss(const SwinModel<float>& model, const StepBatch& batch,
                               const FocalParams& focal, std::span<float> grads) {
    std::vector<float> conf;
    std::vector<std::int8_t> labels;
    std::vector<SwinCache<float>> caches(grads.empty() ? 0 : batch.windows.size());
    std::vector<TensorT<float>> outputs(batch.windows.size());
    for (std::size_t i = 0; i < batch.windows.size(); ++i) {
        outputs[i] =
            swin_forward(model, batch.windows[i].sub, grads.empty() ? nullptr : &caches[i]);
        conf.insert(conf.end(), outputs[i].data.begin(), outputs[i].data.end());
        labels.insert(labels.end(), batch.windows[i].labels.begin(),
                      batch.windows[i].labels.end());
    }
    std::vector<float> dconf(grads.empty() ? 0 : conf.size(), 0.0f);
    const double loss =
        focal_loss<float>(conf, labels, focal.alpha, focal.gamma,
                          grads.empty() ? std::span<float>() : std::span<float>(dconf));
    if (!grads.empty()) {
        std::size_t offset = 0;
        for (std::size_t i = 0; i < batch.windows.size(); ++i) {
            const std::size_t n = outputs[i].size();
            TensorT<float> upstream({outputs[i].extent(0), outputs[i].extent(1)});
            std::copy(dconf.begin() + offset, dconf.begin() + offset + n,
                      upstream.data.begin());
            swin_backward(model, batch.windows[i].sub, caches[i], upstream, grads);
            offset += n;
        }
    }
    return loss;
}

struct TrainLogEntry {
    std::size_t step = 0;
    double loss = 0.0;
    double lr = 0.0;
    std::size_t windows = 0;
};

// Full-supervision training loop (also the "unsupervised" setting, where the
// positives come from simulated anomalies): sample, augment, forward, focal
// loss, backward, AdamW step, EMA update. The final log line re-evaluates the
// last batch with the final parameters so checkpoints can be replay-checked.
inline TrainState train(const TrainingSet& data, const TrainContext& ctx, const TrainConfig& cfg,
                        const SwinConfig& model_cfg, std::uint64_t init_seed,
                        std::vector<TrainLogEntry>* log = nullptr) {
    cfg.validate();
    TrainState state = init_train_state(model_cfg, init_seed);
    std::vector<float> grads(state.model.params.size());
    StepBatch batch;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        batch = build_step_batch(data, ctx, cfg, step);
        std::fill(grads.begin(), grads.end(), 0.0f);
        const double loss = batch_focal_loss(state.model, batch, cfg.focal, grads);
        if (!std::isfinite(loss))
            throw NumericalError("train: non-finite loss at step " + std::to_string(step));
        if (log) log->push_back({step, loss, cfg.lr, batch.windows.size()});
        optimizer_step(state, grads, cfg.lr, cfg.weight_decay);
        ema_update<float>(state.ema, state.model.params, cfg.ema_decay);
    }
    if (log && cfg.steps > 0) {
        const double replay = batch_focal_loss(state.model, batch, cfg.focal, {});
        log->push_back({cfg.steps, replay, cfg.lr, batch.windows.size()});
    }
    return state;
}

}  // namespace semirest
