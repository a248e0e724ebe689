#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "semirest/augment.hpp"
#include "semirest/common.hpp"
#include "semirest/labels.hpp"
#include "semirest/pipeline.hpp"
#include "semirest/swin.hpp"
#include "semirest/training.hpp"

namespace semirest {

struct MixMatchConfig {
    double gamma_sharpen = 0.5;  // sharpening temperature
    std::size_t num_aug = 3;     // M augmented copies
    double lambda_u_max = 5.0;
    std::size_t ramp_steps = 400;
    double mixup_beta = 0.75;  // Beta(beta, beta); 0 degenerates to lambda' = 1
    double alpha_x = 0.25, alpha_u = 0.75;
    double gamma_x = 4.0, gamma_u = 4.0;
    double upsilon = 0.5;        // box-to-block threshold
    double dropout_alpha = 0.25;
    enum class MixScope { batch, window } mix_scope = MixScope::batch;

    void validate() const {
        if (!(gamma_sharpen > 0.0))
            throw ConfigError("MixMatchConfig: sharpening temperature must be > 0");
        if (num_aug < 1) throw ConfigError("MixMatchConfig: need at least one copy");
        if (mixup_beta < 0.0) throw ConfigError("MixMatchConfig: mixup_beta must be >= 0");
        if (dropout_alpha < 0.0 || dropout_alpha > 1.0)
            throw ConfigError("MixMatchConfig: dropout_alpha must be in [0, 1]");
        if (upsilon < 0.0 || upsilon > 1.0)
            throw ConfigError("MixMatchConfig: upsilon must be in [0, 1]");
        if (lambda_u_max < 0.0)
            throw ConfigError("MixMatchConfig: lambda_u_max must be >= 0");
    }
};

// Binary sharpening p^(1/gamma) / (p^(1/gamma) + (1-p)^(1/gamma)).
inline double sharpen(double p, double gamma) {
    if (!(gamma > 0.0)) throw ArgumentError("sharpen: temperature must be > 0");
    if (!(p >= 0.0 && p <= 1.0)) throw ArgumentError("sharpen: p must be in [0, 1]");
    const double a = std::pow(p, 1.0 / gamma);
    const double b = std::pow(1.0 - p, 1.0 / gamma);
    if (a + b == 0.0) return 0.5;
    return a / (a + b);
}

// lambda_u_max * min(1, step / ramp_steps)
inline double ramp_weight(std::size_t step, double lambda_u_max, std::size_t ramp_steps) {
    if (ramp_steps == 0) return lambda_u_max;
    return lambda_u_max * std::min(1.0, double(step) / double(ramp_steps));
}

// lambda' = max(lambda, 1 - lambda), lambda ~ Beta(beta, beta); the first
// argument of a MixUp pair always dominates. beta = 0 forces lambda' = 1.
inline double mixup_lambda(Rng& rng, double beta) {
    if (beta < 0.0) throw ArgumentError("mixup_lambda: beta must be >= 0");
    if (beta == 0.0) return 1.0;
    const double lambda = beta_symmetric(rng, beta);
    return std::max(lambda, 1.0 - lambda);
}

// token' = lambda'*a + (1-lambda')*b, label' likewise.
inline double mixup_pair(std::span<const float> a_token, double a_label,
                         std::span<const float> b_token, double b_label, double lambda_prime,
                         std::span<float> out_token) {
    if (a_token.size() != b_token.size() || out_token.size() != a_token.size())
        throw DimensionError("mixup_pair: token length mismatch");
    const float lp = static_cast<float>(lambda_prime);
    for (std::size_t k = 0; k < a_token.size(); ++k)
        out_token[k] = lp * a_token[k] + (1.0f - lp) * b_token[k];
    return lambda_prime * a_label + (1.0 - lambda_prime) * b_label;
}

// ---------------------------------------------------------------------------
// Semi-supervised batches
// ---------------------------------------------------------------------------

// One box-labeled window: neighbor candidates per feature position plus the
// {0,-1} label window on the token grid.
struct SemiSourceWindow {
    std::size_t mu = 0;   // token window edge
    std::size_t rho = 1;  // feature positions per token edge
    std::size_t d = 0;    // d_f
    std::vector<float> candidates;    // (mu*rho)^2 * 3 * d, row-major positions
    std::vector<std::int8_t> labels;  // mu*mu in {0,-1}

    std::span<const float> candidate(std::size_t pos, std::size_t k) const {
        return std::span<const float>(candidates.data() + (pos * 3 + k) * d, d);
    }
    std::size_t feature_positions() const { return mu * rho * mu * rho; }
    std::size_t tokens() const { return mu * mu; }
};

struct SemiBatch {
    std::vector<SemiSourceWindow> windows;

    std::size_t total_tokens(std::size_t num_aug) const {
        std::size_t n = 0;
        for (const auto& w : windows) n += w.tokens();
        return n * num_aug;
    }
};

inline SemiSourceWindow make_semi_window(const Knn3Map& knn3, const BlockLabelMap& labels,
                                         const WindowSpec& w, std::size_t rho) {
    SemiSourceWindow out;
    out.mu = w.mu;
    out.rho = rho;
    out.d = knn3.d;
    const std::size_t fh = w.mu * rho, fr0 = w.row * rho, fc0 = w.col * rho;
    if (fr0 + fh > knn3.h || fc0 + fh > knn3.w)
        throw ArgumentError("make_semi_window: window out of bounds");
    out.candidates.resize(fh * fh * 3 * knn3.d);
    for (std::size_t r = 0; r < fh; ++r)
        for (std::size_t c = 0; c < fh; ++c)
            for (std::size_t k = 0; k < 3; ++k) {
                const auto src = knn3.candidate(fr0 + r, fc0 + c, k);
                std::copy(src.begin(), src.end(),
                          out.candidates.begin() + ((r * fh + c) * 3 + k) * knn3.d);
            }
    out.labels = slice_labels(labels, w);
    for (std::int8_t v : out.labels)
        if (v != kLabelNormal && v != kLabelIgnored)
            throw ArgumentError("make_semi_window: semi labels must be in {0, -1}");
    return out;
}

// ---------------------------------------------------------------------------
// The randomness plan. Drawing it up-front makes every stochastic choice of
// the algorithm replayable: tests force values and the oracle re-runs the
// exact draws. Token index order is (window, copy, row-major token).
// ---------------------------------------------------------------------------

struct MixPlan {
    // Eq.-12 augmentation per (window, copy, feature position)
    std::vector<std::size_t> branches;
    std::vector<float> deltas;  // same order, d floats per position
    // one permutation and one lambda' list per mix group
    std::vector<std::vector<std::size_t>> shuffles;
    std::vector<std::vector<double>> lambda_primes;
    // token dropout taus per (window, copy, token)
    std::vector<double> dropout_taus;
};

namespace detail {

// group -> global token index ranges; batch scope = one group over everything
inline std::vector<std::pair<std::size_t, std::size_t>> mix_groups(const SemiBatch& batch,
                                                                   const MixMatchConfig& cfg) {
    std::vector<std::pair<std::size_t, std::size_t>> groups;
    if (cfg.mix_scope == MixMatchConfig::MixScope::batch) {
        groups.push_back({0, batch.total_tokens(cfg.num_aug)});
    } else {
        std::size_t base = 0;
        for (const auto& w : batch.windows) {
            const std::size_t n = w.tokens() * cfg.num_aug;
            groups.push_back({base, base + n});
            base += n;
        }
    }
    return groups;
}

}  // namespace detail

// Draw order: (1) per window, per copy, per feature position: branch tau then
// noise factors; (2) per group a Fisher-Yates shuffle; (3) per group one
// lambda' per mixed pair; (4) per token one dropout tau.
inline MixPlan draw_mix_plan(const SemiBatch& batch, const MixMatchConfig& cfg,
                             const AugmentationConfig& aug, Rng& rng) {
    cfg.validate();
    aug.validate();
    MixPlan plan;
    std::size_t positions = 0;
    for (const auto& w : batch.windows) positions += w.feature_positions();
    positions *= cfg.num_aug;
    std::size_t d_total = 0;
    for (const auto& w : batch.windows) d_total += w.feature_positions() * w.d;
    d_total *= cfg.num_aug;

    plan.branches.reserve(positions);
    plan.deltas.reserve(d_total);
    for (const auto& w : batch.windows) {
        for (std::size_t j = 0; j < cfg.num_aug; ++j) {
            for (std::size_t p = 0; p < w.feature_positions(); ++p) {
                plan.branches.push_back(knn_branch(uniform01(rng), aug.alpha1, aug.alpha2));
                if (aug.noise_per == NoisePer::vector) {
                    const float dv = knn_noise_factor(rng, aug);
                    for (std::size_t k = 0; k < w.d; ++k) plan.deltas.push_back(dv);
                } else {
                    for (std::size_t k = 0; k < w.d; ++k)
                        plan.deltas.push_back(knn_noise_factor(rng, aug));
                }
            }
        }
    }

    for (const auto& [lo, hi] : detail::mix_groups(batch, cfg)) {
        const std::size_t n = hi - lo;
        std::vector<std::size_t> perm(n);
        for (std::size_t i = 0; i < n; ++i) perm[i] = i;
        for (std::size_t i = n; i-- > 1;) {
            const std::size_t j = std::size_t(uniform_index(rng, i + 1));
            std::swap(perm[i], perm[j]);
        }
        plan.shuffles.push_back(std::move(perm));
        std::vector<double> lambdas(n);
        for (double& l : lambdas) l = mixup_lambda(rng, cfg.mixup_beta);
        plan.lambda_primes.push_back(std::move(lambdas));
    }

    const std::size_t tokens = batch.total_tokens(cfg.num_aug);
    plan.dropout_taus.resize(tokens);
    for (double& t : plan.dropout_taus) t = uniform01(rng);
    return plan;
}

// Step-2 tensors: the M augmented copies of every window under the plan.
// copies[w*M + j] is a mu x mu x d_t tensor.
inline std::vector<Tensor> build_copy_tokens(const SemiBatch& batch, const MixMatchConfig& cfg,
                                             const MixPlan& plan, ResidualMode mode) {
    std::vector<Tensor> copies;
    copies.reserve(batch.windows.size() * cfg.num_aug);
    std::size_t pos_base = 0;
    for (const auto& w : batch.windows) {
        const std::size_t fh = w.mu * w.rho;
        for (std::size_t j = 0; j < cfg.num_aug; ++j) {
            Tensor residuals({fh, fh, w.d});
            for (std::size_t p = 0; p < w.feature_positions(); ++p) {
                const std::size_t plan_idx = pos_base + j * w.feature_positions() + p;
                const std::size_t branch = plan.branches[plan_idx];
                const auto cand = w.candidate(p, branch);
                const float* delta = plan.deltas.data() + plan_idx * w.d;
                float* dst = residuals.data.data() + p * w.d;
                if (mode == ResidualMode::square) {
                    for (std::size_t k = 0; k < w.d; ++k)
                        dst[k] = cand[k] * cand[k] * delta[k];
                } else {
                    for (std::size_t k = 0; k < w.d; ++k)
                        dst[k] = std::abs(cand[k]) * delta[k];
                }
            }
            copies.push_back(tokenize(residuals, w.rho).tensor);
        }
        pos_base += cfg.num_aug * w.feature_positions();
    }
    return copies;
}

// Step 3: mean anomaly confidence over the M copies, sharpened; result is
// shared by all copies of a window. Treated as constants for gradients.
inline std::vector<std::vector<double>> guess_labels(const SwinModel<float>& model,
                                                     const std::vector<Tensor>& copies,
                                                     const SemiBatch& batch,
                                                     const MixMatchConfig& cfg) {
    if (cfg.num_aug < 1 || copies.size() != batch.windows.size() * cfg.num_aug)
        throw ArgumentError("guess_labels: copy list does not match the batch");
    std::vector<std::vector<double>> guesses(batch.windows.size());
    for (std::size_t wi = 0; wi < batch.windows.size(); ++wi) {
        const std::size_t tokens = batch.windows[wi].tokens();
        std::vector<double> mean(tokens, 0.0);
        for (std::size_t j = 0; j < cfg.num_aug; ++j) {
            const TensorT<float> theta = swin_forward(model, copies[wi * cfg.num_aug + j]);
            for (std::size_t t = 0; t < tokens; ++t) mean[t] += double(theta.data[t]);
        }
        for (double& v : mean) v = sharpen(v / double(cfg.num_aug), cfg.gamma_sharpen);
        guesses[wi] = std::move(mean);
    }
    return guesses;
}

struct MixMatchLoss {
    double mix = 0.0;  // L_x + ramp * L_u
    double x = 0.0;
    double u = 0.0;
};

// Steps 2-9 of the MixMatch recipe under an explicit plan. Gradients, when a
// buffer is supplied, flow only through the step-8 forward passes.
inline MixMatchLoss mixmatch_step_with_plan(const SwinModel<float>& model, const SemiBatch& batch,
                                            const MixMatchConfig& cfg, ResidualMode mode,
                                            const MixPlan& plan, std::size_t step,
                                            std::span<float> grads = {}) {
    cfg.validate();
    if (batch.windows.empty())
        throw ArgumentError("mixmatch_step: batch holds no tokens (X and U both empty)");
    const std::size_t m = cfg.num_aug;
    const std::size_t n = batch.total_tokens(m);

    // steps 2-3
    const std::vector<Tensor> copies = build_copy_tokens(batch, cfg, plan, mode);
    const std::vector<std::vector<double>> guesses = guess_labels(model, copies, batch, cfg);

    // global token view: index (window, copy, token)
    struct TokenRef {
        std::size_t window, copy, token;
    };
    std::vector<TokenRef> refs(n);
    std::vector<std::int8_t> known(n);   // y*
    std::vector<double> label_in(n);     // 0 for X members, guessed for U members
    {
        std::size_t i = 0;
        for (std::size_t wi = 0; wi < batch.windows.size(); ++wi) {
            const std::size_t tokens = batch.windows[wi].tokens();
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t t = 0; t < tokens; ++t, ++i) {
                    refs[i] = {wi, j, t};
                    known[i] = batch.windows[wi].labels[t];
                    label_in[i] = known[i] == kLabelNormal ? 0.0 : guesses[wi][t];
                }
        }
    }
    auto token_of = [&](std::size_t i) {
        const TokenRef& r = refs[i];
        const Tensor& src = copies[r.window * m + r.copy];
        const std::size_t dt = src.extent(2);
        return std::span<const float>(src.data.data() + r.token * dt, dt);
    };

    // steps 4-7 per mix group
    std::vector<Tensor> mixed = copies;  // same geometry, values overwritten per slot
    std::vector<double> mixed_label(n, 0.0);
    const auto groups = detail::mix_groups(batch, cfg);
    if (groups.size() != plan.shuffles.size())
        throw ArgumentError("mixmatch_step: plan does not match the batch grouping");
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto [lo, hi] = groups[g];
        std::vector<std::size_t> labeled, unlabeled;
        for (std::size_t i = lo; i < hi; ++i)
            (known[i] == kLabelNormal ? labeled : unlabeled).push_back(i);
        // W = shuffle(union(X, U)): concatenation in flatten order, permuted
        std::vector<std::size_t> pool = labeled;
        pool.insert(pool.end(), unlabeled.begin(), unlabeled.end());
        if (plan.shuffles[g].size() != pool.size())
            throw ArgumentError("mixmatch_step: plan shuffle size mismatch");
        std::vector<std::size_t> shuffled(pool.size());
        for (std::size_t k = 0; k < pool.size(); ++k) shuffled[k] = pool[plan.shuffles[g][k]];

        for (std::size_t k = 0; k < pool.size(); ++k) {
            const std::size_t self = k < labeled.size() ? labeled[k]
                                                        : unlabeled[k - labeled.size()];
            const std::size_t partner = shuffled[k];
            const double lp = plan.lambda_primes[g][k];
            const TokenRef& r = refs[self];
            Tensor& dst_tensor = mixed[r.window * m + r.copy];
            const std::size_t dt = dst_tensor.extent(2);
            std::span<float> dst(dst_tensor.data.data() + r.token * dt, dt);
            mixed_label[self] = mixup_pair(token_of(self), label_in[self], token_of(partner),
                                           label_in[partner], lp, dst);
        }
    }
    // step 7 dropout: zero mixed tokens, labels stay
    for (std::size_t i = 0; i < n; ++i) {
        if (plan.dropout_taus[i] <= cfg.dropout_alpha) {
            const TokenRef& r = refs[i];
            Tensor& t = mixed[r.window * m + r.copy];
            const std::size_t dt = t.extent(2);
            std::fill_n(t.data.begin() + r.token * dt, dt, 0.0f);
        }
    }

    // step 8
    const bool want_grads = !grads.empty();
    std::vector<SwinCache<float>> caches(want_grads ? mixed.size() : 0);
    std::vector<TensorT<float>> preds(mixed.size());
    for (std::size_t c = 0; c < mixed.size(); ++c)
        preds[c] = swin_forward(model, mixed[c], want_grads ? &caches[c] : nullptr);

    // step 9
    std::size_t n_x = 0, n_u = 0;
    for (std::size_t i = 0; i < n; ++i) (known[i] == kLabelNormal ? n_x : n_u) += 1;
    const double ramp = ramp_weight(step, cfg.lambda_u_max, cfg.ramp_steps);

    MixMatchLoss loss;
    std::vector<TensorT<float>> upstream;
    if (want_grads) {
        upstream.resize(mixed.size());
        for (std::size_t c = 0; c < mixed.size(); ++c) {
            upstream[c] = TensorT<float>({preds[c].extent(0), preds[c].extent(1)});
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        const TokenRef& r = refs[i];
        const double yhat = double(preds[r.window * m + r.copy].data[r.token]);
        const double ystar = mixed_label[i];
        const double p = detail::clamp_prob((1.0 - ystar) * (1.0 - yhat) + ystar * yhat);
        const bool labeled = known[i] == kLabelNormal;
        const double alpha = labeled ? cfg.alpha_x : cfg.alpha_u;
        const double gamma = labeled ? cfg.gamma_x : cfg.gamma_u;
        const double w = ystar > 0.5 ? alpha : (1.0 - alpha);
        const double denom = double(labeled ? n_x : n_u);
        const double term = -(w / denom) * std::pow(1.0 - p, gamma) * std::log(p);
        (labeled ? loss.x : loss.u) += term;
        if (want_grads) {
            const double dp = -(w / denom) * (-gamma * std::pow(1.0 - p, gamma - 1.0) *
                                                  std::log(p) +
                                              std::pow(1.0 - p, gamma) / p);
            const double scale = labeled ? 1.0 : ramp;
            const double dyhat = scale * dp * (2.0 * ystar - 1.0);
            upstream[r.window * m + r.copy].data[r.token] += static_cast<float>(dyhat);
        }
    }
    loss.mix = loss.x + ramp * loss.u;
    if (want_grads)
        for (std::size_t c = 0; c < mixed.size(); ++c)
            swin_backward(model, mixed[c], caches[c], upstream[c], grads);
    return loss;
}

inline MixMatchLoss mixmatch_step(const SwinModel<float>& model, const SemiBatch& batch,
                                  const MixMatchConfig& cfg, const AugmentationConfig& aug,
                                  ResidualMode mode, std::size_t step, Rng& rng,
                                  std::span<float> grads = {}) {
    const MixPlan plan = draw_mix_plan(batch, cfg, aug, rng);
    return mixmatch_step_with_plan(model, batch, cfg, mode, plan, step, grads);
}

// ---------------------------------------------------------------------------
// Semi-supervised fine-tuning: alternates the full-supervision path (normal +
// simulated windows, focal loss) with MixMatch steps on box-labeled windows.
// ---------------------------------------------------------------------------

// MixMatch batch for a given fine-tune step, rebuilt deterministically from
// (cfg.seed, step) so losses can be replayed against a saved checkpoint.
inline SemiBatch build_semi_batch(const TrainingSet& data, const TrainContext& ctx,
                                  const TrainConfig& cfg, std::size_t step) {
    if (data.defects.empty())
        throw ConfigError("build_semi_batch: no box-labeled defective images");
    const std::uint64_t step_seed = derive_seed(cfg.seed, step);
    Rng sample_rng(derive_seed(step_seed, detail::kStreamSampling));
    SemiBatch batch;
    for (std::size_t i : detail::sample_image_indices(data.defects.size(), cfg.b3, sample_rng)) {
        const TrainingImage& img = data.defects[i];
        const std::size_t ht = img.knn3.h / ctx.feature.rho;
        const std::size_t wt = img.knn3.w / ctx.feature.rho;
        const std::vector<WindowSpec> all = enumerate_windows(ht, wt, ctx.mu, ctx.window_step);
        for (const WindowSpec& w : detail::sample_windows(all, cfg.p, sample_rng))
            batch.windows.push_back(make_semi_window(img.knn3, img.labels, w, ctx.feature.rho));
    }
    return batch;
}

namespace detail {

// Loss (and optionally gradients) of one fine-tune step: even steps run the
// full-supervision path on normal + simulated windows, odd steps run MixMatch
// on box-labeled windows.
inline std::pair<double, std::size_t> semi_step_loss(const SwinModel<float>& model,
                                                     const TrainingSet& data,
                                                     const TrainContext& ctx,
                                                     const TrainConfig& cfg,
                                                     const MixMatchConfig& mcfg,
                                                     std::size_t step, std::span<float> grads) {
    if (step % 2 == 0) {
        TrainConfig blue = cfg;
        blue.b3 = 0;
        const StepBatch batch = build_step_batch(data, ctx, blue, step);
        const double loss = batch_focal_loss(model, batch, cfg.focal, grads);
        return {loss, batch.windows.size()};
    }
    const SemiBatch batch = build_semi_batch(data, ctx, cfg, step);
    Rng plan_rng(derive_seed(derive_seed(cfg.seed, step), detail::kStreamAugment));
    const MixMatchLoss ml =
        mixmatch_step(model, batch, mcfg, ctx.augment, ctx.mode, step, plan_rng, grads);
    return {ml.mix, batch.windows.size()};
}

}  // namespace detail

inline TrainState finetune_semi(const TrainingSet& data, const TrainContext& ctx,
                                const TrainConfig& cfg, const MixMatchConfig& mcfg,
                                const TrainState& pretrained,
                                std::vector<TrainLogEntry>* log = nullptr) {
    cfg.validate();
    mcfg.validate();
    if (data.defects.empty())
        throw ConfigError("finetune_semi: no box-labeled defective images");
    TrainState state = pretrained;
    std::vector<float> grads(state.model.params.size());

    for (std::size_t step = 0; step < cfg.steps; ++step) {
        std::fill(grads.begin(), grads.end(), 0.0f);
        const auto [loss, window_count] =
            detail::semi_step_loss(state.model, data, ctx, cfg, mcfg, step,
                                   std::span<float>(grads));
        if (!std::isfinite(loss))
            throw NumericalError("finetune_semi: non-finite loss at step " +
                                 std::to_string(step));
        if (log) log->push_back({step, loss, cfg.lr, window_count});
        optimizer_step(state, grads, cfg.lr, cfg.weight_decay);
        ema_update<float>(state.ema, state.model.params, cfg.ema_decay);
    }
    if (log && cfg.steps > 0) {
        const auto [replay, window_count] =
            detail::semi_step_loss(state.model, data, ctx, cfg, mcfg, cfg.steps - 1, {});
        log->push_back({cfg.steps, replay, cfg.lr, window_count});
    }
    return state;
}

}  // namespace semirest
