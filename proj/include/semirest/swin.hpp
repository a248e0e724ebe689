#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "semirest/common.hpp"
#include "semirest/io.hpp"
#include "semirest/tensor.hpp"

namespace semirest {

// ---------------------------------------------------------------------------
// Token tensor and sliding windows
// ---------------------------------------------------------------------------

template <typename T>
struct TokenTensorT {
    TensorT<T> tensor;     // h_t x w_t x d_t
    std::size_t rho = 1;   // patch size; d_t = d_f * rho^2
};

using TokenTensor = TokenTensorT<float>;

// Non-overlapping rho x rho patches flattened channel-last: token element
// (pr*rho + pc)*d_f + ch holds input channel ch of patch cell (pr, pc).
template <typename T>
TokenTensorT<T> tokenize(const TensorT<T>& pcr_map, std::size_t rho) {
    if (pcr_map.rank() != 3) throw DimensionError("tokenize: rank-3 map expected");
    if (rho < 1) throw ArgumentError("tokenize: rho must be >= 1");
    const std::size_t h = pcr_map.extent(0), w = pcr_map.extent(1), d = pcr_map.extent(2);
    if (h % rho != 0 || w % rho != 0)
        throw ArgumentError("tokenize: spatial extents must divide by rho");
    TokenTensorT<T> out;
    out.rho = rho;
    out.tensor = TensorT<T>({h / rho, w / rho, d * rho * rho});
    for (std::size_t rt = 0; rt < h / rho; ++rt)
        for (std::size_t ct = 0; ct < w / rho; ++ct)
            for (std::size_t pr = 0; pr < rho; ++pr)
                for (std::size_t pc = 0; pc < rho; ++pc)
                    for (std::size_t ch = 0; ch < d; ++ch)
                        out.tensor.at3(rt, ct, (pr * rho + pc) * d + ch) =
                            pcr_map.at3(rt * rho + pr, ct * rho + pc, ch);
    return out;
}

template <typename T>
TensorT<T> detokenize(const TokenTensorT<T>& tokens) {
    const std::size_t rho = tokens.rho;
    const std::size_t ht = tokens.tensor.extent(0), wt = tokens.tensor.extent(1);
    const std::size_t dt = tokens.tensor.extent(2);
    if (dt % (rho * rho) != 0) throw DimensionError("detokenize: d_t not divisible by rho^2");
    const std::size_t d = dt / (rho * rho);
    TensorT<T> out({ht * rho, wt * rho, d});
    for (std::size_t rt = 0; rt < ht; ++rt)
        for (std::size_t ct = 0; ct < wt; ++ct)
            for (std::size_t pr = 0; pr < rho; ++pr)
                for (std::size_t pc = 0; pc < rho; ++pc)
                    for (std::size_t ch = 0; ch < d; ++ch)
                        out.at3(rt * rho + pr, ct * rho + pc, ch) =
                            tokens.tensor.at3(rt, ct, (pr * rho + pc) * d + ch);
    return out;
}

struct WindowSpec {
    std::size_t row = 0;
    std::size_t col = 0;
    std::size_t mu = 0;
};

// Offsets {0, s, 2s, ...} clipped to [0, extent - mu]; if extent - mu is not a
// multiple of s the final offset is appended so coverage is total.
inline std::vector<std::size_t> window_offsets(std::size_t extent, std::size_t mu,
                                               std::size_t step) {
    std::vector<std::size_t> offs;
    const std::size_t last = extent - mu;
    for (std::size_t o = 0;; o += step) {
        if (o > last) break;
        offs.push_back(o);
        if (o == last) break;
    }
    if (offs.back() != last) offs.push_back(last);
    return offs;
}

inline std::vector<WindowSpec> enumerate_windows(std::size_t h_t, std::size_t w_t,
                                                 std::size_t mu, std::size_t step) {
    if (mu < 1 || mu > h_t || mu > w_t)
        throw ArgumentError("enumerate_windows: mu must be in [1, grid extent]");
    if (step < 1) throw ArgumentError("enumerate_windows: step must be >= 1");
    const std::vector<std::size_t> rows = window_offsets(h_t, mu, step);
    const std::vector<std::size_t> cols = window_offsets(w_t, mu, step);
    std::vector<WindowSpec> out;
    out.reserve(rows.size() * cols.size());
    for (std::size_t r : rows)
        for (std::size_t c : cols) out.push_back({r, c, mu});
    return out;
}

template <typename T>
TensorT<T> slice_window(const TokenTensorT<T>& tokens, const WindowSpec& w) {
    const std::size_t ht = tokens.tensor.extent(0), wt = tokens.tensor.extent(1);
    const std::size_t dt = tokens.tensor.extent(2);
    if (w.row + w.mu > ht || w.col + w.mu > wt)
        throw ArgumentError("slice_window: window out of bounds");
    TensorT<T> out({w.mu, w.mu, dt});
    for (std::size_t r = 0; r < w.mu; ++r)
        for (std::size_t c = 0; c < w.mu; ++c) {
            auto src = tokens.tensor.vec3(w.row + r, w.col + c);
            auto dst = out.vec3(r, c);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    return out;
}

// ---------------------------------------------------------------------------
// Model definition
// ---------------------------------------------------------------------------

struct SwinConfig {
    std::uint32_t input_dim = 64;   // d_t
    std::uint32_t embed_dim = 64;
    std::uint32_t blocks = 4;
    std::uint32_t attn_window = 8;
    std::uint32_t heads = 32;
    std::uint32_t mlp_ratio = 4;
    std::uint32_t patch_size = 1;  // rho

    void validate() const {
        if (input_dim < 1 || embed_dim < 1 || blocks < 1 || attn_window < 1 || heads < 1 ||
            mlp_ratio < 1 || patch_size < 1)
            throw ArgumentError("SwinConfig: all hyperparameters must be >= 1");
        if (embed_dim % heads != 0)
            throw ArgumentError("SwinConfig: embed_dim must divide by heads");
    }

    bool operator==(const SwinConfig&) const = default;
};

struct ParamSection {
    enum class Kind { weight, bias, ln_gamma, ln_beta, rel_bias };
    std::string name;
    std::size_t offset = 0;
    std::size_t count = 0;
    Kind kind = Kind::weight;
};

inline std::vector<ParamSection> param_layout(const SwinConfig& cfg) {
    cfg.validate();
    const std::size_t e = cfg.embed_dim, f = cfg.embed_dim * cfg.mlp_ratio;
    const std::size_t rel = (2 * cfg.attn_window - 1) * (2 * cfg.attn_window - 1) * cfg.heads;
    std::vector<ParamSection> out;
    std::size_t offset = 0;
    auto add = [&](std::string name, std::size_t count, ParamSection::Kind kind) {
        out.push_back({std::move(name), offset, count, kind});
        offset += count;
    };
    using K = ParamSection::Kind;
    add("embed.weight", std::size_t(cfg.input_dim) * e, K::weight);
    add("embed.bias", e, K::bias);
    for (std::uint32_t b = 0; b < cfg.blocks; ++b) {
        const std::string p = "block" + std::to_string(b) + ".";
        add(p + "norm1.gamma", e, K::ln_gamma);
        add(p + "norm1.beta", e, K::ln_beta);
        add(p + "attn.qkv_weight", e * 3 * e, K::weight);
        add(p + "attn.qkv_bias", 3 * e, K::bias);
        add(p + "attn.proj_weight", e * e, K::weight);
        add(p + "attn.proj_bias", e, K::bias);
        add(p + "attn.rel_bias", rel, K::rel_bias);
        add(p + "norm2.gamma", e, K::ln_gamma);
        add(p + "norm2.beta", e, K::ln_beta);
        add(p + "mlp.fc1_weight", e * f, K::weight);
        add(p + "mlp.fc1_bias", f, K::bias);
        add(p + "mlp.fc2_weight", f * e, K::weight);
        add(p + "mlp.fc2_bias", e, K::bias);
    }
    add("final_norm.gamma", e, K::ln_gamma);
    add("final_norm.beta", e, K::ln_beta);
    add("head.weight", e * 2, K::weight);
    add("head.bias", 2, K::bias);
    return out;
}

inline std::size_t param_count(const SwinConfig& cfg) {
    const std::vector<ParamSection> layout = param_layout(cfg);
    return layout.back().offset + layout.back().count;
}

// Per-token two-class classifier: linear patch embedding, `blocks` windowed
// attention blocks (pre-norm, relative position bias, cyclic shift of half a
// window on even-indexed blocks when the input is larger than the attention
// window), final norm and a 2-class softmax head.
template <typename T>
struct SwinModel {
    SwinConfig config;
    std::vector<T> params;

    std::span<T> section(const ParamSection& s) {
        return std::span<T>(params.data() + s.offset, s.count);
    }
    std::span<const T> section(const ParamSection& s) const {
        return std::span<const T>(params.data() + s.offset, s.count);
    }
};

template <typename T>
SwinModel<T> init_swin(const SwinConfig& cfg, std::uint64_t seed) {
    SwinModel<T> model;
    model.config = cfg;
    const std::vector<ParamSection> layout = param_layout(cfg);
    model.params.assign(param_count(cfg), T(0));
    Rng rng(seed);
    for (const ParamSection& s : layout) {
        auto view = model.section(s);
        switch (s.kind) {
            case ParamSection::Kind::weight:
                for (T& v : view) v = static_cast<T>(normal01(rng) * 0.02);
                break;
            case ParamSection::Kind::ln_gamma:
                for (T& v : view) v = T(1);
                break;
            default:
                break;  // biases and relative bias start at zero
        }
    }
    return model;
}

// ema <- decay*ema + (1-decay)*live
template <typename T>
void ema_update(std::span<T> ema, std::span<const T> live, double decay) {
    if (ema.size() != live.size()) throw ArgumentError("ema_update: length mismatch");
    if (decay < 0.0 || decay > 1.0) throw ArgumentError("ema_update: decay must be in [0, 1]");
    for (std::size_t i = 0; i < ema.size(); ++i)
        ema[i] = static_cast<T>(decay * double(ema[i]) + (1.0 - decay) * double(live[i]));
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace detail {

// y[m][n] = x[m][k] * w[k][n] + b[n]
template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, std::size_t m, std::size_t k,
                    std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* yi = y + i * n;
        for (std::size_t j = 0; j < n; ++j) yi[j] = b ? b[j] : T(0);
        const T* xi = x + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T xv = xi[p];
            const T* wp = w + p * n;
            for (std::size_t j = 0; j < n; ++j) yi[j] += xv * wp[j];
        }
    }
}

// accumulates dx, dw, db
template <typename T>
void linear_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, std::size_t m,
                     std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* dyi = dy + i * n;
        const T* xi = x + i * k;
        if (db)
            for (std::size_t j = 0; j < n; ++j) db[j] += dyi[j];
        if (dw)
            for (std::size_t p = 0; p < k; ++p) {
                const T xv = xi[p];
                T* dwp = dw + p * n;
                for (std::size_t j = 0; j < n; ++j) dwp[j] += xv * dyi[j];
            }
        if (dx) {
            T* dxi = dx + i * k;
            for (std::size_t p = 0; p < k; ++p) {
                const T* wp = w + p * n;
                T acc = T(0);
                for (std::size_t j = 0; j < n; ++j) acc += dyi[j] * wp[j];
                dxi[p] += acc;
            }
        }
    }
}

inline constexpr double kLayerNormEps = 1e-5;

template <typename T>
void layernorm_forward(const T* x, const T* gamma, const T* beta, T* y, T* mean, T* rstd,
                       std::size_t tokens, std::size_t dim) {
    for (std::size_t t = 0; t < tokens; ++t) {
        const T* xt = x + t * dim;
        double mu = 0.0;
        for (std::size_t j = 0; j < dim; ++j) mu += double(xt[j]);
        mu /= double(dim);
        double var = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double d = double(xt[j]) - mu;
            var += d * d;
        }
        var /= double(dim);
        const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        mean[t] = static_cast<T>(mu);
        rstd[t] = static_cast<T>(rs);
        T* yt = y + t * dim;
        for (std::size_t j = 0; j < dim; ++j)
            yt[j] = static_cast<T>((double(xt[j]) - mu) * rs) * gamma[j] + beta[j];
    }
}

template <typename T>
void layernorm_backward(const T* x, const T* gamma, const T* mean, const T* rstd, const T* dy,
                        T* dx, T* dgamma, T* dbeta, std::size_t tokens, std::size_t dim) {
    for (std::size_t t = 0; t < tokens; ++t) {
        const T* xt = x + t * dim;
        const T* dyt = dy + t * dim;
        const double mu = double(mean[t]);
        const double rs = double(rstd[t]);
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t j = 0; j < dim; ++j) {
            const double xhat = (double(xt[j]) - mu) * rs;
            const double dxhat = double(dyt[j]) * double(gamma[j]);
            m1 += dxhat;
            m2 += dxhat * xhat;
            if (dgamma) dgamma[j] += static_cast<T>(double(dyt[j]) * xhat);
            if (dbeta) dbeta[j] += dyt[j];
        }
        m1 /= double(dim);
        m2 /= double(dim);
        T* dxt = dx + t * dim;
        for (std::size_t j = 0; j < dim; ++j) {
            const double xhat = (double(xt[j]) - mu) * rs;
            const double dxhat = double(dyt[j]) * double(gamma[j]);
            dxt[j] += static_cast<T>(rs * (dxhat - m1 - xhat * m2));
        }
    }
}

template <typename T>
inline T gelu(T x) {
    return static_cast<T>(0.5 * double(x) * (1.0 + std::erf(double(x) * M_SQRT1_2)));
}

template <typename T>
inline T gelu_grad(T x) {
    const double xd = double(x);
    const double cdf = 0.5 * (1.0 + std::erf(xd * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * xd * xd) / std::sqrt(2.0 * M_PI);
    return static_cast<T>(cdf + xd * pdf);
}

// Cyclic shift gather: out token (r, c) = in token ((r+shift)%mu, (c+shift)%mu).
template <typename T>
void roll_gather(const T* in, T* out, std::size_t mu, std::size_t shift, std::size_t dim) {
    for (std::size_t r = 0; r < mu; ++r) {
        const std::size_t sr = (r + shift) % mu;
        for (std::size_t c = 0; c < mu; ++c) {
            const std::size_t sc = (c + shift) % mu;
            const T* src = in + (sr * mu + sc) * dim;
            T* dst = out + (r * mu + c) * dim;
            std::copy(src, src + dim, dst);
        }
    }
}

// Scatter-add transpose of roll_gather.
template <typename T>
void roll_scatter_add(const T* in, T* out, std::size_t mu, std::size_t shift, std::size_t dim) {
    for (std::size_t r = 0; r < mu; ++r) {
        const std::size_t sr = (r + shift) % mu;
        for (std::size_t c = 0; c < mu; ++c) {
            const std::size_t sc = (c + shift) % mu;
            const T* src = in + (r * mu + c) * dim;
            T* dst = out + (sr * mu + sc) * dim;
            for (std::size_t j = 0; j < dim; ++j) dst[j] += src[j];
        }
    }
}

// Group id in rolled coordinates: bit per axis marks tokens whose source
// coordinate wrapped around. Tokens may attend iff their groups match.
inline int shift_group(std::size_t r, std::size_t c, std::size_t mu, std::size_t shift) {
    const int gr = (r + shift) >= mu ? 1 : 0;
    const int gc = (c + shift) >= mu ? 1 : 0;
    return gr * 2 + gc;
}

inline std::size_t rel_index(std::size_t ri, std::size_t ci, std::size_t rj, std::size_t cj,
                             std::size_t a) {
    const std::size_t dr = ri - rj + a - 1;
    const std::size_t dc = ci - cj + a - 1;
    return dr * (2 * a - 1) + dc;
}

}  // namespace detail

template <typename T>
struct SwinBlockCache {
    std::vector<T> x_in;      // L*E
    std::vector<T> ln1_mean, ln1_rstd;
    std::vector<T> h_rolled;  // L*E, input of the qkv projection
    std::vector<T> qkv;       // L*3E
    std::vector<T> probs;     // nwin*H*WL*WL attention rows
    std::vector<T> ctx;       // L*E, input of the output projection
    std::vector<T> x_mid;     // L*E, after the attention residual
    std::vector<T> ln2_mean, ln2_rstd;
    std::vector<T> h2;        // L*E, input of fc1
    std::vector<T> f1;        // L*F, pre-activation
    std::vector<T> g;         // L*F, post-activation
};

template <typename T>
struct SwinCache {
    bool ready = false;
    std::size_t mu = 0;
    std::vector<SwinBlockCache<T>> blocks;
    std::vector<T> x_out;  // L*E, input of the final norm
    std::vector<T> fln_mean, fln_rstd;
    std::vector<T> xf;     // L*E, input of the head
    std::vector<T> probs2; // L*2 class confidences
};

namespace detail {

template <typename T, typename Model>
auto block_params(Model& model, const std::vector<ParamSection>& layout, std::size_t b) {
    // sections per block start at index 2 + b*13 (embed.weight, embed.bias first)
    const std::size_t base = 2 + b * 13;
    auto ptr = [&](std::size_t i) { return model.params.data() + layout[base + i].offset; };
    return std::array{ptr(0), ptr(1), ptr(2),  ptr(3),  ptr(4),  ptr(5), ptr(6),
                      ptr(7), ptr(8), ptr(9), ptr(10), ptr(11), ptr(12)};
}

// Attention over one block's rolled tensor. q/k/v live in qkv[L][3E];
// probs rows are written per (window, head, i) when caching.
template <typename T>
void window_attention_forward(const T* qkv, const T* rel, T* ctx, T* probs_cache, std::size_t mu,
                              std::size_t a, std::size_t heads, std::size_t e,
                              std::size_t shift) {
    const std::size_t dh = e / heads;
    const std::size_t wl = a * a;
    const std::size_t side = mu / a;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    std::vector<std::size_t> idx(wl);
    std::vector<T> row(wl);

    for (std::size_t wr = 0; wr < side; ++wr) {
        for (std::size_t wc = 0; wc < side; ++wc) {
            for (std::size_t ir = 0; ir < a; ++ir)
                for (std::size_t ic = 0; ic < a; ++ic)
                    idx[ir * a + ic] = (wr * a + ir) * mu + (wc * a + ic);
            const std::size_t win = wr * side + wc;
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t ch = h * dh;
                for (std::size_t i = 0; i < wl; ++i) {
                    const T* qi = qkv + idx[i] * 3 * e + ch;
                    const std::size_t gri = wr * a + i / a, gci = wc * a + i % a;
                    const int gi = shift ? shift_group(gri, gci, mu, shift) : 0;
                    double maxv = -std::numeric_limits<double>::infinity();
                    for (std::size_t j = 0; j < wl; ++j) {
                        const std::size_t grj = wr * a + j / a, gcj = wc * a + j % a;
                        const int gj = shift ? shift_group(grj, gcj, mu, shift) : 0;
                        if (gi != gj) {
                            row[j] = T(-1e30);
                            continue;
                        }
                        const T* kj = qkv + idx[j] * 3 * e + e + ch;
                        double s = 0.0;
                        for (std::size_t d = 0; d < dh; ++d)
                            s += double(qi[d]) * double(kj[d]);
                        s *= inv_sqrt_dh;
                        s += double(rel[rel_index(i / a, i % a, j / a, j % a, a) * heads + h]);
                        row[j] = static_cast<T>(s);
                        if (s > maxv) maxv = s;
                    }
                    double denom = 0.0;
                    for (std::size_t j = 0; j < wl; ++j) {
                        const double ev =
                            double(row[j]) <= -1e29 ? 0.0 : std::exp(double(row[j]) - maxv);
                        row[j] = static_cast<T>(ev);
                        denom += ev;
                    }
                    T* ci = ctx + idx[i] * e + ch;
                    for (std::size_t d = 0; d < dh; ++d) ci[d] = T(0);
                    for (std::size_t j = 0; j < wl; ++j) {
                        const T p = static_cast<T>(double(row[j]) / denom);
                        row[j] = p;
                        if (p == T(0)) continue;
                        const T* vj = qkv + idx[j] * 3 * e + 2 * e + ch;
                        for (std::size_t d = 0; d < dh; ++d) ci[d] += p * vj[d];
                    }
                    if (probs_cache) {
                        T* dst = probs_cache + ((win * heads + h) * wl + i) * wl;
                        std::copy(row.begin(), row.end(), dst);
                    }
                }
            }
        }
    }
}

template <typename T>
void window_attention_backward(const T* qkv, const T* rel, const T* probs_cache, const T* dctx,
                               T* dqkv, T* drel, std::size_t mu, std::size_t a,
                               std::size_t heads, std::size_t e, std::size_t shift) {
    const std::size_t dh = e / heads;
    const std::size_t wl = a * a;
    const std::size_t side = mu / a;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    std::vector<std::size_t> idx(wl);
    std::vector<double> dprob(wl), dscore(wl);

    for (std::size_t wr = 0; wr < side; ++wr) {
        for (std::size_t wc = 0; wc < side; ++wc) {
            for (std::size_t ir = 0; ir < a; ++ir)
                for (std::size_t ic = 0; ic < a; ++ic)
                    idx[ir * a + ic] = (wr * a + ir) * mu + (wc * a + ic);
            const std::size_t win = wr * side + wc;
            for (std::size_t h = 0; h < heads; ++h) {
                const std::size_t ch = h * dh;
                for (std::size_t i = 0; i < wl; ++i) {
                    const T* probs = probs_cache + ((win * heads + h) * wl + i) * wl;
                    const T* dci = dctx + idx[i] * e + ch;
                    // dv and dprob
                    double dot = 0.0;
                    for (std::size_t j = 0; j < wl; ++j) {
                        const T* vj = qkv + idx[j] * 3 * e + 2 * e + ch;
                        double dp = 0.0;
                        for (std::size_t d = 0; d < dh; ++d)
                            dp += double(dci[d]) * double(vj[d]);
                        dprob[j] = dp;
                        dot += dp * double(probs[j]);
                        if (probs[j] != T(0)) {
                            T* dvj = dqkv + idx[j] * 3 * e + 2 * e + ch;
                            for (std::size_t d = 0; d < dh; ++d)
                                dvj[d] += probs[j] * dci[d];
                        }
                    }
                    const T* qi = qkv + idx[i] * 3 * e + ch;
                    T* dqi = dqkv + idx[i] * 3 * e + ch;
                    for (std::size_t j = 0; j < wl; ++j) {
                        const double ds = double(probs[j]) * (dprob[j] - dot);
                        dscore[j] = ds;
                        if (ds == 0.0) continue;
                        drel[rel_index(i / a, i % a, j / a, j % a, a) * heads + h] +=
                            static_cast<T>(ds);
                        const T* kj = qkv + idx[j] * 3 * e + e + ch;
                        T* dkj = dqkv + idx[j] * 3 * e + e + ch;
                        for (std::size_t d = 0; d < dh; ++d) {
                            dqi[d] += static_cast<T>(ds * inv_sqrt_dh * double(kj[d]));
                            dkj[d] += static_cast<T>(ds * inv_sqrt_dh * double(qi[d]));
                        }
                    }
                }
            }
        }
    }
}

}  // namespace detail

// Per-token anomaly confidence on a mu x mu window; deterministic in
// inference mode. Pass a cache to retain activations for swin_backward.
template <typename T>
TensorT<T> swin_forward(const SwinModel<T>& model, const TensorT<T>& sub,
                        SwinCache<T>* cache = nullptr) {
    const SwinConfig& cfg = model.config;
    if (sub.rank() != 3 || sub.extent(0) != sub.extent(1) || sub.extent(2) != cfg.input_dim)
        throw ArgumentError("swin_forward: mu x mu x d_t sub-tensor expected");
    const std::size_t mu = sub.extent(0);
    if (mu % cfg.attn_window != 0)
        throw ArgumentError("swin_forward: mu must divide by the attention window size");
    if (model.params.size() != param_count(cfg))
        throw ArgumentError("swin_forward: parameter vector does not match the layout");

    const std::size_t l = mu * mu, e = cfg.embed_dim, f = e * cfg.mlp_ratio;
    const std::size_t a = cfg.attn_window, heads = cfg.heads;
    const std::size_t wl = a * a, nwin = (mu / a) * (mu / a);
    const std::vector<ParamSection> layout = param_layout(cfg);

    if (cache) {
        cache->ready = false;
        cache->mu = mu;
        cache->blocks.assign(cfg.blocks, {});
    }

    std::vector<T> x(l * e);
    detail::linear_forward(sub.data.data(), model.params.data() + layout[0].offset,
                           model.params.data() + layout[1].offset, x.data(), l, cfg.input_dim, e);

    std::vector<T> h(l * e), rolled(l * e), qkv(l * 3 * e), ctx(l * e), attn_out(l * e);
    std::vector<T> h2(l * e), f1(l * f), g(l * f), f2(l * e);
    std::vector<T> mean(l), rstd(l);

    for (std::uint32_t b = 0; b < cfg.blocks; ++b) {
        auto ps = detail::block_params<T>(model, layout, b);
        const std::size_t shift = (mu > a && b % 2 == 0) ? a / 2 : 0;
        SwinBlockCache<T>* bc = cache ? &cache->blocks[b] : nullptr;
        if (bc) bc->x_in = x;

        detail::layernorm_forward(x.data(), ps[0], ps[1], h.data(), mean.data(), rstd.data(), l,
                                  e);
        if (bc) {
            bc->ln1_mean.assign(mean.begin(), mean.end());
            bc->ln1_rstd.assign(rstd.begin(), rstd.end());
        }
        const T* attn_in = h.data();
        if (shift > 0) {
            detail::roll_gather(h.data(), rolled.data(), mu, shift, e);
            attn_in = rolled.data();
        }
        if (bc) bc->h_rolled.assign(attn_in, attn_in + l * e);
        detail::linear_forward(attn_in, ps[2], ps[3], qkv.data(), l, e, 3 * e);
        if (bc) {
            bc->qkv = qkv;
            bc->probs.assign(nwin * heads * wl * wl, T(0));
        }
        detail::window_attention_forward(qkv.data(), ps[6], ctx.data(),
                                         bc ? bc->probs.data() : nullptr, mu, a, heads, e, shift);
        if (bc) bc->ctx = ctx;
        detail::linear_forward(ctx.data(), ps[4], ps[5], h.data(), l, e, e);
        if (shift > 0) {
            std::fill(attn_out.begin(), attn_out.end(), T(0));
            detail::roll_scatter_add(h.data(), attn_out.data(), mu, shift, e);
        } else {
            attn_out = h;
        }
        for (std::size_t i = 0; i < l * e; ++i) x[i] += attn_out[i];
        if (bc) bc->x_mid = x;

        detail::layernorm_forward(x.data(), ps[7], ps[8], h2.data(), mean.data(), rstd.data(), l,
                                  e);
        if (bc) {
            bc->ln2_mean.assign(mean.begin(), mean.end());
            bc->ln2_rstd.assign(rstd.begin(), rstd.end());
            bc->h2 = h2;
        }
        detail::linear_forward(h2.data(), ps[9], ps[10], f1.data(), l, e, f);
        if (bc) bc->f1 = f1;
        for (std::size_t i = 0; i < l * f; ++i) g[i] = detail::gelu(f1[i]);
        if (bc) bc->g = g;
        detail::linear_forward(g.data(), ps[11], ps[12], f2.data(), l, f, e);
        for (std::size_t i = 0; i < l * e; ++i) x[i] += f2[i];
    }

    if (cache) cache->x_out = x;
    const std::size_t nfix = layout.size();
    const T* fln_g = model.params.data() + layout[nfix - 4].offset;
    const T* fln_b = model.params.data() + layout[nfix - 3].offset;
    const T* head_w = model.params.data() + layout[nfix - 2].offset;
    const T* head_b = model.params.data() + layout[nfix - 1].offset;

    std::vector<T> xf(l * e);
    detail::layernorm_forward(x.data(), fln_g, fln_b, xf.data(), mean.data(), rstd.data(), l, e);
    if (cache) {
        cache->fln_mean.assign(mean.begin(), mean.end());
        cache->fln_rstd.assign(rstd.begin(), rstd.end());
        cache->xf = xf;
    }

    TensorT<T> conf({mu, mu});
    std::vector<T> logits(l * 2);
    detail::linear_forward(xf.data(), head_w, head_b, logits.data(), l, e, 2);
    if (cache) cache->probs2.assign(l * 2, T(0));
    for (std::size_t t = 0; t < l; ++t) {
        const double l0 = double(logits[2 * t]), l1 = double(logits[2 * t + 1]);
        const double m = std::max(l0, l1);
        const double e0 = std::exp(l0 - m), e1 = std::exp(l1 - m);
        const double p1 = e1 / (e0 + e1);
        conf.data[t] = static_cast<T>(p1);
        if (cache) {
            cache->probs2[2 * t] = static_cast<T>(e0 / (e0 + e1));
            cache->probs2[2 * t + 1] = static_cast<T>(p1);
        }
    }
    if (cache) cache->ready = true;
    return conf;
}

// Exact reverse-mode gradients of sum(upstream .* confidence) with respect to
// every parameter; accumulates into grads (layout order, length param_count).
template <typename T>
void swin_backward(const SwinModel<T>& model, const TensorT<T>& sub, const SwinCache<T>& cache,
                   const TensorT<T>& upstream, std::span<T> grads) {
    const SwinConfig& cfg = model.config;
    if (!cache.ready) throw StateError("swin_backward: no forward pass cached for this input");
    const std::size_t mu = cache.mu;
    if (upstream.rank() != 2 || upstream.extent(0) != mu || upstream.extent(1) != mu)
        throw ArgumentError("swin_backward: upstream map must be mu x mu");
    if (grads.size() != param_count(cfg))
        throw ArgumentError("swin_backward: gradient vector does not match the layout");

    const std::size_t l = mu * mu, e = cfg.embed_dim, f = e * cfg.mlp_ratio;
    const std::size_t a = cfg.attn_window, heads = cfg.heads;
    const std::vector<ParamSection> layout = param_layout(cfg);
    const std::size_t nfix = layout.size();

    // head softmax: d l1 = up * p1 * (1 - p1), d l0 = -d l1
    std::vector<T> dlogits(l * 2);
    for (std::size_t t = 0; t < l; ++t) {
        const double p1 = double(cache.probs2[2 * t + 1]);
        const double d = double(upstream.data[t]) * p1 * (1.0 - p1);
        dlogits[2 * t] = static_cast<T>(-d);
        dlogits[2 * t + 1] = static_cast<T>(d);
    }

    const T* head_w = model.params.data() + layout[nfix - 2].offset;
    std::vector<T> dxf(l * e, T(0));
    detail::linear_backward(cache.xf.data(), head_w, dlogits.data(), dxf.data(),
                            grads.data() + layout[nfix - 2].offset,
                            grads.data() + layout[nfix - 1].offset, l, e, 2);

    const T* fln_g = model.params.data() + layout[nfix - 4].offset;
    std::vector<T> dx(l * e, T(0));
    detail::layernorm_backward(cache.x_out.data(), fln_g, cache.fln_mean.data(),
                               cache.fln_rstd.data(), dxf.data(), dx.data(),
                               grads.data() + layout[nfix - 4].offset,
                               grads.data() + layout[nfix - 3].offset, l, e);

    std::vector<T> dh2(l * e), df1(l * f), dg(l * f), dctx(l * e), dqkv(l * 3 * e);
    std::vector<T> dh(l * e), drolled(l * e);

    for (std::uint32_t bi = cfg.blocks; bi-- > 0;) {
        const SwinBlockCache<T>& bc = cache.blocks[bi];
        auto ps = detail::block_params<T>(model, layout, bi);
        const std::size_t base = 2 + bi * 13;
        auto gptr = [&](std::size_t i) { return grads.data() + layout[base + i].offset; };
        const std::size_t shift = (mu > a && bi % 2 == 0) ? a / 2 : 0;

        // mlp branch: x = x_mid + fc2(gelu(fc1(ln2(x_mid))))
        std::fill(dg.begin(), dg.end(), T(0));
        detail::linear_backward(bc.g.data(), ps[11], dx.data(), dg.data(), gptr(11), gptr(12), l,
                                f, e);
        for (std::size_t i = 0; i < l * f; ++i)
            df1[i] = dg[i] * detail::gelu_grad(bc.f1[i]);
        std::fill(dh2.begin(), dh2.end(), T(0));
        detail::linear_backward(bc.h2.data(), ps[9], df1.data(), dh2.data(), gptr(9), gptr(10), l,
                                e, f);
        detail::layernorm_backward(bc.x_mid.data(), ps[7], bc.ln2_mean.data(),
                                   bc.ln2_rstd.data(), dh2.data(), dx.data(), gptr(7), gptr(8), l,
                                   e);

        // attention branch: x_mid = x_in + unroll(proj(attn(qkv(roll(ln1(x_in))))))
        const T* dout = dx.data();
        if (shift > 0) {
            detail::roll_gather(dx.data(), drolled.data(), mu, shift, e);
            dout = drolled.data();
        }
        std::fill(dctx.begin(), dctx.end(), T(0));
        detail::linear_backward(bc.ctx.data(), ps[4], dout, dctx.data(), gptr(4), gptr(5), l, e,
                                e);
        std::fill(dqkv.begin(), dqkv.end(), T(0));
        detail::window_attention_backward(bc.qkv.data(), ps[6], bc.probs.data(), dctx.data(),
                                          dqkv.data(), gptr(6), mu, a, heads, e, shift);
        std::fill(dh.begin(), dh.end(), T(0));
        detail::linear_backward(bc.h_rolled.data(), ps[2], dqkv.data(), dh.data(), gptr(2),
                                gptr(3), l, e, 3 * e);
        if (shift > 0) {
            std::fill(drolled.begin(), drolled.end(), T(0));
            detail::roll_scatter_add(dh.data(), drolled.data(), mu, shift, e);
            std::swap(dh, drolled);
        }
        detail::layernorm_backward(bc.x_in.data(), ps[0], bc.ln1_mean.data(), bc.ln1_rstd.data(),
                                   dh.data(), dx.data(), gptr(0), gptr(1), l, e);
    }

    detail::linear_backward(sub.data.data(), model.params.data() + layout[0].offset, dx.data(),
                            static_cast<T*>(nullptr), grads.data() + layout[0].offset,
                            grads.data() + layout[1].offset, l, cfg.input_dim, e);
}

// ---------------------------------------------------------------------------
// Bagging
// ---------------------------------------------------------------------------

// Final prediction map: mean over all windows covering each location of the
// window-local confidence at the translated coordinates.
template <typename T>
TensorT<T> bag_predict(const SwinModel<T>& model, const TokenTensorT<T>& tokens, std::size_t mu,
                       std::size_t step) {
    const std::size_t ht = tokens.tensor.extent(0), wt = tokens.tensor.extent(1);
    const std::vector<WindowSpec> windows = enumerate_windows(ht, wt, mu, step);
    std::vector<double> sum(ht * wt, 0.0);
    std::vector<std::uint32_t> count(ht * wt, 0);
    for (const WindowSpec& w : windows) {
        const TensorT<T> sub = slice_window(tokens, w);
        const TensorT<T> theta = swin_forward(model, sub);
        for (std::size_t r = 0; r < mu; ++r)
            for (std::size_t c = 0; c < mu; ++c) {
                sum[(w.row + r) * wt + (w.col + c)] += double(theta.at2(r, c));
                count[(w.row + r) * wt + (w.col + c)] += 1;
            }
    }
    TensorT<T> theta({ht, wt});
    for (std::size_t i = 0; i < ht * wt; ++i)
        theta.data[i] = static_cast<T>(sum[i] / double(count[i]));
    return theta;
}

// ---------------------------------------------------------------------------
// "SRMD" checkpoint: live and EMA parameter sets with the hyperparameters
// ---------------------------------------------------------------------------

struct Checkpoint {
    SwinModel<float> model;
    std::vector<float> ema;
};

inline void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const SwinConfig& cfg = ckpt.model.config;
    const std::vector<ParamSection> layout = param_layout(cfg);
    if (ckpt.model.params.size() != param_count(cfg) || ckpt.ema.size() != param_count(cfg))
        throw ArgumentError("write_checkpoint: parameter vectors do not match the layout");
    std::string out;
    out.append("SRMD", 4);
    io::put_u32(out, 1);
    for (std::uint32_t v : {cfg.input_dim, cfg.embed_dim, cfg.blocks, cfg.attn_window, cfg.heads,
                            cfg.mlp_ratio, cfg.patch_size})
        io::put_u32(out, v);
    io::put_u32(out, static_cast<std::uint32_t>(2 * layout.size()));
    auto put_section = [&](const std::string& name, const float* data, std::size_t count) {
        io::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.append(name);
        io::put_u32(out, static_cast<std::uint32_t>(count));
        for (std::size_t i = 0; i < count; ++i) io::put_f32(out, data[i]);
    };
    for (const ParamSection& s : layout)
        put_section("live." + s.name, ckpt.model.params.data() + s.offset, s.count);
    for (const ParamSection& s : layout)
        put_section("ema." + s.name, ckpt.ema.data() + s.offset, s.count);
    io::spill(path, out);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    io::Reader r(io::slurp(path), path.string());
    r.magic("SRMD");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw HeaderError(path.string() + ": unsupported SRMD version " + std::to_string(version));
    SwinConfig cfg;
    cfg.input_dim = r.u32();
    cfg.embed_dim = r.u32();
    cfg.blocks = r.u32();
    cfg.attn_window = r.u32();
    cfg.heads = r.u32();
    cfg.mlp_ratio = r.u32();
    cfg.patch_size = r.u32();
    cfg.validate();

    Checkpoint ckpt;
    ckpt.model.config = cfg;
    ckpt.model.params.assign(param_count(cfg), 0.0f);
    ckpt.ema.assign(param_count(cfg), 0.0f);

    const std::vector<ParamSection> layout = param_layout(cfg);
    std::map<std::string, std::pair<std::size_t, std::size_t>> index;
    for (const ParamSection& s : layout) index[s.name] = {s.offset, s.count};

    const std::uint32_t sections = r.u32();
    std::size_t filled = 0;
    for (std::uint32_t i = 0; i < sections; ++i) {
        const std::uint32_t name_len = r.u32();
        std::string name(name_len, '\0');
        r.u8_payload(std::span<std::uint8_t>(reinterpret_cast<std::uint8_t*>(name.data()),
                                             name_len));
        const std::uint32_t count = r.u32();
        const bool live = name.rfind("live.", 0) == 0;
        const bool ema = name.rfind("ema.", 0) == 0;
        if (!live && !ema)
            throw HeaderError(path.string() + ": unknown section prefix in '" + name + "'");
        const std::string key = name.substr(live ? 5 : 4);
        auto it = index.find(key);
        if (it == index.end())
            throw HeaderError(path.string() + ": unknown parameter section '" + name + "'");
        if (it->second.second != count)
            throw HeaderError(path.string() + ": wrong element count for '" + name + "'");
        float* dst = (live ? ckpt.model.params.data() : ckpt.ema.data()) + it->second.first;
        r.f32_payload(std::span<float>(dst, count));
        ++filled;
    }
    if (filled != 2 * layout.size())
        throw HeaderError(path.string() + ": checkpoint is missing parameter sections");
    return ckpt;
}

}  // namespace semirest
