#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "semirest/common.hpp"
#include "semirest/io.hpp"
#include "semirest/tensor.hpp"

namespace semirest {

// Per-image deep features on the h_f x w_f grid, d_f channels.
struct FeatureMap {
    Tensor tensor;  // h_f x w_f x d_f
    std::string source_image_id;
    std::uint32_t image_h = 0;
    std::uint32_t image_w = 0;

    void validate() const {
        if (tensor.rank() != 3) throw DimensionError("FeatureMap: rank-3 tensor expected");
        const std::size_t d = tensor.extent(2);
        if (d < 4 || d % 4 != 0)
            throw DimensionError("FeatureMap: channel count must be >= 4 and divisible by 4");
    }
};

struct PositionCode {
    std::vector<double> vector;  // length d_f, every element in [-1, 1]
    std::size_t row = 0;
    std::size_t col = 0;
};

// Feature map with the weighted sinusoidal position code added.
struct PcfMap {
    Tensor tensor;  // h_f x w_f x d_f
    float lambda_pe = 0.0f;
    std::uint32_t image_h = 0;
    std::uint32_t image_w = 0;
    std::string source_image_id;
};

// Sinusoidal code: channel quarters hold sin/cos of the column coordinate and
// sin/cos of the row coordinate at geometric frequencies 10000^(-8j/d_f).
inline PositionCode position_code(std::size_t row, std::size_t col, std::size_t d_f,
                                  std::size_t rho) {
    if (d_f < 4 || d_f % 4 != 0)
        throw ArgumentError("position_code: d_f must be >= 4 and divisible by 4");
    if (rho < 1) throw ArgumentError("position_code: rho must be >= 1");
    PositionCode pc;
    pc.row = row;
    pc.col = col;
    pc.vector.resize(d_f);
    const std::size_t quarter = d_f / 4;
    const double cpos = double(col) / double(rho);
    const double rpos = double(row) / double(rho);
    for (std::size_t j = 0; j < quarter; ++j) {
        const double freq = std::pow(10000.0, -8.0 * double(j) / double(d_f));
        pc.vector[j] = std::sin(cpos * freq);
        pc.vector[quarter + j] = std::cos(cpos * freq);
        pc.vector[2 * quarter + j] = std::sin(rpos * freq);
        pc.vector[3 * quarter + j] = std::cos(rpos * freq);
    }
    return pc;
}

// f_hat = f + lambda_pe * eta at every grid position.
inline PcfMap make_pcf(const FeatureMap& fm, float lambda_pe, std::size_t rho = 1) {
    if (lambda_pe < 0.0f) throw ArgumentError("make_pcf: lambda_pe must be >= 0");
    fm.validate();
    const std::size_t h = fm.tensor.extent(0), w = fm.tensor.extent(1), d = fm.tensor.extent(2);
    PcfMap pcf;
    pcf.tensor = fm.tensor;
    pcf.lambda_pe = lambda_pe;
    pcf.image_h = fm.image_h;
    pcf.image_w = fm.image_w;
    pcf.source_image_id = fm.source_image_id;
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            const PositionCode pc = position_code(r, c, d, rho);
            auto v = pcf.tensor.vec3(r, c);
            for (std::size_t k = 0; k < d; ++k)
                v[k] = static_cast<float>(double(v[k]) + double(lambda_pe) * pc.vector[k]);
        }
    }
    return pcf;
}

// 3x3 average pooling of the hypercolumns; border means run over the valid
// neighbors only (true neighbor count as denominator).
inline FeatureMap smooth_hypercolumns(const FeatureMap& fm) {
    const std::size_t h = fm.tensor.extent(0), w = fm.tensor.extent(1), d = fm.tensor.extent(2);
    FeatureMap out = fm;
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            auto dst = out.tensor.vec3(r, c);
            std::vector<double> acc(d, 0.0);
            std::size_t count = 0;
            for (long long dr = -1; dr <= 1; ++dr) {
                for (long long dc = -1; dc <= 1; ++dc) {
                    const long long rr = static_cast<long long>(r) + dr;
                    const long long cc = static_cast<long long>(c) + dc;
                    if (rr < 0 || cc < 0 || rr >= static_cast<long long>(h) ||
                        cc >= static_cast<long long>(w))
                        continue;
                    auto src = fm.tensor.vec3(static_cast<std::size_t>(rr),
                                              static_cast<std::size_t>(cc));
                    for (std::size_t k = 0; k < d; ++k) acc[k] += double(src[k]);
                    ++count;
                }
            }
            for (std::size_t k = 0; k < d; ++k)
                dst[k] = static_cast<float>(acc[k] / double(count));
        }
    }
    return out;
}

namespace detail {

// 3x3 convolution with reflect padding followed by 2x2 average pooling.
// Weights are consumed from the rng in (out, in, ky, kx) order.
inline Tensor conv3x3_relu_pool(const Tensor& in, std::size_t out_channels, Rng& rng) {
    const std::size_t h = in.extent(0), w = in.extent(1), cin = in.extent(2);
    std::vector<float> weights(out_channels * cin * 9);
    const double scale = 1.0 / std::sqrt(double(cin) * 9.0);
    for (float& wv : weights) wv = static_cast<float>(normal01(rng) * scale);

    Tensor conv({h, w, out_channels});
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            for (std::size_t o = 0; o < out_channels; ++o) {
                double acc = 0.0;
                const float* wrow = weights.data() + o * cin * 9;
                for (long long ky = -1; ky <= 1; ++ky) {
                    const std::size_t rr = reflect_index(static_cast<long long>(r) + ky, h);
                    for (long long kx = -1; kx <= 1; ++kx) {
                        const std::size_t cc = reflect_index(static_cast<long long>(c) + kx, w);
                        auto px = in.vec3(rr, cc);
                        const std::size_t ktap = std::size_t(ky + 1) * 3 + std::size_t(kx + 1);
                        for (std::size_t i = 0; i < cin; ++i)
                            acc += double(px[i]) * double(wrow[i * 9 + ktap]);
                    }
                }
                conv.at3(r, c, o) = acc > 0.0 ? static_cast<float>(acc) : 0.0f;
            }
        }
    }

    Tensor pooled({h / 2, w / 2, out_channels});
    for (std::size_t r = 0; r < h / 2; ++r)
        for (std::size_t c = 0; c < w / 2; ++c)
            for (std::size_t o = 0; o < out_channels; ++o)
                pooled.at3(r, c, o) =
                    0.25f * (conv.at3(2 * r, 2 * c, o) + conv.at3(2 * r, 2 * c + 1, o) +
                             conv.at3(2 * r + 1, 2 * c, o) + conv.at3(2 * r + 1, 2 * c + 1, o));
    return pooled;
}

inline Tensor avg_pool2(const Tensor& in) {
    const std::size_t h = in.extent(0), w = in.extent(1), d = in.extent(2);
    Tensor pooled({h / 2, w / 2, d});
    for (std::size_t r = 0; r < h / 2; ++r)
        for (std::size_t c = 0; c < w / 2; ++c)
            for (std::size_t k = 0; k < d; ++k)
                pooled.at3(r, c, k) =
                    0.25f * (in.at3(2 * r, 2 * c, k) + in.at3(2 * r, 2 * c + 1, k) +
                             in.at3(2 * r + 1, 2 * c, k) + in.at3(2 * r + 1, 2 * c + 1, k));
    return pooled;
}

}  // namespace detail

inline constexpr std::size_t kToyExtractorStride = 8;

// Deterministic stand-in for a pretrained backbone: two seeded
// random-projection convolution stages with ReLU and 2x average poolings,
// mapping h_I x w_I x 3 onto (h_I/8) x (w_I/8) x d_f.
inline FeatureMap toy_extract(const Tensor& image, std::uint64_t seed, std::size_t d_f = 64) {
    if (image.rank() != 3 || image.extent(2) != 3)
        throw DimensionError("toy_extract: h x w x 3 image expected");
    const std::size_t h = image.extent(0), w = image.extent(1);
    if (h % kToyExtractorStride != 0 || w % kToyExtractorStride != 0)
        throw ArgumentError("toy_extract: image extents must be divisible by 8");
    if (d_f < 4 || d_f % 4 != 0)
        throw ArgumentError("toy_extract: d_f must be >= 4 and divisible by 4");

    Rng rng(seed);
    const std::size_t hidden = std::max<std::size_t>(4, d_f / 4);
    Tensor s1 = detail::conv3x3_relu_pool(image, hidden, rng);  // /2
    Tensor s2 = detail::conv3x3_relu_pool(s1, d_f, rng);        // /4
    Tensor s3 = detail::avg_pool2(s2);                          // /8

    FeatureMap fm;
    fm.tensor = std::move(s3);
    fm.image_h = static_cast<std::uint32_t>(h);
    fm.image_w = static_cast<std::uint32_t>(w);
    fm.validate();
    return fm;
}

inline void write_feature_file(const FeatureMap& fm, const std::filesystem::path& path) {
    fm.validate();
    write_srft(path, fm.tensor, fm.image_h, fm.image_w);
}

inline FeatureMap read_feature_file(const std::filesystem::path& path) {
    FloatGrid g = read_srft(path);
    FeatureMap fm;
    fm.tensor = std::move(g.tensor);
    fm.image_h = g.image_h;
    fm.image_w = g.image_w;
    fm.source_image_id = path.stem().string();
    fm.validate();
    return fm;
}

}  // namespace semirest
