#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "semirest/common.hpp"

namespace semirest {

// Dense row-major tensor. Production paths run the float instantiation;
// verification paths (gradient checks, metric oracles) use double.
template <typename T>
struct TensorT {
    std::vector<std::size_t> shape;
    std::vector<T> data;

    TensorT() = default;

    explicit TensorT(std::vector<std::size_t> shape_, T fill = T(0))
        : shape(std::move(shape_)) {
        data.assign(checked_size(shape), fill);
    }

    TensorT(std::vector<std::size_t> shape_, std::vector<T> data_)
        : shape(std::move(shape_)), data(std::move(data_)) {
        if (checked_size(shape) != data.size())
            throw DimensionError("tensor: shape does not match payload length");
    }

    static std::size_t checked_size(const std::vector<std::size_t>& shape) {
        if (shape.empty()) throw DimensionError("tensor: empty shape");
        std::size_t n = 1;
        for (std::size_t e : shape) {
            if (e < 1) throw DimensionError("tensor: extent must be >= 1");
            n *= e;
        }
        return n;
    }

    std::size_t size() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    std::size_t extent(std::size_t axis) const { return shape.at(axis); }

    bool same_shape(const TensorT& other) const { return shape == other.shape; }

    T& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
    const T& at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

    T& at3(std::size_t r, std::size_t c, std::size_t ch) {
        return data[(r * shape[1] + c) * shape[2] + ch];
    }
    const T& at3(std::size_t r, std::size_t c, std::size_t ch) const {
        return data[(r * shape[1] + c) * shape[2] + ch];
    }

    // channel vector at a rank-3 grid position
    std::span<T> vec3(std::size_t r, std::size_t c) {
        return std::span<T>(data.data() + (r * shape[1] + c) * shape[2], shape[2]);
    }
    std::span<const T> vec3(std::size_t r, std::size_t c) const {
        return std::span<const T>(data.data() + (r * shape[1] + c) * shape[2], shape[2]);
    }
};

using Tensor = TensorT<float>;

template <typename T>
std::vector<T> elementwise_square(std::span<const T> v) {
    if (v.empty()) throw ArgumentError("elementwise_square: empty vector");
    std::vector<T> out(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) out[k] = v[k] * v[k];
    return out;
}

template <typename T>
std::vector<T> elementwise_abs(std::span<const T> v) {
    if (v.empty()) throw ArgumentError("elementwise_abs: empty vector");
    std::vector<T> out(v.size());
    for (std::size_t k = 0; k < v.size(); ++k) out[k] = std::abs(v[k]);
    return out;
}

template <typename T>
T l2_distance(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size())
        throw DimensionError("l2_distance: length mismatch");
    double acc = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
        acc += d * d;
    }
    return static_cast<T>(std::sqrt(acc));
}

template <typename T>
double squared_l2_distance(std::span<const T> a, std::span<const T> b) {
    if (a.size() != b.size())
        throw DimensionError("squared_l2_distance: length mismatch");
    double acc = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) {
        const double d = static_cast<double>(a[k]) - static_cast<double>(b[k]);
        acc += d * d;
    }
    return acc;
}

// Corner-aligned bilinear interpolation: output corners map exactly onto
// input corners, so constants are reproduced bit-for-bit and the identity
// size is a copy.
template <typename T>
TensorT<T> bilinear_resize(const TensorT<T>& map, std::size_t out_h, std::size_t out_w) {
    if (map.rank() != 2) throw DimensionError("bilinear_resize: rank-2 map expected");
    if (out_h < 1 || out_w < 1)
        throw ArgumentError("bilinear_resize: target extents must be positive");
    const std::size_t h = map.extent(0), w = map.extent(1);
    if (out_h == h && out_w == w) return map;

    TensorT<T> out({out_h, out_w});
    const double ry = out_h > 1 ? double(h - 1) / double(out_h - 1) : 0.0;
    const double rx = out_w > 1 ? double(w - 1) / double(out_w - 1) : 0.0;
    for (std::size_t i = 0; i < out_h; ++i) {
        const double sy = double(i) * ry;
        std::size_t y0 = static_cast<std::size_t>(sy);
        if (y0 >= h - 1) y0 = h - 1;
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double fy = sy - double(y0);
        for (std::size_t j = 0; j < out_w; ++j) {
            const double sx = double(j) * rx;
            std::size_t x0 = static_cast<std::size_t>(sx);
            if (x0 >= w - 1) x0 = w - 1;
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double fx = sx - double(x0);
            const double v00 = map.at2(y0, x0), v01 = map.at2(y0, x1);
            const double v10 = map.at2(y1, x0), v11 = map.at2(y1, x1);
            const double top = v00 + (v01 - v00) * fx;
            const double bot = v10 + (v11 - v10) * fx;
            out.at2(i, j) = static_cast<T>(top + (bot - top) * fy);
        }
    }
    return out;
}

namespace detail {

inline std::size_t reflect_index(long long i, std::size_t n) {
    const long long nn = static_cast<long long>(n);
    while (i < 0 || i >= nn) {
        if (i < 0) i = -i - 1;
        if (i >= nn) i = 2 * nn - 1 - i;
    }
    return static_cast<std::size_t>(i);
}

inline std::vector<double> gaussian_kernel(double sigma) {
    const long long radius = static_cast<long long>(std::ceil(4.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double sum = 0.0;
    for (long long j = -radius; j <= radius; ++j) {
        const double v = std::exp(-double(j * j) / (2.0 * sigma * sigma));
        k[j + radius] = v;
        sum += v;
    }
    for (double& v : k) v /= sum;
    return k;
}

}  // namespace detail

// Separable Gaussian, kernel radius ceil(4*sigma), reflect padding,
// kernel normalized to sum 1. sigma = 0 is the identity.
template <typename T>
TensorT<T> gaussian_blur(const TensorT<T>& map, double sigma) {
    if (map.rank() != 2) throw DimensionError("gaussian_blur: rank-2 map expected");
    if (sigma < 0.0) throw ArgumentError("gaussian_blur: sigma must be >= 0");
    if (sigma == 0.0) return map;

    const std::size_t h = map.extent(0), w = map.extent(1);
    const std::vector<double> kernel = detail::gaussian_kernel(sigma);
    const long long radius = (static_cast<long long>(kernel.size()) - 1) / 2;

    TensorT<T> tmp({h, w});
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (long long j = -radius; j <= radius; ++j) {
                const std::size_t cc = detail::reflect_index(static_cast<long long>(c) + j, w);
                acc += kernel[j + radius] * static_cast<double>(map.at2(r, cc));
            }
            tmp.at2(r, c) = static_cast<T>(acc);
        }
    }
    TensorT<T> out({h, w});
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t c = 0; c < w; ++c) {
            double acc = 0.0;
            for (long long j = -radius; j <= radius; ++j) {
                const std::size_t rr = detail::reflect_index(static_cast<long long>(r) + j, h);
                acc += kernel[j + radius] * static_cast<double>(tmp.at2(rr, c));
            }
            out.at2(r, c) = static_cast<T>(acc);
        }
    }
    return out;
}

}  // namespace semirest
