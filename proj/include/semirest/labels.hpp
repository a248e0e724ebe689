#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "semirest/common.hpp"
#include "semirest/io.hpp"
#include "semirest/tensor.hpp"

namespace semirest {

// Shared sentinel for IGNORED blocks (full supervision) and unknown blocks
// (box-derived semi-supervision). Stored as 255 in "SRLB" files.
inline constexpr std::int8_t kLabelNormal = 0;
inline constexpr std::int8_t kLabelAnomalous = 1;
inline constexpr std::int8_t kLabelIgnored = -1;

struct PixelLabelMap {
    std::vector<std::int8_t> map;  // h*w row-major
    std::size_t h = 0, w = 0;

    std::int8_t at(std::size_t r, std::size_t c) const { return map[r * w + c]; }
    std::int8_t& at(std::size_t r, std::size_t c) { return map[r * w + c]; }
};

struct BlockLabelMap {
    std::vector<std::int8_t> map;  // h_t*w_t row-major
    std::size_t h = 0, w = 0;
    std::size_t block_h = 0, block_w = 0;  // pixels per block edge

    std::int8_t at(std::size_t r, std::size_t c) const { return map[r * w + c]; }
    std::int8_t& at(std::size_t r, std::size_t c) { return map[r * w + c]; }
    std::size_t beta() const { return block_h * block_w; }
};

struct BoundingBox {
    std::size_t r0 = 0, c0 = 0, r1 = 0, c1 = 0;  // inclusive pixel coordinates
};

// Per block: anomaly-pixel count > eps_plus*beta -> 1, < eps_minus*beta -> 0,
// otherwise IGNORED. Both inequalities are strict.
inline BlockLabelMap blocks_from_pixels(const PixelLabelMap& pixels, std::size_t block_h,
                                        std::size_t block_w, double eps_plus,
                                        double eps_minus) {
    if (eps_minus < 0.0 || eps_plus > 1.0 || eps_minus > eps_plus)
        throw ArgumentError("blocks_from_pixels: need 0 <= eps_minus <= eps_plus <= 1");
    if (block_h < 1 || block_w < 1 || pixels.h % block_h != 0 || pixels.w % block_w != 0)
        throw ArgumentError("blocks_from_pixels: image extent must divide by block extent");

    BlockLabelMap blocks;
    blocks.h = pixels.h / block_h;
    blocks.w = pixels.w / block_w;
    blocks.block_h = block_h;
    blocks.block_w = block_w;
    blocks.map.assign(blocks.h * blocks.w, kLabelNormal);
    const double beta = double(block_h * block_w);

    for (std::size_t rb = 0; rb < blocks.h; ++rb) {
        for (std::size_t cb = 0; cb < blocks.w; ++cb) {
            std::size_t count = 0;
            for (std::size_t r = rb * block_h; r < (rb + 1) * block_h; ++r)
                for (std::size_t c = cb * block_w; c < (cb + 1) * block_w; ++c)
                    if (pixels.at(r, c) == kLabelAnomalous) ++count;
            const double x = double(count);
            if (x > eps_plus * beta)
                blocks.at(rb, cb) = kLabelAnomalous;
            else if (x < eps_minus * beta)
                blocks.at(rb, cb) = kLabelNormal;
            else
                blocks.at(rb, cb) = kLabelIgnored;
        }
    }
    return blocks;
}

// Pixels inside the box union are unknown (-1), outside certainly normal (0).
inline PixelLabelMap boxes_to_pixel_labels(const std::vector<BoundingBox>& boxes, std::size_t h,
                                           std::size_t w) {
    for (const BoundingBox& b : boxes)
        if (b.r0 > b.r1 || b.c0 > b.c1 || b.r1 >= h || b.c1 >= w)
            throw ArgumentError("boxes_to_pixel_labels: malformed box");
    PixelLabelMap pixels;
    pixels.h = h;
    pixels.w = w;
    pixels.map.assign(h * w, kLabelNormal);
    for (const BoundingBox& b : boxes)
        for (std::size_t r = b.r0; r <= b.r1; ++r)
            for (std::size_t c = b.c0; c <= b.c1; ++c) pixels.at(r, c) = kLabelIgnored;
    return pixels;
}

// Per block: count of unknown pixels > upsilon*beta -> unknown, else 0.
inline BlockLabelMap blocks_from_boxes(const std::vector<BoundingBox>& boxes, std::size_t image_h,
                                       std::size_t image_w, std::size_t block_h,
                                       std::size_t block_w, double upsilon) {
    if (upsilon < 0.0 || upsilon > 1.0)
        throw ArgumentError("blocks_from_boxes: upsilon must be in [0, 1]");
    if (block_h < 1 || block_w < 1 || image_h % block_h != 0 || image_w % block_w != 0)
        throw ArgumentError("blocks_from_boxes: image extent must divide by block extent");

    const PixelLabelMap pixels = boxes_to_pixel_labels(boxes, image_h, image_w);
    BlockLabelMap blocks;
    blocks.h = image_h / block_h;
    blocks.w = image_w / block_w;
    blocks.block_h = block_h;
    blocks.block_w = block_w;
    blocks.map.assign(blocks.h * blocks.w, kLabelNormal);
    const double beta = double(block_h * block_w);

    for (std::size_t rb = 0; rb < blocks.h; ++rb) {
        for (std::size_t cb = 0; cb < blocks.w; ++cb) {
            std::size_t count = 0;
            for (std::size_t r = rb * block_h; r < (rb + 1) * block_h; ++r)
                for (std::size_t c = cb * block_w; c < (cb + 1) * block_w; ++c)
                    if (pixels.at(r, c) != kLabelNormal) ++count;
            blocks.at(rb, cb) = double(count) > upsilon * beta ? kLabelIgnored : kLabelNormal;
        }
    }
    return blocks;
}

// --- simulated anomalies -------------------------------------------------------

struct SynthResult {
    Tensor image;        // corrupted copy
    PixelLabelMap mask;  // 1 exactly where pixels were pasted
};

// Pastes 1-3 smooth-noise blobs (random position, scale, intensity) onto the
// image; the mask marks exactly the pasted pixels. Deterministic per seed.
// The blob budget keeps the mask at or below 25% of the image.
inline SynthResult synth_anomalies(const Tensor& image, std::uint64_t mask_seed) {
    if (image.rank() != 3 || image.extent(2) != 3)
        throw DimensionError("synth_anomalies: h x w x 3 image expected");
    const std::size_t h = image.extent(0), w = image.extent(1);

    Rng rng(mask_seed);
    SynthResult out;
    out.image = image;
    out.mask.h = h;
    out.mask.w = w;
    out.mask.map.assign(h * w, kLabelNormal);

    const double r_min = 3.0;
    const double r_max = std::max(r_min, double(std::min(h, w)) / 6.0);
    // mask area per blob is about 1.89 * r^2 (alpha threshold 0.3)
    const std::size_t cap =
        std::max<std::size_t>(1, std::size_t(0.20 * double(h * w) / (1.89 * r_max * r_max)));
    std::size_t count = 1 + uniform_index(rng, 3);
    count = std::min(count, cap);
    constexpr double kAlphaThreshold = 0.3;

    for (std::size_t b = 0; b < count; ++b) {
        const double radius = uniform_range(rng, r_min, r_max);
        const std::size_t margin = std::min<std::size_t>(std::size_t(radius) + 1,
                                                         std::min(h, w) / 2);
        const std::size_t cr = margin + uniform_index(rng, std::max<std::size_t>(1, h - 2 * margin));
        const std::size_t cc = margin + uniform_index(rng, std::max<std::size_t>(1, w - 2 * margin));

        double shift[3];
        for (int ch = 0; ch < 3; ++ch) {
            const double mag = uniform_range(rng, 0.35, 0.65);
            shift[ch] = out.image.at3(cr, cc, std::size_t(ch)) > 0.5f ? -mag : mag;
        }
        // low-frequency noise field inside the blob
        const double na = uniform_range(rng, 0.2, 0.9);
        const double nb = uniform_range(rng, 0.2, 0.9);
        const double nphase = uniform_range(rng, 0.0, 2.0 * M_PI);

        const long long reach = static_cast<long long>(std::ceil(radius));
        for (long long dr = -reach; dr <= reach; ++dr) {
            for (long long dc = -reach; dc <= reach; ++dc) {
                const long long r = static_cast<long long>(cr) + dr;
                const long long c = static_cast<long long>(cc) + dc;
                if (r < 0 || c < 0 || r >= static_cast<long long>(h) ||
                    c >= static_cast<long long>(w))
                    continue;
                const double d2 = double(dr * dr + dc * dc);
                const double alpha = std::exp(-d2 / (2.0 * (radius / 2.0) * (radius / 2.0)));
                if (alpha <= kAlphaThreshold) continue;
                const double noise = 0.1 * std::sin(na * double(dr) + nb * double(dc) + nphase);
                for (int ch = 0; ch < 3; ++ch) {
                    float& px = out.image.at3(std::size_t(r), std::size_t(c), std::size_t(ch));
                    px = std::clamp(px + float(alpha * (shift[ch] + noise)), 0.0f, 1.0f);
                }
                out.mask.at(std::size_t(r), std::size_t(c)) = kLabelAnomalous;
            }
        }
    }
    return out;
}

// --- label / box file formats ---------------------------------------------------

inline std::uint8_t label_to_byte(std::int8_t v) {
    return v == kLabelIgnored ? 255 : static_cast<std::uint8_t>(v);
}

inline std::int8_t byte_to_label(std::uint8_t v, const std::string& where) {
    if (v == 255) return kLabelIgnored;
    if (v > 1) throw DecodeError(where + ": label byte must be 0, 1 or 255");
    return static_cast<std::int8_t>(v);
}

inline void write_pixel_labels(const PixelLabelMap& labels, const std::filesystem::path& path) {
    ByteGrid g;
    g.h = static_cast<std::uint32_t>(labels.h);
    g.w = static_cast<std::uint32_t>(labels.w);
    g.d = 1;
    g.image_h = static_cast<std::uint32_t>(labels.h);
    g.image_w = static_cast<std::uint32_t>(labels.w);
    g.data.resize(labels.map.size());
    for (std::size_t i = 0; i < labels.map.size(); ++i) g.data[i] = label_to_byte(labels.map[i]);
    write_srlb(path, g);
}

inline PixelLabelMap read_pixel_labels(const std::filesystem::path& path) {
    const ByteGrid g = read_srlb(path);
    if (g.d != 1) throw HeaderError(path.string() + ": pixel label map must have d=1");
    PixelLabelMap labels;
    labels.h = g.h;
    labels.w = g.w;
    labels.map.resize(g.data.size());
    for (std::size_t i = 0; i < g.data.size(); ++i)
        labels.map[i] = byte_to_label(g.data[i], path.string());
    return labels;
}

// one box per line: "r0 c0 r1 c1", inclusive pixel coordinates
inline void write_boxes(const std::vector<BoundingBox>& boxes,
                        const std::filesystem::path& path) {
    std::ostringstream out;
    for (const BoundingBox& b : boxes)
        out << b.r0 << " " << b.c0 << " " << b.r1 << " " << b.c1 << "\n";
    io::spill(path, out.str());
}

inline std::vector<BoundingBox> read_boxes(const std::filesystem::path& path) {
    std::istringstream in(io::slurp(path));
    std::vector<BoundingBox> boxes;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        std::istringstream ls(line);
        long long r0, c0, r1, c1;
        if (!(ls >> r0 >> c0 >> r1 >> c1) || r0 < 0 || c0 < 0 || r1 < r0 || c1 < c0)
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed box line");
        boxes.push_back({std::size_t(r0), std::size_t(c0), std::size_t(r1), std::size_t(c1)});
    }
    return boxes;
}

// --- connected components --------------------------------------------------------

// 8-connected components of the anomalous pixels; returns a component index
// per pixel (-1 for background) and the component count.
struct ComponentMap {
    std::vector<int> index;  // h*w, -1 background
    std::size_t h = 0, w = 0;
    int count = 0;
};

inline ComponentMap connected_components_8(const PixelLabelMap& truth) {
    ComponentMap cm;
    cm.h = truth.h;
    cm.w = truth.w;
    cm.index.assign(truth.h * truth.w, -1);
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < truth.map.size(); ++start) {
        if (truth.map[start] != kLabelAnomalous || cm.index[start] != -1) continue;
        const int id = cm.count++;
        stack.assign(1, start);
        cm.index[start] = id;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            const long long r = static_cast<long long>(p / truth.w);
            const long long c = static_cast<long long>(p % truth.w);
            for (long long dr = -1; dr <= 1; ++dr) {
                for (long long dc = -1; dc <= 1; ++dc) {
                    if (dr == 0 && dc == 0) continue;
                    const long long rr = r + dr, cc = c + dc;
                    if (rr < 0 || cc < 0 || rr >= static_cast<long long>(truth.h) ||
                        cc >= static_cast<long long>(truth.w))
                        continue;
                    const std::size_t q = std::size_t(rr) * truth.w + std::size_t(cc);
                    if (truth.map[q] == kLabelAnomalous && cm.index[q] == -1) {
                        cm.index[q] = id;
                        stack.push_back(q);
                    }
                }
            }
        }
    }
    return cm;
}

inline std::vector<BoundingBox> component_boxes(const PixelLabelMap& mask) {
    const ComponentMap cm = connected_components_8(mask);
    std::vector<BoundingBox> boxes(std::size_t(cm.count));
    std::vector<bool> seen(std::size_t(cm.count), false);
    for (std::size_t r = 0; r < mask.h; ++r) {
        for (std::size_t c = 0; c < mask.w; ++c) {
            const int id = cm.index[r * mask.w + c];
            if (id < 0) continue;
            BoundingBox& b = boxes[std::size_t(id)];
            if (!seen[std::size_t(id)]) {
                b = {r, c, r, c};
                seen[std::size_t(id)] = true;
            } else {
                b.r0 = std::min(b.r0, r);
                b.c0 = std::min(b.c0, c);
                b.r1 = std::max(b.r1, r);
                b.c1 = std::max(b.c1, c);
            }
        }
    }
    return boxes;
}

}  // namespace semirest
