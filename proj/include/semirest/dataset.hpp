#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "semirest/common.hpp"
#include "semirest/io.hpp"
#include "semirest/labels.hpp"
#include "semirest/tensor.hpp"

namespace semirest {

// Fixed dataset layout:
//   train/normal/*.ppm   test/normal/*.ppm   test/defect/*.ppm
//   masks/<stem>.srlb    boxes/<stem>.txt

struct DatasetLayout {
    std::filesystem::path root;
    std::filesystem::path train_normal() const { return root / "train" / "normal"; }
    std::filesystem::path test_normal() const { return root / "test" / "normal"; }
    std::filesystem::path test_defect() const { return root / "test" / "defect"; }
    std::filesystem::path masks() const { return root / "masks"; }
    std::filesystem::path boxes() const { return root / "boxes"; }
};

inline std::vector<std::filesystem::path> list_images(const std::filesystem::path& dir) {
    std::vector<std::filesystem::path> out;
    if (!std::filesystem::exists(dir)) return out;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".ppm")
            out.push_back(entry.path());
    std::sort(out.begin(), out.end());
    return out;
}

// ---------------------------------------------------------------------------
// Procedural textures: one sinusoid family per dataset seed, small per-image
// phase/amplitude jitter and pixel noise, so normal images are roughly
// aligned the way industrial captures are.
// ---------------------------------------------------------------------------

struct TextureFamily {
    double f1r, f1c, f2r, f2c;    // cycles per pixel
    double amp1, amp2;
    double phase1, phase2;
    double channel_gain[3];
    double channel_bias[3];
};

inline TextureFamily make_texture_family(std::uint64_t dataset_seed) {
    Rng rng(derive_seed(dataset_seed, 0x7e97));
    TextureFamily t{};
    t.f1r = uniform_range(rng, 0.03, 0.08);
    t.f1c = uniform_range(rng, 0.03, 0.08);
    t.f2r = uniform_range(rng, 0.06, 0.13);
    t.f2c = uniform_range(rng, 0.06, 0.13);
    t.amp1 = uniform_range(rng, 0.12, 0.18);
    t.amp2 = uniform_range(rng, 0.06, 0.10);
    t.phase1 = uniform_range(rng, 0.0, 2.0 * M_PI);
    t.phase2 = uniform_range(rng, 0.0, 2.0 * M_PI);
    for (int ch = 0; ch < 3; ++ch) {
        t.channel_gain[ch] = uniform_range(rng, 0.7, 1.0);
        t.channel_bias[ch] = uniform_range(rng, 0.42, 0.58);
    }
    return t;
}

inline Tensor generate_texture_image(const TextureFamily& t, std::size_t h, std::size_t w,
                                     Rng& rng) {
    const double jitter1 = uniform_range(rng, -0.25, 0.25);
    const double jitter2 = uniform_range(rng, -0.25, 0.25);
    const double amp_scale = uniform_range(rng, 0.9, 1.1);
    Tensor image({h, w, 3});
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const double g =
                amp_scale * (t.amp1 * std::sin(2.0 * M_PI * (t.f1r * double(r) +
                                                             t.f1c * double(c)) +
                                               t.phase1 + jitter1) +
                             t.amp2 * std::sin(2.0 * M_PI * (t.f2r * double(r) +
                                                             t.f2c * double(c)) +
                                               t.phase2 + jitter2));
            const double noise = 0.01 * normal01(rng);
            for (int ch = 0; ch < 3; ++ch) {
                const double v = t.channel_bias[ch] + t.channel_gain[ch] * g + noise;
                image.at3(r, c, std::size_t(ch)) = static_cast<float>(std::clamp(v, 0.0, 1.0));
            }
        }
    return image;
}

// ---------------------------------------------------------------------------
// Dataset generation (the cmd_synth core)
// ---------------------------------------------------------------------------

struct SynthDatasetConfig {
    std::size_t image_size = 64;  // divisible by the extractor stride
    std::size_t n_train = 32;
    std::size_t n_test_normal = 16;
    std::size_t n_test_defect = 16;
    std::uint64_t seed = 0;
};

inline std::string index_name(const char* prefix, std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%03zu", prefix, i);
    return buf;
}

inline void generate_synthetic_dataset(const std::filesystem::path& root,
                                       const SynthDatasetConfig& cfg) {
    if (cfg.image_size % kToyExtractorStride != 0 || cfg.image_size < 2 * kToyExtractorStride)
        throw ArgumentError("generate_synthetic_dataset: image size must be a multiple of 8");
    DatasetLayout layout{root};
    std::error_code ec;
    for (const auto& dir : {layout.train_normal(), layout.test_normal(), layout.test_defect(),
                            layout.masks(), layout.boxes()}) {
        std::filesystem::create_directories(dir, ec);
        if (ec) throw DataError("cannot create '" + dir.string() + "': " + ec.message());
    }

    const TextureFamily family = make_texture_family(cfg.seed);
    const std::size_t s = cfg.image_size;

    for (std::size_t i = 0; i < cfg.n_train; ++i) {
        Rng rng(derive_seed(cfg.seed, 0x1000 + i));
        const Tensor img = generate_texture_image(family, s, s, rng);
        write_ppm(layout.train_normal() / (index_name("train", i) + ".ppm"), img);
    }
    for (std::size_t i = 0; i < cfg.n_test_normal; ++i) {
        Rng rng(derive_seed(cfg.seed, 0x2000 + i));
        const Tensor img = generate_texture_image(family, s, s, rng);
        const std::string stem = index_name("normal", i);
        write_ppm(layout.test_normal() / (stem + ".ppm"), img);
        PixelLabelMap zero;
        zero.h = s;
        zero.w = s;
        zero.map.assign(s * s, kLabelNormal);
        write_pixel_labels(zero, layout.masks() / (stem + ".srlb"));
    }
    for (std::size_t i = 0; i < cfg.n_test_defect; ++i) {
        Rng rng(derive_seed(cfg.seed, 0x3000 + i));
        const Tensor base = generate_texture_image(family, s, s, rng);
        const SynthResult synth = synth_anomalies(base, derive_seed(cfg.seed, 0x4000 + i));
        const std::string stem = index_name("defect", i);
        write_ppm(layout.test_defect() / (stem + ".ppm"), synth.image);
        write_pixel_labels(synth.mask, layout.masks() / (stem + ".srlb"));
        write_boxes(component_boxes(synth.mask), layout.boxes() / (stem + ".txt"));
    }
}

}  // namespace semirest
