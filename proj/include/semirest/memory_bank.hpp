#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "semirest/common.hpp"
#include "semirest/io.hpp"
#include "semirest/tensor.hpp"

namespace semirest {

enum class ResidualMode { square, abs };

inline const char* to_string(ResidualMode m) {
    return m == ResidualMode::square ? "square" : "abs";
}

// Coreset of normal-image PCFs; immutable after construction, queries are
// read-only and thread-safe.
struct MemoryBank {
    std::vector<std::vector<float>> entries;
    float subsample_ratio = 1.0f;
    std::uint64_t build_seed = 0;

    std::size_t size() const { return entries.size(); }
    std::size_t dim() const { return entries.empty() ? 0 : entries.front().size(); }
};

struct Neighbor {
    std::size_t index;
    double distance;
};

// Position-constrained residual: elementwise square (or abs) of the
// difference between a query and its matched bank entry.
struct Pcr {
    std::vector<float> vector;
    std::size_t query_row = 0;
    std::size_t query_col = 0;
};

// Greedy k-center (farthest-point) selection of max(1, round(ratio*N))
// entries. The first entry is chosen uniformly by seed; every subsequent
// entry maximizes its distance to the current selection; ties break on the
// lowest input index.
inline MemoryBank coreset_subsample(const std::vector<std::vector<float>>& features,
                                    double ratio, std::uint64_t seed) {
    if (features.empty()) throw ArgumentError("coreset_subsample: empty feature list");
    if (!(ratio > 0.0) || ratio > 1.0)
        throw ArgumentError("coreset_subsample: ratio must be in (0, 1]");
    const std::size_t n = features.size();
    const std::size_t dim = features.front().size();
    for (const auto& f : features)
        if (f.size() != dim) throw DimensionError("coreset_subsample: ragged feature list");

    std::size_t target = static_cast<std::size_t>(std::llround(ratio * double(n)));
    target = std::clamp<std::size_t>(target, 1, n);

    Rng rng(seed);
    std::size_t current = static_cast<std::size_t>(uniform_index(rng, n));

    std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
    std::vector<char> taken(n, 0);

    MemoryBank bank;
    bank.subsample_ratio = static_cast<float>(ratio);
    bank.build_seed = seed;
    bank.entries.reserve(target);

    for (std::size_t round = 0; round < target; ++round) {
        taken[current] = 1;
        bank.entries.push_back(features[current]);
        if (round + 1 == target) break;
        std::size_t next = n;  // sentinel
        double best = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (taken[i]) continue;
            const double d = squared_l2_distance(std::span<const float>(features[i]),
                                                 std::span<const float>(features[current]));
            if (d < min_dist[i]) min_dist[i] = d;
            if (min_dist[i] > best) {
                best = min_dist[i];
                next = i;
            }
        }
        current = next;
    }
    return bank;
}

// Exact k smallest l2 distances via linear scan; ties break on the lower
// entry index (stable sort on distance).
inline std::vector<Neighbor> nearest_neighbors(const MemoryBank& bank,
                                               std::span<const float> query, std::size_t k) {
    if (bank.entries.empty()) throw ArgumentError("nearest_neighbors: empty bank");
    if (k < 1 || k > bank.size())
        throw ArgumentError("nearest_neighbors: k must be in [1, bank size]");
    if (query.size() != bank.dim())
        throw DimensionError("nearest_neighbors: query dimension mismatch");

    std::vector<Neighbor> all(bank.size());
    for (std::size_t i = 0; i < bank.size(); ++i)
        all[i] = {i, squared_l2_distance(query, std::span<const float>(bank.entries[i]))};
    std::stable_sort(all.begin(), all.end(),
                     [](const Neighbor& a, const Neighbor& b) { return a.distance < b.distance; });
    all.resize(k);
    for (auto& nb : all) nb.distance = std::sqrt(nb.distance);
    return all;
}

inline std::vector<float> apply_residual_mode(std::span<const float> diff, ResidualMode mode) {
    return mode == ResidualMode::square ? elementwise_square(diff) : elementwise_abs(diff);
}

inline Pcr compute_pcr(const MemoryBank& bank, std::span<const float> query, ResidualMode mode) {
    const std::vector<Neighbor> nn = nearest_neighbors(bank, query, 1);
    std::vector<float> diff(query.size());
    const std::vector<float>& entry = bank.entries[nn.front().index];
    for (std::size_t k = 0; k < query.size(); ++k) diff[k] = query[k] - entry[k];
    Pcr pcr;
    pcr.vector = apply_residual_mode(diff, mode);
    return pcr;
}

// --- "SRBK" persistence -------------------------------------------------------
// magic | version u32 | T u32 | d_f u32 | seed u64 | ratio float32
// | T*d_f float32 payload

inline void write_bank(const MemoryBank& bank, const std::filesystem::path& path) {
    if (bank.entries.empty()) throw ArgumentError("write_bank: empty bank");
    std::string out;
    out.append("SRBK", 4);
    io::put_u32(out, 1);
    io::put_u32(out, static_cast<std::uint32_t>(bank.size()));
    io::put_u32(out, static_cast<std::uint32_t>(bank.dim()));
    io::put_u64(out, bank.build_seed);
    io::put_f32(out, bank.subsample_ratio);
    for (const auto& e : bank.entries)
        for (float v : e) io::put_f32(out, v);
    io::spill(path, out);
}

inline MemoryBank read_bank(const std::filesystem::path& path) {
    io::Reader r(io::slurp(path), path.string());
    r.magic("SRBK");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw HeaderError(path.string() + ": unsupported SRBK version " + std::to_string(version));
    const std::uint32_t t = r.u32();
    const std::uint32_t d = r.u32();
    if (t < 1 || d < 1) throw HeaderError(path.string() + ": zero extent in SRBK header");
    MemoryBank bank;
    bank.build_seed = r.u64();
    bank.subsample_ratio = r.f32();
    bank.entries.assign(t, std::vector<float>(d));
    for (auto& e : bank.entries) r.f32_payload(e);
    return bank;
}

}  // namespace semirest
