#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "semirest/common.hpp"
#include "semirest/tensor.hpp"

namespace semirest {

// All binary containers are little-endian with a 4-byte magic followed by a
// u32 version. Serialization is byte-explicit so files are identical across
// hosts.

namespace io {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

class Reader {
  public:
    Reader(std::string bytes, std::string name)
        : bytes_(std::move(bytes)), name_(std::move(name)) {}

    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 4;
        return v;
    }

    std::uint64_t u64() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        pos_ += 8;
        return v;
    }

    float f32() {
        const std::uint32_t bits = u32();
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }

    void magic(const char expect[4]) {
        if (bytes_.size() < pos_ + 4)
            throw TruncatedFileError(name_ + ": file shorter than its header");
        if (std::memcmp(bytes_.data() + pos_, expect, 4) != 0)
            throw MagicMismatchError(name_ + ": magic mismatch, expected '" +
                                     std::string(expect, 4) + "'");
        pos_ += 4;
    }

    void f32_payload(std::span<float> out) {
        need(out.size() * 4);
        for (std::size_t i = 0; i < out.size(); ++i) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b)
                bits |= std::uint32_t(static_cast<unsigned char>(bytes_[pos_ + 4 * i + b]))
                        << (8 * b);
            std::memcpy(&out[i], &bits, 4);
        }
        pos_ += out.size() * 4;
    }

    void u8_payload(std::span<std::uint8_t> out) {
        need(out.size());
        std::memcpy(out.data(), bytes_.data() + pos_, out.size());
        pos_ += out.size();
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& name() const { return name_; }

  private:
    void need(std::size_t n) {
        if (bytes_.size() - pos_ < n)
            throw TruncatedFileError(name_ + ": payload shorter than the header implies");
    }

    std::string bytes_;
    std::string name_;
    std::size_t pos_ = 0;
};

inline std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "' for reading");
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

inline void spill(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to '" + path.string() + "'");
}

}  // namespace io

// --- "SRFT" float container -------------------------------------------------
// magic | version u32=1 | h u32 | w u32 | d u32 | h_I u32 | w_I u32
// | h*w*d float32, row-major (row, column, channel innermost)

struct FloatGrid {
    Tensor tensor;  // h x w x d
    std::uint32_t image_h = 0;
    std::uint32_t image_w = 0;
};

inline void write_srft(const std::filesystem::path& path, const Tensor& t,
                       std::uint32_t image_h, std::uint32_t image_w) {
    if (t.rank() != 3) throw DimensionError("write_srft: rank-3 tensor expected");
    std::string out;
    out.append("SRFT", 4);
    io::put_u32(out, 1);
    io::put_u32(out, static_cast<std::uint32_t>(t.extent(0)));
    io::put_u32(out, static_cast<std::uint32_t>(t.extent(1)));
    io::put_u32(out, static_cast<std::uint32_t>(t.extent(2)));
    io::put_u32(out, image_h);
    io::put_u32(out, image_w);
    for (float v : t.data) io::put_f32(out, v);
    io::spill(path, out);
}

inline FloatGrid read_srft(const std::filesystem::path& path) {
    io::Reader r(io::slurp(path), path.string());
    r.magic("SRFT");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw HeaderError(path.string() + ": unsupported SRFT version " + std::to_string(version));
    const std::uint32_t h = r.u32(), w = r.u32(), d = r.u32();
    const std::uint32_t hi = r.u32(), wi = r.u32();
    if (h < 1 || w < 1 || d < 1)
        throw HeaderError(path.string() + ": zero extent in SRFT header");
    FloatGrid g;
    g.tensor = Tensor({h, w, d});
    g.image_h = hi;
    g.image_w = wi;
    r.f32_payload(g.tensor.data);
    return g;
}

// --- "SRLB" u8 container ------------------------------------------------------
// Same header layout as SRFT with a u8 payload; 255 encodes IGNORED/unknown.

struct ByteGrid {
    std::vector<std::uint8_t> data;  // h*w*d row-major
    std::uint32_t h = 0, w = 0, d = 0;
    std::uint32_t image_h = 0, image_w = 0;
};

inline void write_srlb(const std::filesystem::path& path, const ByteGrid& g) {
    if (g.data.size() != std::size_t(g.h) * g.w * g.d)
        throw DimensionError("write_srlb: payload does not match extents");
    std::string out;
    out.append("SRLB", 4);
    io::put_u32(out, 1);
    io::put_u32(out, g.h);
    io::put_u32(out, g.w);
    io::put_u32(out, g.d);
    io::put_u32(out, g.image_h);
    io::put_u32(out, g.image_w);
    out.append(reinterpret_cast<const char*>(g.data.data()), g.data.size());
    io::spill(path, out);
}

inline ByteGrid read_srlb(const std::filesystem::path& path) {
    io::Reader r(io::slurp(path), path.string());
    r.magic("SRLB");
    const std::uint32_t version = r.u32();
    if (version != 1)
        throw HeaderError(path.string() + ": unsupported SRLB version " + std::to_string(version));
    ByteGrid g;
    g.h = r.u32();
    g.w = r.u32();
    g.d = r.u32();
    g.image_h = r.u32();
    g.image_w = r.u32();
    if (g.h < 1 || g.w < 1 || g.d < 1)
        throw HeaderError(path.string() + ": zero extent in SRLB header");
    g.data.resize(std::size_t(g.h) * g.w * g.d);
    r.u8_payload(g.data);
    return g;
}

// --- PPM (P6) / PGM (P5) -----------------------------------------------------
// Raw 8-bit images; the toy extractor ingests PPM, masks and previews are PGM.
// Float channels map to bytes as round(v * 255) clamped to [0, 255].

inline std::uint8_t float_to_byte(float v) {
    const float scaled = std::round(v * 255.0f);
    if (scaled <= 0.0f) return 0;
    if (scaled >= 255.0f) return 255;
    return static_cast<std::uint8_t>(scaled);
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.extent(2) != 3)
        throw DimensionError("write_ppm: h x w x 3 tensor expected");
    std::string out = "P6\n" + std::to_string(image.extent(1)) + " " +
                      std::to_string(image.extent(0)) + "\n255\n";
    for (float v : image.data) out.push_back(static_cast<char>(float_to_byte(v)));
    io::spill(path, out);
}

namespace io {

inline std::size_t parse_pnm_header(const std::string& bytes, const std::string& name,
                                    const char* want, std::size_t& h, std::size_t& w) {
    if (bytes.size() < 2 || bytes[0] != want[0] || bytes[1] != want[1])
        throw MagicMismatchError(name + ": not a " + std::string(want) + " file");
    std::size_t pos = 2;
    auto next_token = [&]() -> std::size_t {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
        std::size_t v = 0;
        bool any = false;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) {
            v = v * 10 + std::size_t(bytes[pos] - '0');
            ++pos;
            any = true;
        }
        if (!any) throw HeaderError(name + ": malformed PNM header");
        return v;
    };
    w = next_token();
    h = next_token();
    const std::size_t maxval = next_token();
    if (maxval != 255) throw HeaderError(name + ": only maxval 255 is supported");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        throw HeaderError(name + ": malformed PNM header");
    return pos + 1;
}

}  // namespace io

inline Tensor read_ppm(const std::filesystem::path& path) {
    const std::string bytes = io::slurp(path);
    std::size_t h = 0, w = 0;
    const std::size_t off = io::parse_pnm_header(bytes, path.string(), "P6", h, w);
    if (bytes.size() - off < h * w * 3)
        throw TruncatedFileError(path.string() + ": PPM payload too short");
    Tensor image({h, w, 3});
    for (std::size_t i = 0; i < h * w * 3; ++i)
        image.data[i] = float(static_cast<unsigned char>(bytes[off + i])) / 255.0f;
    return image;
}

inline void write_pgm(const std::filesystem::path& path, const TensorT<float>& map) {
    if (map.rank() != 2) throw DimensionError("write_pgm: rank-2 map expected");
    std::string out = "P5\n" + std::to_string(map.extent(1)) + " " +
                      std::to_string(map.extent(0)) + "\n255\n";
    for (float v : map.data) out.push_back(static_cast<char>(float_to_byte(v)));
    io::spill(path, out);
}

inline void write_pgm_bytes(const std::filesystem::path& path, std::size_t h, std::size_t w,
                            std::span<const std::uint8_t> payload) {
    if (payload.size() != h * w) throw DimensionError("write_pgm_bytes: payload mismatch");
    std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(payload.data()), payload.size());
    io::spill(path, out);
}

struct ByteImage {
    std::vector<std::uint8_t> data;
    std::size_t h = 0, w = 0;
};

inline ByteImage read_pgm(const std::filesystem::path& path) {
    const std::string bytes = io::slurp(path);
    ByteImage img;
    const std::size_t off = io::parse_pnm_header(bytes, path.string(), "P5", img.h, img.w);
    if (bytes.size() - off < img.h * img.w)
        throw TruncatedFileError(path.string() + ": PGM payload too short");
    img.data.resize(img.h * img.w);
    std::memcpy(img.data.data(), bytes.data() + off, img.data.size());
    return img;
}

}  // namespace semirest
