#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "codl/configs.hpp"
#include "codl/errors.hpp"

namespace codl {

// Grid of codebook indices, row-major.
struct IndexGrid {
    int h = 0, w = 0;
    std::vector<uint32_t> indices;  // size h*w

    uint32_t at(int y, int x) const { return indices[static_cast<size_t>(y) * w + x]; }
    uint32_t& at(int y, int x) { return indices[static_cast<size_t>(y) * w + x]; }
    size_t cells() const { return indices.size(); }
};

// Fixed-length-coded container. Header fields are big-endian, payload bits
// are packed MSB-first in row-major cell order, tail padded with zeros.
//
//   magic "CODL" | version u8 | height u16 | width u16 | log2_f u8 | bits u8
struct StreamMeta {
    uint16_t height = 0;
    uint16_t width = 0;
    uint8_t log2_downsample = 0;
    uint8_t codebook_bits = 0;

    int downsample() const { return 1 << log2_downsample; }
    int grid_h() const { return height >> log2_downsample; }
    int grid_w() const { return width >> log2_downsample; }
};

namespace bitstream {

inline constexpr char kMagic[4] = {'C', 'O', 'D', 'L'};
inline constexpr uint8_t kVersion = 1;
// magic(4) + version(1) + height(2) + width(2) + log2_f(1) + bits(1)
inline constexpr size_t kHeaderBytes = 11;

inline size_t payload_bytes(int h, int w, int bits) {
    int64_t total_bits = static_cast<int64_t>(h) * w * bits;
    return static_cast<size_t>((total_bits + 7) / 8);
}

inline std::vector<uint8_t> pack(const IndexGrid& grid, const StreamMeta& meta) {
    CODL_CHECK(meta.codebook_bits >= 1 && meta.codebook_bits <= 16, FormatError,
               "codebook bits out of range");
    CODL_CHECK(meta.height % meta.downsample() == 0 && meta.width % meta.downsample() == 0,
               FormatError, "image dims not divisible by downsample factor");
    CODL_CHECK(grid.h == meta.grid_h() && grid.w == meta.grid_w(), FormatError,
               "grid shape inconsistent with meta");
    const uint32_t limit = 1u << meta.codebook_bits;
    for (uint32_t v : grid.indices)
        CODL_CHECK(v < limit, FormatError,
                   "index " + std::to_string(v) + " overflows " +
                       std::to_string(static_cast<int>(meta.codebook_bits)) + " bits");

    std::vector<uint8_t> out;
    out.reserve(kHeaderBytes + payload_bytes(grid.h, grid.w, meta.codebook_bits));
    out.insert(out.end(), kMagic, kMagic + 4);
    out.push_back(kVersion);
    out.push_back(static_cast<uint8_t>(meta.height >> 8));
    out.push_back(static_cast<uint8_t>(meta.height & 0xff));
    out.push_back(static_cast<uint8_t>(meta.width >> 8));
    out.push_back(static_cast<uint8_t>(meta.width & 0xff));
    out.push_back(meta.log2_downsample);
    out.push_back(meta.codebook_bits);

    uint32_t acc = 0;
    int nbits = 0;
    for (uint32_t v : grid.indices) {
        acc = (acc << meta.codebook_bits) | v;
        nbits += meta.codebook_bits;
        while (nbits >= 8) {
            out.push_back(static_cast<uint8_t>((acc >> (nbits - 8)) & 0xff));
            nbits -= 8;
        }
    }
    if (nbits > 0) out.push_back(static_cast<uint8_t>((acc << (8 - nbits)) & 0xff));
    return out;
}

inline std::pair<IndexGrid, StreamMeta> unpack(const std::vector<uint8_t>& bytes) {
    CODL_CHECK(bytes.size() >= kHeaderBytes, FormatError, "container shorter than header");
    CODL_CHECK(std::equal(kMagic, kMagic + 4, bytes.begin()), FormatError,
               "bad magic (not a codl bitstream)");
    CODL_CHECK(bytes[4] == kVersion, FormatError,
               "unknown container version " + std::to_string(bytes[4]));
    StreamMeta meta;
    meta.height = static_cast<uint16_t>((bytes[5] << 8) | bytes[6]);
    meta.width = static_cast<uint16_t>((bytes[7] << 8) | bytes[8]);
    meta.log2_downsample = bytes[9];
    meta.codebook_bits = bytes[10];
    CODL_CHECK(meta.codebook_bits >= 1 && meta.codebook_bits <= 16, FormatError,
               "corrupt header: codebook bits out of range");
    CODL_CHECK(meta.height % meta.downsample() == 0 && meta.width % meta.downsample() == 0,
               FormatError, "corrupt header: dims not divisible");

    IndexGrid grid;
    grid.h = meta.grid_h();
    grid.w = meta.grid_w();
    grid.indices.resize(static_cast<size_t>(grid.h) * grid.w);
    size_t need = payload_bytes(grid.h, grid.w, meta.codebook_bits);
    CODL_CHECK(bytes.size() >= kHeaderBytes + need, FormatError,
               "truncated payload: need " + std::to_string(need) + " bytes, have " +
                   std::to_string(bytes.size() - kHeaderBytes));

    uint64_t acc = 0;
    int nbits = 0;
    size_t pos = kHeaderBytes;
    for (auto& v : grid.indices) {
        while (nbits < meta.codebook_bits) {
            acc = (acc << 8) | bytes[pos++];
            nbits += 8;
        }
        v = static_cast<uint32_t>((acc >> (nbits - meta.codebook_bits)) &
                                  ((1u << meta.codebook_bits) - 1));
        nbits -= meta.codebook_bits;
    }
    return {std::move(grid), meta};
}

// Payload-only rate: exactly bits / f^2, independent of image size.
inline double bpp_payload(int downsample, int bits) {
    return static_cast<double>(bits) / (static_cast<double>(downsample) * downsample);
}

inline double bpp_payload(const CodecConfig& cfg, int H, int W) {
    CODL_CHECK(H % cfg.downsample == 0 && W % cfg.downsample == 0, FormatError,
               "image dims not divisible by downsample factor");
    return bpp_payload(cfg.downsample, cfg.codebook_bits);
}

// Rate including the header and payload byte padding, for a concrete image.
inline double bpp_with_header(const CodecConfig& cfg, int H, int W) {
    CODL_CHECK(H % cfg.downsample == 0 && W % cfg.downsample == 0, FormatError,
               "image dims not divisible by downsample factor");
    int h = H / cfg.downsample, w = W / cfg.downsample;
    size_t total = kHeaderBytes + payload_bytes(h, w, cfg.codebook_bits);
    return static_cast<double>(total) * 8.0 / (static_cast<double>(H) * W);
}

}  // namespace bitstream
}  // namespace codl
