#include <catch2/catch_amalgamated.hpp>

#include "codl/bitstream.hpp"
#include "codl/rng.hpp"

using namespace codl;
using namespace codl::bitstream;

namespace {

StreamMeta meta_for(int H, int W, int log2_f, int bits) {
    StreamMeta m;
    m.height = static_cast<uint16_t>(H);
    m.width = static_cast<uint16_t>(W);
    m.log2_downsample = static_cast<uint8_t>(log2_f);
    m.codebook_bits = static_cast<uint8_t>(bits);
    return m;
}

IndexGrid grid_of(int h, int w, std::vector<uint32_t> idx) {
    IndexGrid g;
    g.h = h;
    g.w = w;
    g.indices = std::move(idx);
    return g;
}

}  // namespace

TEST_CASE("golden fixture: 2x2 grid [0,1,2,3] at 2 bits packs to 0x1B") {
    auto bytes = pack(grid_of(2, 2, {0, 1, 2, 3}), meta_for(32, 32, 4, 2));
    REQUIRE(bytes.size() == kHeaderBytes + 1);
    REQUIRE(bytes[kHeaderBytes] == 0x1B);
}

TEST_CASE("golden fixture: 1x1 grid [1] at 1 bit packs to 0x80") {
    auto bytes = pack(grid_of(1, 1, {1}), meta_for(16, 16, 4, 1));
    REQUIRE(bytes.size() == kHeaderBytes + 1);
    REQUIRE(bytes[kHeaderBytes] == 0x80);
}

TEST_CASE("golden fixture: full container bytes for a known stream") {
    // 2x4 grid of nibbles for a 32x64 image at f=16
    auto bytes = pack(grid_of(2, 4, {1, 2, 3, 4, 5, 6, 7, 8}), meta_for(32, 64, 4, 4));
    const std::vector<uint8_t> expect = {
        'C', 'O', 'D', 'L', 1,          // magic + version
        0x00, 0x20,                      // height 32, big-endian
        0x00, 0x40,                      // width 64
        4,                               // log2_f
        4,                               // bits
        0x12, 0x34, 0x56, 0x78,          // packed nibbles
    };
    REQUIRE(bytes == expect);
}

TEST_CASE("index overflow is rejected") {
    REQUIRE_THROWS_AS(pack(grid_of(1, 1, {4}), meta_for(16, 16, 4, 2)), FormatError);
}

TEST_CASE("corrupted magic is rejected") {
    auto bytes = pack(grid_of(1, 1, {1}), meta_for(16, 16, 4, 1));
    bytes[0] = 'X';
    REQUIRE_THROWS_AS(unpack(bytes), FormatError);
}

TEST_CASE("unknown version is rejected") {
    auto bytes = pack(grid_of(1, 1, {1}), meta_for(16, 16, 4, 1));
    bytes[4] = 9;
    REQUIRE_THROWS_AS(unpack(bytes), FormatError);
}

TEST_CASE("truncated payload is rejected") {
    auto bytes = pack(grid_of(4, 4, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15}),
                      meta_for(64, 64, 4, 4));
    bytes.pop_back();
    REQUIRE_THROWS_AS(unpack(bytes), FormatError);
}

TEST_CASE("payload size is exactly ceil(h*w*b/8) regardless of content") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        int h = 1 + static_cast<int>(rng.uniform_int(8));
        int w = 1 + static_cast<int>(rng.uniform_int(8));
        int bits = 1 + static_cast<int>(rng.uniform_int(12));
        IndexGrid g;
        g.h = h;
        g.w = w;
        g.indices.resize(static_cast<size_t>(h) * w);
        for (auto& v : g.indices)
            v = static_cast<uint32_t>(rng.uniform_int(1ull << bits));
        auto bytes = pack(g, meta_for(h * 16, w * 16, 4, bits));
        size_t expect = (static_cast<size_t>(h) * w * bits + 7) / 8;
        REQUIRE(bytes.size() == kHeaderBytes + expect);
    }
}

TEST_CASE("pack/unpack round-trips 10^4 randomized grids bitwise") {
    Rng rng(1234);
    for (int trial = 0; trial < 10000; ++trial) {
        int log2_f = 2 + static_cast<int>(rng.uniform_int(3));  // f in {4,8,16}
        int f = 1 << log2_f;
        int h = 1 + static_cast<int>(rng.uniform_int(6));
        int w = 1 + static_cast<int>(rng.uniform_int(6));
        int bits = 1 + static_cast<int>(rng.uniform_int(16));
        IndexGrid g;
        g.h = h;
        g.w = w;
        g.indices.resize(static_cast<size_t>(h) * w);
        for (auto& v : g.indices)
            v = static_cast<uint32_t>(rng.uniform_int(1ull << bits));
        auto bytes = pack(g, meta_for(h * f, w * f, log2_f, bits));
        auto [g2, m2] = unpack(bytes);
        REQUIRE(g2.h == g.h);
        REQUIRE(g2.w == g.w);
        REQUIRE(g2.indices == g.indices);
        REQUIRE(m2.height == h * f);
        REQUIRE(m2.width == w * f);
        REQUIRE(m2.codebook_bits == bits);
        // repacking reproduces the identical byte stream
        REQUIRE(pack(g2, m2) == bytes);
    }
}

TEST_CASE("bpp is exact ladder arithmetic") {
    REQUIRE(bpp_payload(16, 4) == 0.015625);
    REQUIRE(bpp_payload(16, 1) == 0.00390625);
    REQUIRE(bpp_payload(16, 8) == 0.03125);
    REQUIRE(bpp_payload(8, 4) == 0.0625);
    REQUIRE(bpp_payload(4, 8) == 0.5);
}

TEST_CASE("payload bpp is independent of image size; header variant is not") {
    CodecConfig cfg;
    cfg.downsample = 16;
    cfg.codebook_bits = 4;
    REQUIRE(bpp_payload(cfg, 256, 256) == bpp_payload(cfg, 512, 1024));
    REQUIRE(bpp_with_header(cfg, 256, 256) > bpp_payload(cfg, 256, 256));
    REQUIRE(bpp_with_header(cfg, 1024, 1024) < bpp_with_header(cfg, 256, 256));
    CodecConfig bad = cfg;
    REQUIRE_THROWS_AS(bpp_payload(bad, 250, 256), FormatError);
}
