#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "codl/configs.hpp"

namespace codl {

// Analytic multiply-accumulate counts for every module, mirroring the
// network layouts in codec.hpp / backbone.hpp. Dense = in*out, conv =
// Hout*Wout*Cin*Cout*k^2/groups, attention = 2*N^2*D (QK^T and attn*V,
// summed over heads) plus the four projections.

inline int64_t dense_macs(int64_t in, int64_t out) { return in * out; }

inline int64_t conv_macs(int64_t Ho, int64_t Wo, int64_t Cin, int64_t Cout, int64_t k,
                         int64_t groups = 1) {
    return Ho * Wo * Cin * Cout * k * k / groups;
}

struct MacReport {
    int64_t encoder = 0;
    int64_t cond_decoder = 0;
    int64_t backbone = 0;
    int64_t pixel_head = 0;

    int64_t total() const { return encoder + cond_decoder + backbone + pixel_head; }
    double kmacs_per_pixel(int64_t macs, int H, int W) const {
        return static_cast<double>(macs) / (static_cast<double>(H) * W) / 1000.0;
    }
};

inline int64_t encoder_macs(const CodecConfig& c, int H, int W) {
    int64_t m = 0;
    int64_t h = H, w = W;
    const int64_t we = c.enc_width;
    m += conv_macs(h, w, 3, we, 3);  // stem
    for (int s = 0; s < c.log2_downsample(); ++s) {
        for (int r = 0; r < c.enc_blocks; ++r) m += 2 * conv_macs(h, w, we, we, 3);
        h /= 2;
        w /= 2;
        m += conv_macs(h, w, we, we, 3);  // strided downsample
    }
    for (int r = 0; r < c.enc_blocks; ++r) m += 2 * conv_macs(h, w, we, we, 3);
    m += conv_macs(h, w, we, c.latent_channels, 1);  // latent projection
    return m;
}

inline int64_t cond_decoder_macs(const CodecConfig& c, int H, int W) {
    int64_t m = 0;
    int64_t h = H / c.downsample, w = W / c.downsample;
    const int64_t wd = c.dec_width;
    m += conv_macs(h, w, c.latent_channels, wd, 1);  // input projection
    int resample = 0;
    for (int f = c.downsample; f < 16; f *= 2) ++resample;
    for (int s = 0; s < resample; ++s) {
        h /= 2;
        w /= 2;
        m += conv_macs(h, w, wd, wd, 3);
    }
    for (int r = 0; r < c.dec_blocks; ++r) m += 2 * conv_macs(h, w, wd, wd, 3);
    m += conv_macs(h, w, wd, wd, 3);  // output conv
    return m;
}

inline int64_t backbone_block_macs(const BackboneConfig& b, int64_t N) {
    const int64_t D = b.width;
    int64_t m = 0;
    switch (b.block_type) {
        case BlockType::GlobalAttention:
            m += 4 * N * D * D;  // q,k,v,out projections
            m += 2 * N * N * D;  // logits + weighted values
            break;
        case BlockType::WindowAttention: {
            int64_t targets = std::min<int64_t>(static_cast<int64_t>(b.window) * b.window, N);
            m += 4 * N * D * D;
            m += 2 * N * targets * D;
            break;
        }
        case BlockType::DepthwiseConv:
            m += N * D * 9;              // depthwise 3x3 mixer
            m += 2 * (D * (D / 4));      // squeeze-excitation dense pair (per image)
            break;
    }
    m += 8 * N * D * D;  // pointwise MLP, expansion 4
    if (b.timestep_conditioning) m += 2 * dense_macs(D, 2 * D);  // per-block modulation
    return m;
}

inline int64_t backbone_macs(const BackboneConfig& b, const CodecConfig& c, int H, int W) {
    const int64_t P = b.patch_size;
    const int64_t N = (static_cast<int64_t>(H) / P) * (W / P);
    const int64_t D = b.width;
    int64_t m = 0;
    m += N * dense_macs(P * P * 3, D);        // patch embedding
    m += N * dense_macs(b.cond_channels, D);  // condition projection
    (void)c;
    if (b.timestep_conditioning) m += dense_macs(D, D);  // timestep embedding MLP
    for (int l = 0; l < b.depth; ++l) m += backbone_block_macs(b, N);
    return m;
}

inline int64_t pixel_head_macs(const BackboneConfig& b, int H, int W) {
    const int64_t P = b.patch_size;
    const int64_t N = (static_cast<int64_t>(H) / P) * (W / P);
    if (b.head_type == HeadType::LinearUnpatchify)
        return N * dense_macs(b.width, P * P * 3);
    const int64_t pixels = static_cast<int64_t>(H) * W;
    const int64_t in = b.width + 3 + 4 * b.fourier_freqs;  // token + rgb + sin/cos pairs x 2 axes
    const int64_t hw = b.head_width();
    int64_t per_pixel = dense_macs(in, hw);
    for (int l = 0; l < b.pixel_head_depth - 2; ++l) per_pixel += dense_macs(hw, hw);
    per_pixel += dense_macs(hw, 3);
    return pixels * per_pixel;
}

inline MacReport count_macs(const CodecConfig& c, const BackboneConfig& b, int H, int W) {
    CODL_CHECK(H % c.downsample == 0 && W % c.downsample == 0, ConfigError,
               "count_macs: dims not divisible by downsample factor");
    CODL_CHECK(H % b.patch_size == 0 && W % b.patch_size == 0, ConfigError,
               "count_macs: dims not divisible by patch size");
    MacReport r;
    r.encoder = encoder_macs(c, H, W);
    r.cond_decoder = cond_decoder_macs(c, H, W);
    r.backbone = backbone_macs(b, c, H, W);
    r.pixel_head = pixel_head_macs(b, H, W);
    return r;
}

inline std::string mac_report_text(const MacReport& r, int H, int W) {
    std::string s;
    auto line = [&](const char* name, int64_t m) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%-14s %14lld MACs  %10.2f kMACs/px\n", name,
                      static_cast<long long>(m), r.kmacs_per_pixel(m, H, W));
        s += buf;
    };
    line("encoder", r.encoder);
    line("cond_decoder", r.cond_decoder);
    line("backbone", r.backbone);
    line("pixel_head", r.pixel_head);
    line("total", r.total());
    return s;
}

}  // namespace codl
