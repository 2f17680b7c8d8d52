#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "codl/errors.hpp"

namespace codl {

// Codec geometry and encoder/decoder sizing. The (f, bits) pair fixes the
// payload bitrate at bits / f^2 bpp.
struct CodecConfig {
    int downsample = 16;      // f, one of {4, 8, 16}
    int codebook_bits = 4;    // b, K = 2^b codebook rows
    int latent_channels = 8;  // C
    int enc_width = 32;
    int enc_blocks = 1;  // residual blocks per stage
    int dec_width = 32;
    int dec_blocks = 2;

    int codebook_size() const { return 1 << codebook_bits; }
    int log2_downsample() const {
        int f = downsample, l = 0;
        while (f > 1) {
            f >>= 1;
            ++l;
        }
        return l;
    }

    void validate() const {
        CODL_CHECK(downsample == 4 || downsample == 8 || downsample == 16, ConfigError,
                   "downsample factor must be 4, 8 or 16");
        CODL_CHECK(codebook_bits >= 1 && codebook_bits <= 16, ConfigError,
                   "codebook_bits must be in [1,16]");
        CODL_CHECK(latent_channels >= 1, ConfigError, "latent_channels must be positive");
    }
};

enum class BlockType { GlobalAttention, WindowAttention, DepthwiseConv };

inline std::string to_string(BlockType t) {
    switch (t) {
        case BlockType::GlobalAttention: return "global_attention";
        case BlockType::WindowAttention: return "window_attention";
        case BlockType::DepthwiseConv: return "depthwise_conv";
    }
    return "?";
}

inline BlockType block_type_from_string(const std::string& s) {
    if (s == "global_attention") return BlockType::GlobalAttention;
    if (s == "window_attention") return BlockType::WindowAttention;
    if (s == "depthwise_conv") return BlockType::DepthwiseConv;
    throw ConfigError("unknown block type: " + s);
}

enum class HeadType { PixelMlp, LinearUnpatchify };

enum class Parameterization { X, V };

struct BackboneConfig {
    BlockType block_type = BlockType::DepthwiseConv;
    int width = 128;  // D
    int depth = 6;    // L
    int heads = 4;    // attention variants
    int window = 3;   // window attention extent
    int patch_size = 16;
    bool timestep_conditioning = false;
    HeadType head_type = HeadType::PixelMlp;
    int pixel_head_depth = 3;  // total linear layers in the head
    int pixel_head_width = 0;  // 0 -> same as width
    int fourier_freqs = 8;     // frequency pairs for intra-patch coordinates
    int cond_channels = 32;    // D_c, matches condition decoder width

    int head_width() const { return pixel_head_width > 0 ? pixel_head_width : width; }

    void validate() const {
        CODL_CHECK(width > 0 && depth >= 0, ConfigError, "backbone width/depth invalid");
        if (block_type != BlockType::DepthwiseConv)
            CODL_CHECK(width % heads == 0, ConfigError, "width must be divisible by heads");
        CODL_CHECK(patch_size == 16, ConfigError, "patch size is fixed at 16");
    }
};

// Eq-style composite loss weights; DMD and GAN defaults follow the
// published operating point.
struct LossWeights {
    double lambda_c = 1.0;
    double lambda_dmd = 2.0;
    double lambda_gan = 0.01;

    void validate() const {
        CODL_CHECK(lambda_c >= 0 && lambda_dmd >= 0 && lambda_gan >= 0, ConfigError,
                   "loss weights must be non-negative");
    }
};

// Bitrate ladder spanning 0.0039 to 0.5 bpp with exact b/f^2 arithmetic.
struct LadderPoint {
    int downsample;
    int bits;
    double bpp;
};

inline const std::vector<LadderPoint>& bitrate_ladder() {
    static const std::vector<LadderPoint> ladder = {
        {16, 1, 0.00390625}, {16, 4, 0.015625}, {16, 8, 0.03125}, {8, 4, 0.0625}, {4, 8, 0.5},
    };
    return ladder;
}

// Pick the ladder entry whose exact bpp matches (relative tolerance 1e-9).
inline LadderPoint ladder_lookup(double bpp_target) {
    for (const auto& p : bitrate_ladder())
        if (std::abs(p.bpp - bpp_target) <= 1e-9 * std::max(1.0, std::abs(bpp_target))) return p;
    throw ConfigError("bpp_target does not match a ladder preset");
}

}  // namespace codl
