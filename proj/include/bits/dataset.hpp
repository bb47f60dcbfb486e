#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bits/common.hpp"

namespace bits {

// In-memory image container backing the BITSDS1 file format. Pixels are
// row-major, sample-major u8; labels and per-sample factor vectors optional.
struct ImageDataset {
    uint32_t n = 0, height = 0, width = 0, channels = 0;
    std::vector<uint8_t> pixels;
    std::vector<uint16_t> labels;    // empty = absent
    uint16_t factor_dim = 0;
    std::vector<uint16_t> factors;   // n * factor_dim, empty = absent

    bool has_labels() const { return !labels.empty(); }
    bool has_factors() const { return factor_dim > 0 && !factors.empty(); }
    int64_t sample_bytes() const { return int64_t(height) * width * channels; }
    const uint8_t* sample(int64_t i) const { return pixels.data() + i * sample_bytes(); }

    void validate() const;
};

// BITSDS1 container (little endian): magic "BITSDS1\0", u32 n/h/w/c,
// u8 has_labels, u8 has_factors, u16 factor_dim, pixels, labels, factors.
void write_dataset(const ImageDataset& ds, const std::string& path);
ImageDataset read_dataset(const std::string& path);

// Procedural multi-factor testbed. Class identity is the (shape, color)
// pair; background texture and the context distractor vary independently of
// class, so factor-bit mutual information can be measured against ground
// truth. Factor order per sample: shape, color, background, context.
struct SyntheticFactorSpec {
    int image_size = 32;
    int samples_per_combination = 10;

    static constexpr int n_shapes = 4;       // circle, square, triangle, cross
    static constexpr int n_colors = 8;
    static constexpr int n_backgrounds = 4;  // solid, stripes, checker, gradient
    static constexpr int n_context = 2;      // distractor ring absent/present
    static constexpr int n_factors = 4;

    int64_t total_samples() const {
        return int64_t(n_shapes) * n_colors * n_backgrounds * n_context *
               samples_per_combination;
    }
};

ImageDataset generate_synthetic(const SyntheticFactorSpec& spec, uint64_t seed);

}  // namespace bits
