#pragma once

#include <vector>

#include "bits/dataset.hpp"
#include "bits/tensor.hpp"

namespace bits {

// Stochastic two-view / multi-crop policy. Pixel values live in [0,1] floats
// from here on; every stage clamps back into range.
struct AugmentPolicy {
    double crop_min = 0.4, crop_max = 1.0;              // global views, area fraction
    double local_crop_min = 0.1, local_crop_max = 0.4;  // local views
    double flip_prob = 0.5;
    double brightness = 0.4;  // additive jitter, +- range
    double contrast = 0.4;    // multiplicative jitter around the view mean
    double noise_std = 0.02;
    double blur_prob = 0.5;  // 3x3 box blur
    int n_global = 2;
    int n_local = 0;

    void validate() const {
        if (!(crop_min > 0.0 && crop_min <= crop_max && crop_max <= 1.0))
            raise(ErrCode::config, "crop_scale must satisfy 0 < min <= max <= 1");
        if (!(local_crop_min > 0.0 && local_crop_min <= local_crop_max && local_crop_max <= 1.0))
            raise(ErrCode::config, "local crop_scale must satisfy 0 < min <= max <= 1");
        if (n_global < 1) raise(ErrCode::config, "n_global must be >= 1");
        if (n_local < 0) raise(ErrCode::config, "n_local must be >= 0");
    }
};

struct ViewSet {
    std::vector<Tensor<float>> globals;  // [H,W,C] each
    std::vector<Tensor<float>> locals;
};

// Augmented views of one sample. Every stochastic choice is drawn from the
// passed rng; per-sample seeding contract: rng = Rng(derive_seed(seed, epoch,
// sample_index)). Globals are rendered at (out_h, out_w), locals at
// (local_h, local_w).
ViewSet make_views(const ImageDataset& ds, int64_t index, const AugmentPolicy& policy, int out_h,
                   int out_w, int local_h, int local_w, Rng& rng);

// Crop window sampler behind make_views: the realized area fraction always
// lands inside [smin, smax].
struct CropRect {
    int x0 = 0, y0 = 0, w = 0, h = 0;
};
CropRect sample_crop_rect(int w, int h, double smin, double smax, Rng& rng);

// Deterministic evaluation view: center crop to (out_h, out_w), no jitter.
Tensor<float> center_view(const ImageDataset& ds, int64_t index, int out_h, int out_w);

// Per-channel mean/std of the training pixels in [0,1]; std floored at 1e-3.
struct ChannelStats {
    std::vector<double> mean, stdev;
};
ChannelStats compute_channel_stats(const ImageDataset& ds);

void normalize_view(Tensor<float>& view, const ChannelStats& stats);

// Stacks one view slot across samples into a [N,H,W,C] batch.
Tensor<float> stack_views(const std::vector<ViewSet>& sets, bool global, int view_idx);

}  // namespace bits
