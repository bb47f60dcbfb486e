#include "bits/augment.hpp"

#include <algorithm>
#include <cmath>

namespace bits {

namespace {

double realized_fraction(int cw, int ch, int w, int h) {
    return double(cw) * ch / (double(w) * h);
}

}  // namespace

// Random area-fraction crop with mild aspect jitter. Accepted crops always
// cover an area fraction inside [smin, smax]; the integer fallback search
// keeps that guarantee when the rejection loop runs out of attempts.
CropRect sample_crop_rect(int w, int h, double smin, double smax, Rng& rng) {
    for (int attempt = 0; attempt < 20; ++attempt) {
        const double s = rng.uniform(smin, smax);
        const double a = rng.uniform(0.75, 4.0 / 3.0);
        const double target = s * w * h;
        const int cw = int(std::lround(std::sqrt(target * a)));
        const int ch = int(std::lround(std::sqrt(target / a)));
        if (cw < 1 || ch < 1 || cw > w || ch > h) continue;
        const double frac = realized_fraction(cw, ch, w, h);
        if (frac < smin || frac > smax) continue;
        const int x0 = int(rng.uniform_int(w - cw + 1));
        const int y0 = int(rng.uniform_int(h - ch + 1));
        return {x0, y0, cw, ch};
    }
    // square fallback near the midpoint of the range
    const double smid = 0.5 * (smin + smax);
    int k = std::clamp(int(std::lround(std::sqrt(smid * w * h))), 1, std::min(w, h));
    for (int delta : {0, -1, 1, -2, 2}) {
        const int kk = std::clamp(k + delta, 1, std::min(w, h));
        const double frac = realized_fraction(kk, kk, w, h);
        if (frac >= smin && frac <= smax) {
            const int x0 = int(rng.uniform_int(w - kk + 1));
            const int y0 = int(rng.uniform_int(h - kk + 1));
            return {x0, y0, kk, kk};
        }
    }
    return {0, 0, w, h};  // degenerate ranges on tiny images: full crop
}

namespace {

// Bilinear resize of a crop window into (oh, ow). Identity (same size) is an
// exact copy so the identity policy reproduces the source bitwise.
Tensor<float> crop_resize(const ImageDataset& ds, int64_t index, const CropRect& r, int oh,
                          int ow) {
    const int c = int(ds.channels);
    const uint8_t* src = ds.sample(index);
    const int sw = int(ds.width);
    Tensor<float> out(Shape{oh, ow, c});
    auto src_at = [&](int y, int x, int ch) -> float {
        return float(src[(int64_t(y) * sw + x) * c + ch]) / 255.0f;
    };
    if (r.w == ow && r.h == oh) {
        for (int y = 0; y < oh; ++y)
            for (int x = 0; x < ow; ++x)
                for (int ch = 0; ch < c; ++ch)
                    out[(int64_t(y) * ow + x) * c + ch] = src_at(r.y0 + y, r.x0 + x, ch);
        return out;
    }
    const double sy = double(r.h) / oh;
    const double sx = double(r.w) / ow;
    for (int y = 0; y < oh; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y1 = std::clamp(int(std::floor(fy)), 0, r.h - 1);
        const int y2 = std::min(y1 + 1, r.h - 1);
        const double wy = std::clamp(fy - y1, 0.0, 1.0);
        for (int x = 0; x < ow; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x1 = std::clamp(int(std::floor(fx)), 0, r.w - 1);
            const int x2 = std::min(x1 + 1, r.w - 1);
            const double wx = std::clamp(fx - x1, 0.0, 1.0);
            for (int ch = 0; ch < c; ++ch) {
                const double top = (1.0 - wx) * src_at(r.y0 + y1, r.x0 + x1, ch) +
                                   wx * src_at(r.y0 + y1, r.x0 + x2, ch);
                const double bot = (1.0 - wx) * src_at(r.y0 + y2, r.x0 + x1, ch) +
                                   wx * src_at(r.y0 + y2, r.x0 + x2, ch);
                out[(int64_t(y) * ow + x) * c + ch] = float((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

void hflip(Tensor<float>& v) {
    const int h = v.dim(0), w = v.dim(1), c = v.dim(2);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w / 2; ++x)
            for (int ch = 0; ch < c; ++ch)
                std::swap(v[(int64_t(y) * w + x) * c + ch],
                          v[(int64_t(y) * w + (w - 1 - x)) * c + ch]);
}

void clamp01(Tensor<float>& v) {
    for (int64_t i = 0; i < v.size(); ++i) v[i] = std::clamp(v[i], 0.0f, 1.0f);
}

void box_blur3(Tensor<float>& v) {
    const int h = v.dim(0), w = v.dim(1), c = v.dim(2);
    Tensor<float> src = v;
    auto at = [&](int y, int x, int ch) {
        y = std::clamp(y, 0, h - 1);
        x = std::clamp(x, 0, w - 1);
        return src[(int64_t(y) * w + x) * c + ch];
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch) {
                float acc = 0.0f;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) acc += at(y + dy, x + dx, ch);
                v[(int64_t(y) * w + x) * c + ch] = acc / 9.0f;
            }
}

Tensor<float> make_one_view(const ImageDataset& ds, int64_t index, const AugmentPolicy& p,
                            double smin, double smax, int oh, int ow, Rng& rng) {
    const CropRect rect = sample_crop_rect(int(ds.width), int(ds.height), smin, smax, rng);
    Tensor<float> v = crop_resize(ds, index, rect, oh, ow);

    if (rng.bernoulli(p.flip_prob)) hflip(v);

    const double bshift = rng.uniform(-p.brightness, p.brightness);
    const double cfac = 1.0 + rng.uniform(-p.contrast, p.contrast);
    if (bshift != 0.0)
        for (int64_t i = 0; i < v.size(); ++i) v[i] = float(v[i] + bshift);
    if (cfac != 1.0) {
        double mean = 0.0;
        for (int64_t i = 0; i < v.size(); ++i) mean += v[i];
        mean /= double(v.size());
        for (int64_t i = 0; i < v.size(); ++i) v[i] = float((v[i] - mean) * cfac + mean);
    }
    clamp01(v);

    if (rng.bernoulli(p.blur_prob)) box_blur3(v);

    if (p.noise_std > 0.0) {
        for (int64_t i = 0; i < v.size(); ++i) v[i] = float(v[i] + rng.normal(0.0, p.noise_std));
        clamp01(v);
    }
    return v;
}

}  // namespace

ViewSet make_views(const ImageDataset& ds, int64_t index, const AugmentPolicy& policy, int out_h,
                   int out_w, int local_h, int local_w, Rng& rng) {
    policy.validate();
    ViewSet vs;
    for (int g = 0; g < policy.n_global; ++g)
        vs.globals.push_back(
            make_one_view(ds, index, policy, policy.crop_min, policy.crop_max, out_h, out_w, rng));
    for (int l = 0; l < policy.n_local; ++l)
        vs.locals.push_back(make_one_view(ds, index, policy, policy.local_crop_min,
                                          policy.local_crop_max, local_h, local_w, rng));
    return vs;
}

Tensor<float> center_view(const ImageDataset& ds, int64_t index, int out_h, int out_w) {
    if (int(ds.height) < out_h || int(ds.width) < out_w)
        raise(ErrCode::data, "dataset images smaller than model input " + std::to_string(out_h) +
                                 "x" + std::to_string(out_w));
    const CropRect rect{(int(ds.width) - out_w) / 2, (int(ds.height) - out_h) / 2, out_w, out_h};
    return crop_resize(ds, index, rect, out_h, out_w);
}

ChannelStats compute_channel_stats(const ImageDataset& ds) {
    const int c = int(ds.channels);
    ChannelStats st;
    st.mean.assign(size_t(c), 0.0);
    st.stdev.assign(size_t(c), 0.0);
    const int64_t per = int64_t(ds.n) * ds.height * ds.width;
    if (per == 0) raise(ErrCode::data, "empty dataset");
    for (int64_t i = 0; i < per; ++i)
        for (int ch = 0; ch < c; ++ch)
            st.mean[size_t(ch)] += double(ds.pixels[size_t(i * c + ch)]) / 255.0;
    for (int ch = 0; ch < c; ++ch) st.mean[size_t(ch)] /= double(per);
    for (int64_t i = 0; i < per; ++i)
        for (int ch = 0; ch < c; ++ch) {
            const double d = double(ds.pixels[size_t(i * c + ch)]) / 255.0 - st.mean[size_t(ch)];
            st.stdev[size_t(ch)] += d * d;
        }
    for (int ch = 0; ch < c; ++ch)
        st.stdev[size_t(ch)] = std::max(std::sqrt(st.stdev[size_t(ch)] / double(per)), 1e-3);
    return st;
}

void normalize_view(Tensor<float>& view, const ChannelStats& stats) {
    const int c = view.dim(2);
    if (int(stats.mean.size()) != c)
        raise(ErrCode::invalid, "normalize_view: channel stats dimension mismatch");
    const int64_t pixels = view.size() / c;
    for (int64_t i = 0; i < pixels; ++i)
        for (int ch = 0; ch < c; ++ch) {
            float& x = view[i * c + ch];
            x = float((double(x) - stats.mean[size_t(ch)]) / stats.stdev[size_t(ch)]);
        }
}

Tensor<float> stack_views(const std::vector<ViewSet>& sets, bool global, int view_idx) {
    if (sets.empty()) raise(ErrCode::invalid, "stack_views: empty batch");
    const Tensor<float>& first =
        global ? sets[0].globals[size_t(view_idx)] : sets[0].locals[size_t(view_idx)];
    const int h = first.dim(0), w = first.dim(1), c = first.dim(2);
    Tensor<float> out(Shape{int(sets.size()), h, w, c});
    const int64_t per = first.size();
    for (size_t s = 0; s < sets.size(); ++s) {
        const Tensor<float>& v =
            global ? sets[s].globals[size_t(view_idx)] : sets[s].locals[size_t(view_idx)];
        if (v.size() != per) raise(ErrCode::invalid, "stack_views: inconsistent view shapes");
        std::copy(v.data(), v.data() + per, out.data() + int64_t(s) * per);
    }
    return out;
}

}  // namespace bits
