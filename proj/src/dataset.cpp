#include "bits/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace bits {

namespace {

constexpr char kMagic[8] = {'B', 'I', 'T', 'S', 'D', 'S', '1', '\0'};

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

void write_raw(std::FILE* f, const void* p, size_t n, const std::string& path) {
    if (std::fwrite(p, 1, n, f) != n)
        raise(ErrCode::data, "write failed: " + path);
}

void read_raw(std::FILE* f, void* p, size_t n, const std::string& path) {
    if (std::fread(p, 1, n, f) != n)
        raise(ErrCode::data, "truncated file: " + path, int(DataErr::truncated));
}

template <class T>
void write_pod(std::FILE* f, T v, const std::string& path) {
    write_raw(f, &v, sizeof(T), path);
}

template <class T>
T read_pod(std::FILE* f, const std::string& path) {
    T v{};
    read_raw(f, &v, sizeof(T), path);
    return v;
}

}  // namespace

void ImageDataset::validate() const {
    if (pixels.size() != size_t(n) * height * width * channels)
        raise(ErrCode::data, "dataset pixel buffer length inconsistent with header",
              int(DataErr::inconsistent));
    if (!labels.empty() && labels.size() != n)
        raise(ErrCode::data, "dataset label count inconsistent with n", int(DataErr::inconsistent));
    if (factor_dim > 0 && factors.size() != size_t(n) * factor_dim)
        raise(ErrCode::data, "dataset factor buffer inconsistent with n * factor_dim",
              int(DataErr::inconsistent));
}

void write_dataset(const ImageDataset& ds, const std::string& path) {
    ds.validate();
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) raise(ErrCode::data, "cannot open for write: " + path);
    write_raw(f.get(), kMagic, 8, path);
    write_pod<uint32_t>(f.get(), ds.n, path);
    write_pod<uint32_t>(f.get(), ds.height, path);
    write_pod<uint32_t>(f.get(), ds.width, path);
    write_pod<uint32_t>(f.get(), ds.channels, path);
    write_pod<uint8_t>(f.get(), ds.has_labels() ? 1 : 0, path);
    write_pod<uint8_t>(f.get(), ds.has_factors() ? 1 : 0, path);
    write_pod<uint16_t>(f.get(), ds.has_factors() ? ds.factor_dim : 0, path);
    if (!ds.pixels.empty()) write_raw(f.get(), ds.pixels.data(), ds.pixels.size(), path);
    if (ds.has_labels())
        write_raw(f.get(), ds.labels.data(), ds.labels.size() * sizeof(uint16_t), path);
    if (ds.has_factors())
        write_raw(f.get(), ds.factors.data(), ds.factors.size() * sizeof(uint16_t), path);
}

ImageDataset read_dataset(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) raise(ErrCode::data, "cannot open dataset: " + path);
    char magic[8];
    read_raw(f.get(), magic, 8, path);
    if (std::memcmp(magic, kMagic, 8) != 0)
        raise(ErrCode::data, "magic mismatch (not a BITSDS1 file): " + path,
              int(DataErr::bad_magic));
    ImageDataset ds;
    ds.n = read_pod<uint32_t>(f.get(), path);
    ds.height = read_pod<uint32_t>(f.get(), path);
    ds.width = read_pod<uint32_t>(f.get(), path);
    ds.channels = read_pod<uint32_t>(f.get(), path);
    const uint8_t has_labels = read_pod<uint8_t>(f.get(), path);
    const uint8_t has_factors = read_pod<uint8_t>(f.get(), path);
    ds.factor_dim = read_pod<uint16_t>(f.get(), path);
    if (has_factors && ds.factor_dim == 0)
        raise(ErrCode::data, "factor flag set but factor_dim is 0: " + path,
              int(DataErr::inconsistent));
    if (!has_factors) ds.factor_dim = 0;

    const int64_t npix = int64_t(ds.n) * ds.height * ds.width * ds.channels;
    ds.pixels.resize(size_t(npix));
    read_raw(f.get(), ds.pixels.data(), ds.pixels.size(), path);
    if (has_labels) {
        ds.labels.resize(ds.n);
        read_raw(f.get(), ds.labels.data(), ds.labels.size() * sizeof(uint16_t), path);
    }
    if (has_factors) {
        ds.factors.resize(size_t(ds.n) * ds.factor_dim);
        read_raw(f.get(), ds.factors.data(), ds.factors.size() * sizeof(uint16_t), path);
    }
    // trailing bytes mean the header lied about the payload
    if (std::fgetc(f.get()) != EOF)
        raise(ErrCode::data, "trailing bytes after payload: " + path, int(DataErr::inconsistent));
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// synthetic generator
// ---------------------------------------------------------------------------

namespace {

// 8 fixed hues, saturated and distinguishable after jitter
constexpr uint8_t kPalette[8][3] = {
    {230, 60, 50},   {250, 160, 40}, {235, 230, 60}, {80, 200, 70},
    {60, 200, 210},  {70, 90, 230},  {170, 70, 220}, {240, 120, 190},
};

struct Painter {
    int size;
    int channels;
    uint8_t* px;

    void set(int x, int y, const double rgb[3]) {
        if (x < 0 || y < 0 || x >= size || y >= size) return;
        uint8_t* p = px + (int64_t(y) * size + x) * channels;
        for (int c = 0; c < channels; ++c) {
            double v = rgb[c % 3];
            p[c] = uint8_t(v < 0 ? 0 : (v > 255 ? 255 : v + 0.5));
        }
    }
};

void paint_background(Painter& p, int kind, Rng& rng) {
    const double base = 30.0 + rng.uniform() * 40.0;
    const double alt = base + 25.0 + rng.uniform() * 20.0;
    for (int y = 0; y < p.size; ++y) {
        for (int x = 0; x < p.size; ++x) {
            double v = base;
            switch (kind) {
                case 0: v = base; break;
                case 1: v = ((y / 4) % 2 == 0) ? base : alt; break;               // stripes
                case 2: v = (((x / 4) + (y / 4)) % 2 == 0) ? base : alt; break;   // checker
                case 3: v = base + (alt - base) * double(x + y) / double(2 * p.size); break;
                default: v = base; break;
            }
            const double rgb[3] = {v, v, v};
            p.set(x, y, rgb);
        }
    }
}

void paint_glyph(Painter& p, int shape, const uint8_t color[3], double cx, double cy, double r) {
    const double rgb[3] = {double(color[0]), double(color[1]), double(color[2])};
    for (int y = 0; y < p.size; ++y) {
        for (int x = 0; x < p.size; ++x) {
            const double dx = x - cx, dy = y - cy;
            bool inside = false;
            switch (shape) {
                case 0:  // circle
                    inside = dx * dx + dy * dy <= r * r;
                    break;
                case 1:  // square
                    inside = std::abs(dx) <= r * 0.9 && std::abs(dy) <= r * 0.9;
                    break;
                case 2:  // upward triangle
                    inside = dy <= r && dy >= -r &&
                             std::abs(dx) <= (dy + r) * 0.58;
                    break;
                case 3:  // cross
                    inside = (std::abs(dx) <= r * 0.33 && std::abs(dy) <= r) ||
                             (std::abs(dy) <= r * 0.33 && std::abs(dx) <= r);
                    break;
                default: break;
            }
            if (inside) p.set(x, y, rgb);
        }
    }
}

// hollow bright ring, the class-independent context marker
void paint_context_ring(Painter& p, double cx, double cy, double r) {
    const double rgb[3] = {245.0, 245.0, 245.0};
    for (int y = 0; y < p.size; ++y) {
        for (int x = 0; x < p.size; ++x) {
            const double d = std::sqrt(double(x - cx) * (x - cx) + double(y - cy) * (y - cy));
            if (d <= r && d >= r * 0.55) p.set(x, y, rgb);
        }
    }
}

}  // namespace

ImageDataset generate_synthetic(const SyntheticFactorSpec& spec, uint64_t seed) {
    if (spec.image_size < 8) raise(ErrCode::config, "synthetic image_size must be >= 8");
    if (spec.samples_per_combination < 1)
        raise(ErrCode::config, "samples_per_combination must be >= 1");

    ImageDataset ds;
    ds.n = uint32_t(spec.total_samples());
    ds.height = uint32_t(spec.image_size);
    ds.width = uint32_t(spec.image_size);
    ds.channels = 3;
    ds.factor_dim = SyntheticFactorSpec::n_factors;
    ds.pixels.resize(size_t(ds.n) * ds.height * ds.width * 3);
    ds.labels.resize(ds.n);
    ds.factors.resize(size_t(ds.n) * ds.factor_dim);

    int64_t idx = 0;
    for (int shape = 0; shape < SyntheticFactorSpec::n_shapes; ++shape) {
        for (int color = 0; color < SyntheticFactorSpec::n_colors; ++color) {
            for (int bg = 0; bg < SyntheticFactorSpec::n_backgrounds; ++bg) {
                for (int ctx = 0; ctx < SyntheticFactorSpec::n_context; ++ctx) {
                    for (int rep = 0; rep < spec.samples_per_combination; ++rep, ++idx) {
                        Rng rng(derive_seed(seed, 0x53594e54u, uint64_t(idx)));
                        Painter p{spec.image_size, 3,
                                  ds.pixels.data() + idx * ds.sample_bytes()};
                        paint_background(p, bg, rng);

                        const double s = spec.image_size;
                        const double cx = s * 0.5 + rng.uniform(-0.12, 0.12) * s;
                        const double cy = s * 0.5 + rng.uniform(-0.12, 0.12) * s;
                        const double r = s * (0.18 + rng.uniform() * 0.08);
                        paint_glyph(p, shape, kPalette[color], cx, cy, r);

                        if (ctx == 1) {
                            // keep the marker inside the crop-stable region and
                            // off the glyph when the geometry allows it
                            const double mr = s * 0.09;
                            const double margin = s * 0.2;
                            double gx = margin, gy = margin;
                            bool placed = false;
                            for (int attempt = 0; attempt < 50 && !placed; ++attempt) {
                                gx = rng.uniform(margin, s - margin);
                                gy = rng.uniform(margin, s - margin);
                                placed = std::abs(gx - cx) >= r + mr ||
                                         std::abs(gy - cy) >= r + mr;
                            }
                            if (!placed) {  // tiny images: farthest corner wins
                                gx = cx < s * 0.5 ? s - margin : margin;
                                gy = cy < s * 0.5 ? s - margin : margin;
                            }
                            paint_context_ring(p, gx, gy, mr);
                        }

                        ds.labels[size_t(idx)] =
                            uint16_t(shape * SyntheticFactorSpec::n_colors + color);
                        uint16_t* fac = ds.factors.data() + idx * ds.factor_dim;
                        fac[0] = uint16_t(shape);
                        fac[1] = uint16_t(color);
                        fac[2] = uint16_t(bg);
                        fac[3] = uint16_t(ctx);
                    }
                }
            }
        }
    }
    return ds;
}

}  // namespace bits
