#pragma once

#include <cstdint>

#include "bits/common.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace bits {

// Runs body(i) for i in [0, n). Bodies must write disjoint outputs; the
// per-index work is serial, so results are bitwise identical for any
// thread count.
template <class F>
inline void parallel_for(int64_t n, F&& body) {
#ifdef _OPENMP
    const int nt = max_threads();
    if (nt > 1 && n > 1) {
#pragma omp parallel for schedule(static) num_threads(nt)
        for (int64_t i = 0; i < n; ++i) body(i);
        return;
    }
#endif
    for (int64_t i = 0; i < n; ++i) body(i);
}

namespace kern {

// C[M x N] = A[M x K] * B[K x N]   (overwrite), parallel over rows of C.
template <class Real>
void gemm_nn(const Real* a, const Real* b, Real* c, int64_t m, int64_t k, int64_t n) {
    parallel_for(m, [=](int64_t i) {
        Real* ci = c + i * n;
        for (int64_t j = 0; j < n; ++j) ci[j] = Real(0);
        const Real* ai = a + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const Real aip = ai[p];
            const Real* bp = b + p * n;
            for (int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
        }
    });
}

// C[M x K] += G[M x N] * B^T  with B[K x N], parallel over rows of C.
template <class Real>
void gemm_nt_acc(const Real* g, const Real* b, Real* c, int64_t m, int64_t k, int64_t n) {
    parallel_for(m, [=](int64_t i) {
        const Real* gi = g + i * n;
        Real* ci = c + i * k;
        for (int64_t p = 0; p < k; ++p) {
            const Real* bp = b + p * n;
            Real acc = Real(0);
            for (int64_t j = 0; j < n; ++j) acc += gi[j] * bp[j];
            ci[p] += acc;
        }
    });
}

// C[K x N] += A^T * G  with A[M x K], G[M x N], parallel over rows of C
// (each row of C owned by one thread; summation order over M is fixed).
template <class Real>
void gemm_tn_acc(const Real* a, const Real* g, Real* c, int64_t m, int64_t k, int64_t n) {
    parallel_for(k, [=](int64_t p) {
        Real* cp = c + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const Real aip = a[i * k + p];
            if (aip == Real(0)) continue;
            const Real* gi = g + i * n;
            for (int64_t j = 0; j < n; ++j) cp[j] += aip * gi[j];
        }
    });
}

// im2col for NHWC input, one sample. col has [oh*ow, kh*kw*c] row-major.
template <class Real>
void im2col(const Real* x, int h, int w, int c, int kh, int kw, int stride, int pad,
            int oh, int ow, Real* col) {
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            Real* row = col + (int64_t(oy) * ow + ox) * (int64_t(kh) * kw * c);
            for (int ky = 0; ky < kh; ++ky) {
                const int y = oy * stride - pad + ky;
                for (int kx = 0; kx < kw; ++kx) {
                    const int xx = ox * stride - pad + kx;
                    Real* dst = row + (int64_t(ky) * kw + kx) * c;
                    if (y < 0 || y >= h || xx < 0 || xx >= w) {
                        for (int ch = 0; ch < c; ++ch) dst[ch] = Real(0);
                    } else {
                        const Real* src = x + (int64_t(y) * w + xx) * c;
                        for (int ch = 0; ch < c; ++ch) dst[ch] = src[ch];
                    }
                }
            }
        }
    }
}

// Scatter-add of col gradients back into the input image (one sample).
template <class Real>
void col2im_acc(const Real* col, int h, int w, int c, int kh, int kw, int stride, int pad,
                int oh, int ow, Real* gx) {
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const Real* row = col + (int64_t(oy) * ow + ox) * (int64_t(kh) * kw * c);
            for (int ky = 0; ky < kh; ++ky) {
                const int y = oy * stride - pad + ky;
                if (y < 0 || y >= h) continue;
                for (int kx = 0; kx < kw; ++kx) {
                    const int xx = ox * stride - pad + kx;
                    if (xx < 0 || xx >= w) continue;
                    const Real* src = row + (int64_t(ky) * kw + kx) * c;
                    Real* dst = gx + (int64_t(y) * w + xx) * c;
                    for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
            }
        }
    }
}

}  // namespace kern
}  // namespace bits
