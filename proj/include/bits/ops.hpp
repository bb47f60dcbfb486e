#pragma once

#include <atomic>
#include <cmath>
#include <memory>
#include <vector>

#include "bits/kernels.hpp"
#include "bits/tape.hpp"

namespace bits {

namespace testing {
// Verification-suite mutation hook: flips the sign of the coding-rate
// gradient so the finite-difference checks must catch it.
inline std::atomic<bool> logdet_grad_sign_flip{false};
}  // namespace testing

namespace detail {

template <class Real>
inline void acc(Tensor<Real>& dst, const Tensor<Real>& src) {
    for (int64_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// Lower-triangular Cholesky in place; returns false if a pivot is not positive.
inline bool cholesky(std::vector<double>& m, int n) {
    for (int j = 0; j < n; ++j) {
        double d = m[size_t(j) * n + j];
        for (int k = 0; k < j; ++k) d -= m[size_t(j) * n + k] * m[size_t(j) * n + k];
        if (!(d > 0.0)) return false;
        const double ljj = std::sqrt(d);
        m[size_t(j) * n + j] = ljj;
        for (int i = j + 1; i < n; ++i) {
            double s = m[size_t(i) * n + j];
            for (int k = 0; k < j; ++k) s -= m[size_t(i) * n + k] * m[size_t(j) * n + k];
            m[size_t(i) * n + j] = s / ljj;
        }
    }
    return true;
}

// Solves (L L^T) y = b given the Cholesky factor L (lower, row-major).
inline void cholesky_solve(const std::vector<double>& l, int n, const double* b, double* y) {
    for (int i = 0; i < n; ++i) {
        double s = b[i];
        for (int k = 0; k < i; ++k) s -= l[size_t(i) * n + k] * y[k];
        y[i] = s / l[size_t(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = y[i];
        for (int k = i + 1; k < n; ++k) s -= l[size_t(k) * n + i] * y[k];
        y[i] = s / l[size_t(i) * n + i];
    }
}

template <class Real>
inline Real stable_sigmoid(Real x) {
    if (x >= Real(0)) return Real(1) / (Real(1) + std::exp(-x));
    const Real e = std::exp(x);
    return e / (Real(1) + e);
}

template <class Real>
void elementwise_map(const Tensor<Real>& in, Tensor<Real>& out, Real (*f)(Real)) {
    const int64_t n = in.size();
    const Real* src = in.data();
    Real* dst = out.data();
    for (int64_t i = 0; i < n; ++i) dst[i] = f(src[i]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// element-wise / affine primitives
// ---------------------------------------------------------------------------

template <class Real>
Value<Real> add(Value<Real> a, Value<Real> b) {
    Tape<Real>& t = *a.tape;
    check_same_shape(a.val(), b.val(), "add");
    Tensor<Real> out = a.val();
    detail::acc(out, b.val());
    const bool rg = a.requires_grad() || b.requires_grad();
    const int ia = a.id, ib = b.id;
    return t.make(std::move(out), rg, [ia, ib](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        if (tp.node(ia).requires_grad) detail::acc(tp.grad(ia), g);
        if (tp.node(ib).requires_grad) detail::acc(tp.grad(ib), g);
    });
}

template <class Real>
Value<Real> sub(Value<Real> a, Value<Real> b) {
    Tape<Real>& t = *a.tape;
    check_same_shape(a.val(), b.val(), "sub");
    Tensor<Real> out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] -= b.val()[i];
    const bool rg = a.requires_grad() || b.requires_grad();
    const int ia = a.id, ib = b.id;
    return t.make(std::move(out), rg, [ia, ib](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        if (tp.node(ia).requires_grad) detail::acc(tp.grad(ia), g);
        if (tp.node(ib).requires_grad) {
            Tensor<Real>& gb = tp.grad(ib);
            for (int64_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <class Real>
Value<Real> mul(Value<Real> a, Value<Real> b) {
    Tape<Real>& t = *a.tape;
    check_same_shape(a.val(), b.val(), "mul");
    Tensor<Real> out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= b.val()[i];
    const bool rg = a.requires_grad() || b.requires_grad();
    const int ia = a.id, ib = b.id;
    return t.make(std::move(out), rg, [ia, ib](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        if (tp.node(ia).requires_grad) {
            Tensor<Real>& ga = tp.grad(ia);
            const Tensor<Real>& vb = tp.value(ib);
            for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (tp.node(ib).requires_grad) {
            Tensor<Real>& gb = tp.grad(ib);
            const Tensor<Real>& va = tp.value(ia);
            for (int64_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

template <class Real>
Value<Real> scale(Value<Real> a, double s) {
    Tape<Real>& t = *a.tape;
    Tensor<Real> out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = Real(double(out[i]) * s);
    const int ia = a.id;
    return t.make(std::move(out), a.requires_grad(), [ia, s](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        Tensor<Real>& ga = tp.grad(ia);
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += Real(double(g[i]) * s);
    });
}

template <class Real>
Value<Real> add_scalar(Value<Real> a, double s) {
    Tape<Real>& t = *a.tape;
    Tensor<Real> out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = Real(double(out[i]) + s);
    const int ia = a.id;
    return t.make(std::move(out), a.requires_grad(), [ia](Tape<Real>& tp, int self) {
        detail::acc(tp.grad(ia), tp.grad(self));
    });
}

// a[N x M] + row vector b[M]
template <class Real>
Value<Real> add_bias(Value<Real> a, Value<Real> b) {
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& av = a.val();
    const Tensor<Real>& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 1 || av.dim(1) != bv.dim(0))
        raise(ErrCode::invalid, "add_bias: shape mismatch " + shape_str(av.shape()) + " vs " +
                                    shape_str(bv.shape()));
    const int n = av.dim(0), m = av.dim(1);
    Tensor<Real> out = av;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out.at(i, j) += bv[j];
    const bool rg = a.requires_grad() || b.requires_grad();
    const int ia = a.id, ib = b.id;
    return t.make(std::move(out), rg, [ia, ib, n, m](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        if (tp.node(ia).requires_grad) detail::acc(tp.grad(ia), g);
        if (tp.node(ib).requires_grad) {
            Tensor<Real>& gb = tp.grad(ib);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) gb[j] += g[size_t(i) * m + j];
        }
    });
}

template <class Real>
Value<Real> relu(Value<Real> a) {
    Tape<Real>& t = *a.tape;
    Tensor<Real> out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > Real(0) ? out[i] : Real(0);
    const int ia = a.id;
    return t.make(std::move(out), a.requires_grad(), [ia](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        const Tensor<Real>& x = tp.value(ia);
        Tensor<Real>& ga = tp.grad(ia);
        for (int64_t i = 0; i < ga.size(); ++i)
            if (x[i] > Real(0)) ga[i] += g[i];
    });
}

namespace detail {

inline float gauss_cdf(float x) { return 0.5f * (1.0f + erff(x * 0.70710678f)); }
inline double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x * 0.7071067811865475)); }

}  // namespace detail

// exact GELU: x * Phi(x); Phi is cached for the backward pass so only the
// cheap (vectorizable) exp remains there.
template <class Real>
Value<Real> gelu(Value<Real> a) {
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& x = a.val();
    Tensor<Real> out(x.shape());
    const bool rg = a.requires_grad();
    auto cdf = rg ? std::make_shared<std::vector<Real>>(size_t(x.size()))
                  : std::shared_ptr<std::vector<Real>>();
    for (int64_t i = 0; i < x.size(); ++i) {
        const Real p = detail::gauss_cdf(x[i]);
        out[i] = x[i] * p;
        if (rg) (*cdf)[size_t(i)] = p;
    }
    const int ia = a.id;
    return t.make(std::move(out), rg, [ia, cdf](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        const Tensor<Real>& xv = tp.value(ia);
        Tensor<Real>& ga = tp.grad(ia);
        constexpr Real inv_sqrt2pi = Real(0.3989422804014327);
        for (int64_t i = 0; i < ga.size(); ++i) {
            const Real x2 = xv[i];
            const Real pdf = std::exp(Real(-0.5) * x2 * x2) * inv_sqrt2pi;
            ga[i] += g[i] * ((*cdf)[size_t(i)] + x2 * pdf);
        }
    });
}

template <class Real>
Value<Real> sigmoid(Value<Real> a) {
    Tape<Real>& t = *a.tape;
    Tensor<Real> out = a.val();
    for (int64_t i = 0; i < out.size(); ++i) out[i] = detail::stable_sigmoid(out[i]);
    const int ia = a.id;
    return t.make(std::move(out), a.requires_grad(), [ia](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        const Tensor<Real>& s = tp.value(self);
        Tensor<Real>& ga = tp.grad(ia);
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * s[i] * (Real(1) - s[i]);
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <class Real>
Value<Real> reshape(Value<Real> a, Shape shape) {
    Tape<Real>& t = *a.tape;
    if (shape_numel(shape) != a.val().size())
        raise(ErrCode::invalid, "reshape: element count mismatch " + shape_str(a.shape()) +
                                    " -> " + shape_str(shape));
    Tensor<Real> out(std::move(shape), a.val().vec());
    const int ia = a.id;
    return t.make(std::move(out), a.requires_grad(), [ia](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        Tensor<Real>& ga = tp.grad(ia);
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
    });
}

// [N, ...] -> [N, prod(rest)]
template <class Real>
Value<Real> flatten(Value<Real> a) {
    const Shape& s = a.shape();
    if (s.size() < 2) raise(ErrCode::invalid, "flatten: rank must be >= 2, got " + shape_str(s));
    int64_t rest = 1;
    for (size_t i = 1; i < s.size(); ++i) rest *= s[i];
    return reshape(a, Shape{s[0], int(rest)});
}

// vertical concatenation of [Ni x D] blocks
template <class Real>
Value<Real> concat_rows(const std::vector<Value<Real>>& parts) {
    if (parts.empty()) raise(ErrCode::invalid, "concat_rows: no inputs");
    Tape<Real>& t = *parts[0].tape;
    const int d = parts[0].val().dim(1);
    int total = 0;
    bool rg = false;
    for (const auto& p : parts) {
        if (p.val().rank() != 2 || p.val().dim(1) != d)
            raise(ErrCode::invalid, "concat_rows: shape mismatch " + shape_str(p.shape()));
        total += p.val().dim(0);
        rg = rg || p.requires_grad();
    }
    Tensor<Real> out(Shape{total, d});
    int64_t off = 0;
    std::vector<int> ids;
    std::vector<int> rows;
    for (const auto& p : parts) {
        const Tensor<Real>& v = p.val();
        std::copy(v.data(), v.data() + v.size(), out.data() + off);
        off += v.size();
        ids.push_back(p.id);
        rows.push_back(v.dim(0));
    }
    return t.make(std::move(out), rg, [ids, rows, d](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        int64_t off = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
            const int64_t cnt = int64_t(rows[k]) * d;
            if (tp.node(ids[k]).requires_grad) {
                Tensor<Real>& gk = tp.grad(ids[k]);
                for (int64_t i = 0; i < cnt; ++i) gk[i] += g[off + i];
            }
            off += cnt;
        }
    });
}

template <class Real>
Value<Real> stop_gradient(Value<Real> a) {
    return a.tape->constant(a.val());
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class Real>
Value<Real> sum_all(Value<Real> a) {
    Tape<Real>& t = *a.tape;
    double s = 0.0;
    for (int64_t i = 0; i < a.val().size(); ++i) s += double(a.val()[i]);
    const int ia = a.id;
    return t.make(Tensor<Real>::scalar(Real(s)), a.requires_grad(), [ia](Tape<Real>& tp, int self) {
        const Real g = tp.grad(self)[0];
        Tensor<Real>& ga = tp.grad(ia);
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

template <class Real>
Value<Real> mean_all(Value<Real> a) {
    Tape<Real>& t = *a.tape;
    const int64_t n = a.val().size();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += double(a.val()[i]);
    s /= double(n);
    const int ia = a.id;
    return t.make(Tensor<Real>::scalar(Real(s)), a.requires_grad(), [ia, n](Tape<Real>& tp, int self) {
        const Real g = Real(double(tp.grad(self)[0]) / double(n));
        Tensor<Real>& ga = tp.grad(ia);
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
}

// rank-2 only; axis 0 sums columns (out [cols]), axis 1 sums rows (out [rows])
template <class Real>
Value<Real> sum_axis(Value<Real> a, int axis, bool mean = false) {
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& v = a.val();
    if (v.rank() != 2 || (axis != 0 && axis != 1))
        raise(ErrCode::invalid, "sum_axis: need rank-2 input and axis in {0,1}, got " +
                                    shape_str(v.shape()));
    const int n = v.dim(0), m = v.dim(1);
    const double denom = mean ? (axis == 0 ? double(n) : double(m)) : 1.0;
    Tensor<Real> out(axis == 0 ? Shape{m} : Shape{n});
    if (axis == 0) {
        for (int j = 0; j < m; ++j) {
            double s = 0.0;
            for (int i = 0; i < n; ++i) s += double(v.at(i, j));
            out[j] = Real(s / denom);
        }
    } else {
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < m; ++j) s += double(v.at(i, j));
            out[i] = Real(s / denom);
        }
    }
    const int ia = a.id;
    return t.make(std::move(out), a.requires_grad(),
                  [ia, axis, n, m, denom](Tape<Real>& tp, int self) {
                      const Tensor<Real>& g = tp.grad(self);
                      Tensor<Real>& ga = tp.grad(ia);
                      for (int i = 0; i < n; ++i)
                          for (int j = 0; j < m; ++j)
                              ga[size_t(i) * m + j] +=
                                  Real(double(g[axis == 0 ? j : i]) / denom);
                  });
}

template <class Real>
Value<Real> mean_axis(Value<Real> a, int axis) {
    return sum_axis(a, axis, true);
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <class Real>
Value<Real> matmul(Value<Real> a, Value<Real> b) {
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& av = a.val();
    const Tensor<Real>& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0))
        raise(ErrCode::invalid, "matmul: shape mismatch " + shape_str(av.shape()) + " vs " +
                                    shape_str(bv.shape()));
    const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor<Real> out(Shape{m, n});
    kern::gemm_nn(av.data(), bv.data(), out.data(), m, k, n);
    const bool rg = a.requires_grad() || b.requires_grad();
    const int ia = a.id, ib = b.id;
    return t.make(std::move(out), rg, [ia, ib, m, k, n](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        if (tp.node(ia).requires_grad)
            kern::gemm_nt_acc(g.data(), tp.value(ib).data(), tp.grad(ia).data(), m, k, n);
        if (tp.node(ib).requires_grad)
            kern::gemm_tn_acc(tp.value(ia).data(), g.data(), tp.grad(ib).data(), m, k, n);
    });
}

// Row-wise x / (||x|| + 1e-12); the jitter keeps zero rows finite.
template <class Real>
Value<Real> l2_normalize_rows(Value<Real> a) {
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& v = a.val();
    if (v.rank() != 2)
        raise(ErrCode::invalid, "l2_normalize_rows: need rank-2, got " + shape_str(v.shape()));
    const int n = v.dim(0), d = v.dim(1);
    Tensor<Real> out(v.shape());
    auto norms = std::make_shared<std::vector<double>>(size_t(n));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += double(v.at(i, j)) * double(v.at(i, j));
        const double n0 = std::sqrt(s);
        (*norms)[size_t(i)] = n0;
        const double inv = 1.0 / (n0 + 1e-12);
        for (int j = 0; j < d; ++j) out.at(i, j) = Real(double(v.at(i, j)) * inv);
    }
    const int ia = a.id;
    return t.make(std::move(out), a.requires_grad(), [ia, n, d, norms](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        const Tensor<Real>& x = tp.value(ia);
        Tensor<Real>& ga = tp.grad(ia);
        for (int i = 0; i < n; ++i) {
            const double n0 = (*norms)[size_t(i)];
            const double nn = n0 + 1e-12;
            const double inv0 = n0 > 0.0 ? 1.0 / n0 : 0.0;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += double(g[size_t(i) * d + j]) * double(x.at(i, j));
            const double coef = dot / (nn * nn) * inv0;
            for (int j = 0; j < d; ++j)
                ga[size_t(i) * d + j] +=
                    Real(double(g[size_t(i) * d + j]) / nn - coef * double(x.at(i, j)));
        }
    });
}

// Biased covariance of the rows: (1/N) sum_i (x_i - mean)(x_i - mean)^T.
template <class Real>
Value<Real> batch_cov(Value<Real> a) {
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& v = a.val();
    if (v.rank() != 2 || v.dim(0) < 2)
        raise(ErrCode::invalid, "batch_cov: need rank-2 with >= 2 rows, got " + shape_str(v.shape()));
    const int n = v.dim(0), d = v.dim(1);
    auto centered = std::make_shared<Tensor<Real>>(v.shape());
    std::vector<double> mean(size_t(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mean[size_t(j)] += double(v.at(i, j));
    for (int j = 0; j < d; ++j) mean[size_t(j)] /= double(n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            centered->at(i, j) = Real(double(v.at(i, j)) - mean[size_t(j)]);
    Tensor<Real> out(Shape{d, d});
    kern::gemm_tn_acc(centered->data(), centered->data(), out.data(), n, d, d);
    const Real invn = Real(1.0 / double(n));
    for (int64_t i = 0; i < out.size(); ++i) out[i] *= invn;
    const int ia = a.id;
    return t.make(std::move(out), a.requires_grad(), [ia, n, d, centered](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        Tensor<Real> sym(Shape{d, d});
        for (int r = 0; r < d; ++r)
            for (int c = 0; c < d; ++c) sym.at(r, c) = g.at(r, c) + g.at(c, r);
        // dX += (1/N) * centered * (G + G^T)
        Tensor<Real> dx(Shape{n, d});
        kern::gemm_nn(centered->data(), sym.data(), dx.data(), n, d, d);
        Tensor<Real>& ga = tp.grad(ia);
        const Real invn2 = Real(1.0 / double(n));
        for (int64_t i = 0; i < ga.size(); ++i) ga[i] += dx[i] * invn2;
    });
}

// ---------------------------------------------------------------------------
// convolution / pooling (NHWC)
// ---------------------------------------------------------------------------

// x [N,H,W,C], w [KH,KW,C,OC], b [OC]
template <class Real>
Value<Real> conv2d(Value<Real> x, Value<Real> w, Value<Real> b, int stride, int pad) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& xv = x.val();
    const Tensor<Real>& wv = w.val();
    const Tensor<Real>& bv = b.val();
    if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(3) != wv.dim(2))
        raise(ErrCode::invalid, "conv2d: shape mismatch " + shape_str(xv.shape()) + " vs " +
                                    shape_str(wv.shape()));
    const int n = xv.dim(0), h = xv.dim(1), wd = xv.dim(2), c = xv.dim(3);
    const int kh = wv.dim(0), kw = wv.dim(1), oc = wv.dim(3);
    if (bv.rank() != 1 || bv.dim(0) != oc)
        raise(ErrCode::invalid, "conv2d: bias shape mismatch " + shape_str(bv.shape()));
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;
    if (oh <= 0 || ow <= 0)
        raise(ErrCode::invalid, "conv2d: kernel larger than padded input " + shape_str(xv.shape()));
    const int64_t patch = int64_t(kh) * kw * c;
    const int64_t opos = int64_t(oh) * ow;

    // im2col buffers are cached for backward
    auto cols = std::make_shared<std::vector<Real>>(size_t(n) * opos * patch);
    Tensor<Real> out(Shape{n, oh, ow, oc});
    parallel_for(n, [&](int64_t s) {
        Real* col = cols->data() + s * opos * patch;
        kern::im2col(xv.data() + s * int64_t(h) * wd * c, h, wd, c, kh, kw, stride, pad, oh, ow, col);
        Real* o = out.data() + s * opos * oc;
        kern::gemm_nn(col, wv.data(), o, opos, patch, oc);
        for (int64_t p = 0; p < opos; ++p)
            for (int j = 0; j < oc; ++j) o[p * oc + j] += bv[j];
    });

    const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
    const int ix = x.id, iw = w.id, ib = b.id;
    return t.make(std::move(out), rg,
                  [ix, iw, ib, n, h, wd, c, kh, kw, oc, oh, ow, stride, pad, patch, opos,
                   cols](Tape<Real>& tp, int self) {
                      const Tensor<Real>& g = tp.grad(self);
                      if (tp.node(iw).requires_grad) {
                          Tensor<Real>& gw = tp.grad(iw);
                          for (int64_t s = 0; s < n; ++s)
                              kern::gemm_tn_acc(cols->data() + s * opos * patch,
                                                g.data() + s * opos * oc, gw.data(), opos, patch, oc);
                      }
                      if (tp.node(ib).requires_grad) {
                          Tensor<Real>& gb = tp.grad(ib);
                          for (int64_t s = 0; s < n; ++s) {
                              const Real* gs = g.data() + s * opos * oc;
                              for (int64_t p = 0; p < opos; ++p)
                                  for (int j = 0; j < oc; ++j) gb[j] += gs[p * oc + j];
                          }
                      }
                      if (tp.node(ix).requires_grad) {
                          Tensor<Real>& gx = tp.grad(ix);
                          const Tensor<Real>& wv2 = tp.value(iw);
                          parallel_for(n, [&](int64_t s) {
                              std::vector<Real> dcol(size_t(opos) * patch, Real(0));
                              kern::gemm_nt_acc(g.data() + s * opos * oc, wv2.data(), dcol.data(),
                                                opos, patch, oc);
                              kern::col2im_acc(dcol.data(), h, wd, c, kh, kw, stride, pad, oh, ow,
                                               gx.data() + s * int64_t(h) * wd * c);
                          });
                      }
                  });
}

template <class Real>
Value<Real> avg_pool2x2(Value<Real> x) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& v = x.val();
    if (v.rank() != 4 || v.dim(1) % 2 != 0 || v.dim(2) % 2 != 0)
        raise(ErrCode::invalid, "avg_pool2x2: need rank-4 with even H,W, got " + shape_str(v.shape()));
    const int n = v.dim(0), h = v.dim(1), w = v.dim(2), c = v.dim(3);
    const int oh = h / 2, ow = w / 2;
    Tensor<Real> out(Shape{n, oh, ow, c});
    auto idx = [&](int s, int y, int x2, int ch) {
        return ((int64_t(s) * h + y) * w + x2) * c + ch;
    };
    for (int s = 0; s < n; ++s)
        for (int y = 0; y < oh; ++y)
            for (int x2 = 0; x2 < ow; ++x2)
                for (int ch = 0; ch < c; ++ch)
                    out[((int64_t(s) * oh + y) * ow + x2) * c + ch] =
                        (v[idx(s, 2 * y, 2 * x2, ch)] + v[idx(s, 2 * y, 2 * x2 + 1, ch)] +
                         v[idx(s, 2 * y + 1, 2 * x2, ch)] + v[idx(s, 2 * y + 1, 2 * x2 + 1, ch)]) *
                        Real(0.25);
    const int ix = x.id;
    return t.make(std::move(out), x.requires_grad(), [ix, n, h, w, c, oh, ow](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        Tensor<Real>& gx = tp.grad(ix);
        for (int s = 0; s < n; ++s)
            for (int y = 0; y < oh; ++y)
                for (int x2 = 0; x2 < ow; ++x2)
                    for (int ch = 0; ch < c; ++ch) {
                        const Real q = g[((int64_t(s) * oh + y) * ow + x2) * c + ch] * Real(0.25);
                        gx[((int64_t(s) * h + 2 * y) * w + 2 * x2) * c + ch] += q;
                        gx[((int64_t(s) * h + 2 * y) * w + 2 * x2 + 1) * c + ch] += q;
                        gx[((int64_t(s) * h + 2 * y + 1) * w + 2 * x2) * c + ch] += q;
                        gx[((int64_t(s) * h + 2 * y + 1) * w + 2 * x2 + 1) * c + ch] += q;
                    }
    });
}

// [N,H,W,C] -> [N,C], mean over spatial positions (any H,W)
template <class Real>
Value<Real> global_avg_pool(Value<Real> x) {
    Tape<Real>& t = *x.tape;
    const Tensor<Real>& v = x.val();
    if (v.rank() != 4)
        raise(ErrCode::invalid, "global_avg_pool: need rank-4, got " + shape_str(v.shape()));
    const int n = v.dim(0), h = v.dim(1), w = v.dim(2), c = v.dim(3);
    const int64_t hw = int64_t(h) * w;
    Tensor<Real> out(Shape{n, c});
    for (int s = 0; s < n; ++s) {
        const Real* base = v.data() + s * hw * c;
        for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (int64_t p = 0; p < hw; ++p) acc += double(base[p * c + ch]);
            out.at(s, ch) = Real(acc / double(hw));
        }
    }
    const int ix = x.id;
    return t.make(std::move(out), x.requires_grad(), [ix, n, hw, c](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        Tensor<Real>& gx = tp.grad(ix);
        for (int s = 0; s < n; ++s) {
            const Real* gs = g.data() + size_t(s) * c;
            Real* base = gx.data() + s * hw * c;
            for (int64_t p = 0; p < hw; ++p)
                for (int ch = 0; ch < c; ++ch) base[p * c + ch] += gs[ch] / Real(double(hw));
        }
    });
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

// Per-element binary cross-entropy from logits, stable form
// max(a,0) - a*z + log(1+exp(-|a|)); gradient w.r.t. a is sigmoid(a) - z.
// Targets may be hard bits {0,1} or soft values in [0,1]; they never carry
// gradient.
template <class Real>
Value<Real> bce_with_logits(Value<Real> logits, const Tensor<Real>& targets) {
    Tape<Real>& t = *logits.tape;
    const Tensor<Real>& a = logits.val();
    check_same_shape(a, targets, "bce_with_logits");
    Tensor<Real> out(a.shape());
    for (int64_t i = 0; i < a.size(); ++i) {
        const double x = double(a[i]);
        const double z = double(targets[i]);
        out[i] = Real(std::max(x, 0.0) - x * z + std::log1p(std::exp(-std::abs(x))));
    }
    const int ia = logits.id;
    auto tg = std::make_shared<Tensor<Real>>(targets);
    return t.make(std::move(out), logits.requires_grad(), [ia, tg](Tape<Real>& tp, int self) {
        const Tensor<Real>& g = tp.grad(self);
        const Tensor<Real>& a2 = tp.value(ia);
        Tensor<Real>& ga = tp.grad(ia);
        for (int64_t i = 0; i < ga.size(); ++i)
            ga[i] += g[i] * (detail::stable_sigmoid(a2[i]) - (*tg)[i]);
    });
}

// R_eps(a) = 1/2 logdet(I + (dscale/eps^2) Cov(rows)), Cholesky route with
// the analytic gradient (c/N) (I + cA)^{-1} (a_i - mean) per row. Rows are
// expected to be L2-normalized already. dscale <= 0 selects the row dimension.
template <class Real>
Value<Real> logdet_regularized_cov(Value<Real> a, double eps, double dscale = 0.0) {
    Tape<Real>& t = *a.tape;
    const Tensor<Real>& v = a.val();
    if (v.rank() != 2) raise(ErrCode::invalid, "logdet_regularized_cov: need rank-2 input");
    const int n = v.dim(0), d = v.dim(1);
    if (n < 2) raise(ErrCode::invalid, "logdet_regularized_cov: need at least 2 rows");
    if (!(eps > 0.0)) raise(ErrCode::invalid, "logdet_regularized_cov: eps must be > 0");
    const double c = (dscale > 0.0 ? dscale : double(d)) / (eps * eps);

    auto centered = std::make_shared<std::vector<double>>(size_t(n) * d);
    std::vector<double> mean(size_t(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mean[size_t(j)] += double(v.at(i, j));
    for (int j = 0; j < d; ++j) mean[size_t(j)] /= double(n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j)
            (*centered)[size_t(i) * d + j] = double(v.at(i, j)) - mean[size_t(j)];

    // M = I + c * (1/N) centered^T centered
    auto factor = std::make_shared<std::vector<double>>(size_t(d) * d, 0.0);
    std::vector<double>& m = *factor;
    parallel_for(d, [&](int64_t r) {
        for (int64_t q = 0; q <= r; ++q) {
            double s = 0.0;
            for (int i = 0; i < n; ++i)
                s += (*centered)[size_t(i) * d + r] * (*centered)[size_t(i) * d + q];
            const double val = c * s / double(n) + (r == q ? 1.0 : 0.0);
            m[size_t(r) * d + q] = val;
            m[size_t(q) * d + r] = val;
        }
    });

    std::vector<double> saved = m;
    if (!detail::cholesky(m, d)) {
        m = saved;
        for (int j = 0; j < d; ++j) m[size_t(j) * d + j] += 1e-6;
        if (!detail::cholesky(m, d))
            raise(ErrCode::numeric,
                  "logdet_regularized_cov: Cholesky failed twice (matrix not positive definite)");
    }
    double logdet = 0.0;
    for (int j = 0; j < d; ++j) logdet += std::log(m[size_t(j) * d + j]);

    const int ia = a.id;
    return t.make(Tensor<Real>::scalar(Real(logdet)), a.requires_grad(),
                  [ia, n, d, c, centered, factor](Tape<Real>& tp, int self) {
                      double up = double(tp.grad(self)[0]);
                      if (testing::logdet_grad_sign_flip.load()) up = -up;
                      Tensor<Real>& ga = tp.grad(ia);
                      const double coef = up * c / double(n);
                      parallel_for(n, [&](int64_t i) {
                          std::vector<double> y(static_cast<size_t>(d));
                          detail::cholesky_solve(*factor, d, centered->data() + i * d, y.data());
                          for (int j = 0; j < d; ++j)
                              ga[size_t(i) * d + j] += Real(coef * y[size_t(j)]);
                      });
                  });
}

}  // namespace bits
