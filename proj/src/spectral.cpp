#include "bits/spectral.hpp"

#include <algorithm>
#include <cmath>

namespace bits {

std::vector<double> covariance_of_rows(const double* x, int n, int d) {
    std::vector<double> mean(size_t(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) mean[size_t(j)] += x[size_t(i) * d + j];
    for (int j = 0; j < d; ++j) mean[size_t(j)] /= double(n);
    std::vector<double> cov(size_t(d) * d, 0.0);
    for (int i = 0; i < n; ++i) {
        for (int r = 0; r < d; ++r) {
            const double cr = x[size_t(i) * d + r] - mean[size_t(r)];
            for (int c = 0; c <= r; ++c)
                cov[size_t(r) * d + c] += cr * (x[size_t(i) * d + c] - mean[size_t(c)]);
        }
    }
    for (int r = 0; r < d; ++r)
        for (int c = 0; c <= r; ++c) {
            cov[size_t(r) * d + c] /= double(n);
            cov[size_t(c) * d + r] = cov[size_t(r) * d + c];
        }
    return cov;
}

namespace {

double off_diag_norm(const std::vector<double>& a, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            if (i != j) s += a[size_t(i) * n + j] * a[size_t(i) * n + j];
    return std::sqrt(s);
}

double frob_norm(const std::vector<double>& a, int n) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
    (void)n;
    return std::sqrt(s);
}

}  // namespace

std::vector<double> jacobi_eigenvalues(const std::vector<double>& m, int dim) {
    if (int64_t(m.size()) != int64_t(dim) * dim)
        raise(ErrCode::invalid, "jacobi_eigenvalues: matrix size does not match dim");
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < i; ++j)
            if (std::abs(m[size_t(i) * dim + j] - m[size_t(j) * dim + i]) > 1e-6)
                raise(ErrCode::invalid, "jacobi_eigenvalues: matrix asymmetric beyond 1e-6");

    std::vector<double> a = m;
    // symmetrize exactly so rotations stay consistent
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < i; ++j) {
            const double v = 0.5 * (a[size_t(i) * dim + j] + a[size_t(j) * dim + i]);
            a[size_t(i) * dim + j] = v;
            a[size_t(j) * dim + i] = v;
        }

    const double scale = frob_norm(a, dim);
    const double tol = 1e-10 * (scale > 0.0 ? scale : 1.0);
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps && off_diag_norm(a, dim) > tol; ++sweep) {
        for (int p = 0; p < dim - 1; ++p) {
            for (int q = p + 1; q < dim; ++q) {
                const double apq = a[size_t(p) * dim + q];
                if (apq == 0.0) continue;
                const double app = a[size_t(p) * dim + p];
                const double aqq = a[size_t(q) * dim + q];
                const double theta = (aqq - app) / (2.0 * apq);
                const double sgn = theta >= 0.0 ? 1.0 : -1.0;
                const double t = sgn / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;
                for (int k = 0; k < dim; ++k) {
                    const double akp = a[size_t(k) * dim + p];
                    const double akq = a[size_t(k) * dim + q];
                    a[size_t(k) * dim + p] = c * akp - s * akq;
                    a[size_t(k) * dim + q] = s * akp + c * akq;
                }
                for (int k = 0; k < dim; ++k) {
                    const double apk = a[size_t(p) * dim + k];
                    const double aqk = a[size_t(q) * dim + k];
                    a[size_t(p) * dim + k] = c * apk - s * aqk;
                    a[size_t(q) * dim + k] = s * apk + c * aqk;
                }
            }
        }
    }

    std::vector<double> eig(static_cast<size_t>(dim));
    for (int i = 0; i < dim; ++i) {
        double v = a[size_t(i) * dim + i];
        if (v < 0.0 && v >= -1e-8) v = 0.0;
        eig[size_t(i)] = v;
    }
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
}

SpectrumSummary summary_from_eigenvalues(std::vector<double> eigenvalues) {
    std::sort(eigenvalues.begin(), eigenvalues.end(), std::greater<double>());
    for (double& v : eigenvalues)
        if (v < 0.0 && v >= -1e-8) v = 0.0;
    double total = 0.0, sq = 0.0;
    for (double v : eigenvalues) {
        total += v;
        sq += v * v;
    }
    if (!(total > 0.0))
        raise(ErrCode::numeric, "spectrum_summary: degenerate spectrum (all eigenvalues zero)");

    SpectrumSummary s;
    s.eigenvalues = std::move(eigenvalues);
    s.cumulative_variance.resize(s.eigenvalues.size());
    double run = 0.0;
    for (size_t i = 0; i < s.eigenvalues.size(); ++i) {
        run += s.eigenvalues[i];
        s.cumulative_variance[i] = run / total;
    }
    s.d_eff = total * total / sq;
    double entropy = 0.0;
    for (double v : s.eigenvalues) {
        if (v <= 0.0) continue;  // 0 log 0 := 0
        const double p = v / total;
        entropy -= p * std::log(p);
    }
    s.r_eff = std::exp(entropy);
    return s;
}

namespace {

template <class Real>
SpectrumSummary summary_impl(const Tensor<Real>& features) {
    if (features.rank() != 2 || features.dim(0) < 2)
        raise(ErrCode::invalid,
              "spectrum_summary: need rank-2 features with N >= 2, got " + shape_str(features.shape()));
    const int n = features.dim(0), d = features.dim(1);
    std::vector<double> x(size_t(n) * d);
    for (int64_t i = 0; i < features.size(); ++i) x[size_t(i)] = double(features[i]);
    const std::vector<double> cov = covariance_of_rows(x.data(), n, d);
    return summary_from_eigenvalues(jacobi_eigenvalues(cov, d));
}

}  // namespace

SpectrumSummary spectrum_summary(const Tensor<float>& features) { return summary_impl(features); }
SpectrumSummary spectrum_summary(const Tensor<double>& features) { return summary_impl(features); }

}  // namespace bits
