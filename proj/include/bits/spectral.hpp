#pragma once

#include <vector>

#include "bits/tensor.hpp"

namespace bits {

// Eigen-analysis of feature covariance spectra: cumulative explained
// variance, effective dimension and effective rank.
struct SpectrumSummary {
    std::vector<double> eigenvalues;          // descending, clamped >= 0
    std::vector<double> cumulative_variance;  // cv_i in [0,1], non-decreasing
    double d_eff = 0.0;                       // (sum l)^2 / sum l^2
    double r_eff = 0.0;                       // exp(spectral entropy)
};

// Eigenvalues of a symmetric PSD matrix via cyclic Jacobi rotations,
// descending order. Iterates until the off-diagonal Frobenius norm drops
// below 1e-10 * ||M||_F. Asymmetry beyond 1e-6 is a hard error; negative
// eigenvalues within -1e-8 are clamped to zero.
std::vector<double> jacobi_eigenvalues(const std::vector<double>& m, int dim);

// Summary from a known spectrum (descending order not required on input).
SpectrumSummary summary_from_eigenvalues(std::vector<double> eigenvalues);

// Summary of the biased covariance spectrum of features [N x d], N >= 2.
SpectrumSummary spectrum_summary(const Tensor<float>& features);
SpectrumSummary spectrum_summary(const Tensor<double>& features);

// Biased covariance (1/N) of the rows, returned row-major [d x d].
std::vector<double> covariance_of_rows(const double* x, int n, int d);

}  // namespace bits
