#pragma once

#include <cstdint>
#include <vector>

#include "bits/ops.hpp"

namespace bits::oracle {

// Result of one finite-difference gradient check. Relative error uses a
// unit floor on the denominator: |a - fd| / max(1, |a|, |fd|).
struct GradCheckReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    int64_t num_elements_checked = 0;
    double step_size = 0.0;
};

// Checks the analytic gradient of a scalar-valued graph against central
// finite differences. The builder is instantiated twice: once at Real for
// the analytic pass, once at double for the FD evaluations, so the FD
// reference is not polluted by single-precision forward roundoff.
//
//   builder(tape, leaves) -> scalar Value, where leaves mirror `inputs`.
//
// max_coords == 0 checks every coordinate; otherwise max_coords coordinates
// are sampled without replacement across all inputs.
template <class Real, class Builder>
GradCheckReport grad_check(Builder&& builder, const std::vector<Tensor<double>>& inputs,
                           double step, int64_t max_coords, Rng& rng) {
    // analytic pass at Real
    std::vector<Parameter<Real>> params;
    params.reserve(inputs.size());
    for (const auto& in : inputs) params.emplace_back("x", in.template cast<Real>());
    Tape<Real> tape;
    std::vector<Value<Real>> leaves;
    for (auto& p : params) leaves.push_back(tape.leaf(p));
    Value<Real> loss = builder(tape, leaves);
    tape.backward(loss);

    // coordinate list
    int64_t total = 0;
    for (const auto& in : inputs) total += in.size();
    std::vector<int64_t> coords;
    if (max_coords <= 0 || max_coords >= total) {
        coords.resize(size_t(total));
        for (int64_t i = 0; i < total; ++i) coords[size_t(i)] = i;
    } else {
        std::vector<int64_t> all(static_cast<size_t>(total));
        for (int64_t i = 0; i < total; ++i) all[size_t(i)] = i;
        for (int64_t i = 0; i < max_coords; ++i) {
            const int64_t j = i + rng.uniform_int(total - i);
            std::swap(all[size_t(i)], all[size_t(j)]);
        }
        coords.assign(all.begin(), all.begin() + max_coords);
    }

    auto eval_double = [&](const std::vector<Tensor<double>>& ins) {
        Tape<double> t2;
        std::vector<Value<double>> ls;
        for (const auto& in : ins) ls.push_back(t2.constant(in));
        return double(builder(t2, ls).val()[0]);
    };

    GradCheckReport rep;
    rep.step_size = step;
    std::vector<Tensor<double>> work = inputs;
    for (int64_t flat : coords) {
        int64_t off = flat;
        size_t which = 0;
        while (off >= work[which].size()) {
            off -= work[which].size();
            ++which;
        }
        const double orig = work[which][off];
        work[which][off] = orig + step;
        const double fp = eval_double(work);
        work[which][off] = orig - step;
        const double fm = eval_double(work);
        work[which][off] = orig;
        const double fd = (fp - fm) / (2.0 * step);
        const double an = double(params[which].grad[off]);
        const double abs_err = std::abs(an - fd);
        const double rel = abs_err / std::max({1.0, std::abs(an), std::abs(fd)});
        rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
        rep.max_rel_err = std::max(rep.max_rel_err, rel);
        ++rep.num_elements_checked;
    }
    return rep;
}

// Naive per-element BCE -z log s(a) - (1-z) log(1 - s(a)) at double; finite
// only away from saturation, used as the reference for the stable form.
double naive_bce(double logit, double target);

// 1/2 sum log(1 + c * lambda_i) over the eigenvalues of the biased covariance
// of the rows (eigen route; independent of the Cholesky path).
double logdet_rate_eigen_route(const std::vector<double>& rows, int n, int d, double eps,
                               double dscale = 0.0);

// Plain average-precision reference: for each query, scan ranks and average
// precision at every relevant hit. Returns mAP over queries with >= 1
// relevant item. order[q] holds candidate indices best-first, query excluded.
double brute_force_map(const std::vector<std::vector<int>>& order,
                       const std::vector<uint16_t>& labels);

// Exhaustive cosine-weighted kNN vote, double precision.
int knn_predict_reference(const std::vector<std::vector<double>>& train,
                          const std::vector<uint16_t>& train_labels,
                          const std::vector<double>& query, int k, double temp);

// Plug-in Shannon entropy (bits) of the empirical distribution of `values`.
double entropy_of_counts(const std::vector<int64_t>& counts, int64_t total);

}  // namespace bits::oracle
