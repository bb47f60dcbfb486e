#include "bits/oracles.hpp"

#include <algorithm>
#include <cmath>

#include "bits/spectral.hpp"

namespace bits::oracle {

double naive_bce(double logit, double target) {
    const double s = 1.0 / (1.0 + std::exp(-logit));
    return -target * std::log(s) - (1.0 - target) * std::log(1.0 - s);
}

double logdet_rate_eigen_route(const std::vector<double>& rows, int n, int d, double eps,
                               double dscale) {
    const std::vector<double> cov = covariance_of_rows(rows.data(), n, d);
    const std::vector<double> eig = jacobi_eigenvalues(cov, d);
    const double c = (dscale > 0.0 ? dscale : double(d)) / (eps * eps);
    double acc = 0.0;
    for (double l : eig) acc += std::log(1.0 + c * l);
    return 0.5 * acc;
}

double brute_force_map(const std::vector<std::vector<int>>& order,
                       const std::vector<uint16_t>& labels) {
    double ap_sum = 0.0;
    int counted = 0;
    for (size_t q = 0; q < order.size(); ++q) {
        int relevant_total = 0;
        for (size_t i = 0; i < labels.size(); ++i)
            if (i != q && labels[i] == labels[q]) ++relevant_total;
        if (relevant_total == 0) continue;
        int hits = 0;
        double ap = 0.0;
        for (size_t rank = 0; rank < order[q].size(); ++rank) {
            if (labels[size_t(order[q][rank])] == labels[q]) {
                ++hits;
                ap += double(hits) / double(rank + 1);
            }
        }
        ap_sum += ap / double(relevant_total);
        ++counted;
    }
    if (counted == 0) raise(ErrCode::invalid, "brute_force_map: no query has a relevant item");
    return ap_sum / double(counted);
}

int knn_predict_reference(const std::vector<std::vector<double>>& train,
                          const std::vector<uint16_t>& train_labels,
                          const std::vector<double>& query, int k, double temp) {
    const size_t n = train.size();
    auto cosine = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12);
    };
    std::vector<std::pair<double, int>> sims(n);
    for (size_t i = 0; i < n; ++i) sims[i] = {cosine(train[i], query), int(i)};
    std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<double> votes;
    for (int i = 0; i < k && i < int(n); ++i) {
        const uint16_t cls = train_labels[size_t(sims[size_t(i)].second)];
        if (votes.size() <= cls) votes.resize(size_t(cls) + 1, 0.0);
        votes[cls] += std::exp(sims[size_t(i)].first / temp);
    }
    int best = 0;
    for (size_t cls = 1; cls < votes.size(); ++cls)
        if (votes[cls] > votes[size_t(best)]) best = int(cls);
    return best;
}

double entropy_of_counts(const std::vector<int64_t>& counts, int64_t total) {
    double h = 0.0;
    for (int64_t c : counts) {
        if (c <= 0) continue;
        const double p = double(c) / double(total);
        h -= p * std::log2(p);
    }
    return h;
}

}  // namespace bits::oracle
