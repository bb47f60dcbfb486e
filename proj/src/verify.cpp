#include "bits/verify.hpp"

#include <cmath>
#include <sstream>

#include "bits/evalsuite.hpp"
#include "bits/oracles.hpp"
#include "bits/spectral.hpp"

namespace bits {

namespace {

Tensor<double> randn(Rng& rng, Shape shape, double stdev = 1.0) {
    Tensor<double> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal(0.0, stdev);
    return t;
}

// keeps relu-path inputs away from the kink, where central differences are
// not a valid derivative oracle
Tensor<double> randn_off_zero(Rng& rng, Shape shape, double margin = 0.05) {
    Tensor<double> t = randn(rng, std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i)
        if (std::abs(t[i]) < margin) t[i] = t[i] < 0 ? -margin : margin;
    return t;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

// Tiny differentiable model for the loss-level gradient checks: a 3-layer
// mlp backbone (16 -> 16 -> 16 -> 16) plus the 3-layer head (16 -> 16 -> 16),
// two views through shared parameters, fixed binary targets.
struct TinyProblem {
    static constexpr int n = 8, in = 16, d = 16, b = 16;
    std::vector<Tensor<double>> params;  // 12 tensors, affine stack
    Tensor<double> x1{Shape{n, in}}, x2{Shape{n, in}};
    Tensor<double> z1{Shape{n, b}}, z2{Shape{n, b}};

    explicit TinyProblem(Rng& rng) {
        const int dims[7] = {in, d, d, d, d, d, b};
        for (int l = 0; l < 6; ++l) {
            params.push_back(randn(rng, Shape{dims[l], dims[l + 1]}, std::sqrt(1.0 / dims[l])));
            params.push_back(randn(rng, Shape{dims[l + 1]}, 0.05));
        }
        x1 = randn(rng, Shape{n, in});
        x2 = randn(rng, Shape{n, in});
        for (int64_t i = 0; i < z1.size(); ++i) z1[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
        for (int64_t i = 0; i < z2.size(); ++i) z2[i] = rng.bernoulli(0.5) ? 1.0 : 0.0;
    }

    // logits of one view from the parameter leaves
    template <class Real>
    static Value<Real> logits(Tape<Real>& tape, const std::vector<Value<Real>>& leaves,
                              Value<Real> x) {
        Value<Real> cur = x;
        for (int l = 0; l < 6; ++l) {
            cur = add_bias(matmul(cur, leaves[size_t(2 * l)]), leaves[size_t(2 * l + 1)]);
            if (l != 2 && l != 5) cur = gelu(cur);
        }
        return cur;
    }

    enum class Loss { bce, rate, total };

    auto builder(Loss which, double beta, double eps) const {
        return [this, which, beta, eps](auto& tape, const auto& leaves) {
            using RealT = std::decay_t<decltype(leaves[0].val()[0])>;
            auto xv1 = tape.constant(x1.template cast<RealT>());
            auto xv2 = tape.constant(x2.template cast<RealT>());
            auto a1 = logits(tape, leaves, xv1);
            auto a2 = logits(tape, leaves, xv2);
            auto bce = scale(add(mean_all(bce_with_logits(a2, z1.template cast<RealT>())),
                                 mean_all(bce_with_logits(a1, z2.template cast<RealT>()))),
                             0.5);
            if (which == Loss::bce) return bce;
            auto rate = scale(
                logdet_regularized_cov(l2_normalize_rows(concat_rows<RealT>({a1, a2})), eps), -1.0);
            if (which == Loss::rate) return rate;
            return add(bce, scale(rate, beta));
        };
    }
};

struct Suite {
    VerifyReport report;

    void add(const std::string& name, bool pass, const std::string& detail) {
        report.checks.push_back({name, pass, detail});
        report.all_pass = report.all_pass && pass;
    }

    void grad_pair(const std::string& name, const auto& builder,
                   const std::vector<Tensor<double>>& inputs, int64_t coords, Rng& rng,
                   double& worst32, double& worst64) {
        const auto r32 = oracle::grad_check<float>(builder, inputs, 1e-3, coords, rng);
        const auto r64 = oracle::grad_check<double>(builder, inputs, 1e-5, coords, rng);
        worst32 = std::max(worst32, r32.max_rel_err);
        worst64 = std::max(worst64, r64.max_rel_err);
        (void)name;
    }
};

void check_primitive_grads(Suite& s, Rng& rng) {
    double w32 = 0.0, w64 = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        Tensor<double> a = randn(rng, Shape{4, 3});
        Tensor<double> b = randn(rng, Shape{3, 5});
        s.grad_pair("matmul", [](auto& t, const auto& l) { return mean_all(matmul(l[0], l[1])); },
                    {a, b}, 0, rng, w32, w64);
        Tensor<double> c = randn(rng, Shape{4, 5});
        s.grad_pair("elementwise",
                    [](auto& t, const auto& l) {
                        (void)t;
                        return mean_all(mul(add(l[0], l[1]), sub(l[0], scale(l[1], 0.5))));
                    },
                    {randn(rng, Shape{4, 5}), c}, 0, rng, w32, w64);
        s.grad_pair("activations",
                    [](auto& t, const auto& l) {
                        (void)t;
                        return mean_all(add(gelu(l[0]), add(relu(l[0]), sigmoid(l[0]))));
                    },
                    {randn_off_zero(rng, Shape{3, 4})}, 0, rng, w32, w64);
        s.grad_pair("l2norm-reduce",
                    [](auto& t, const auto& l) {
                        (void)t;
                        return mean_all(sum_axis(l2_normalize_rows(l[0]), 1));
                    },
                    {randn(rng, Shape{5, 4})}, 0, rng, w32, w64);
        s.grad_pair("cov",
                    [](auto& t, const auto& l) {
                        (void)t;
                        return mean_all(batch_cov(l[0]));
                    },
                    {randn(rng, Shape{6, 3})}, 0, rng, w32, w64);
        s.grad_pair("bias-bce",
                    [](auto& t, const auto& l) {
                        using RealT = std::decay_t<decltype(l[0].val()[0])>;
                        Tensor<RealT> z(Shape{4, 3});
                        for (int64_t i = 0; i < z.size(); ++i) z[i] = RealT((i * 7 % 3) == 0);
                        return mean_all(bce_with_logits(add_bias(l[0], l[1]), z));
                    },
                    {randn(rng, Shape{4, 3}), randn(rng, Shape{3})}, 0, rng, w32, w64);
    }
    // conv / pooling are heavier; a smaller trial count keeps verify quick
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<double> x = randn(rng, Shape{2, 6, 6, 3});
        Tensor<double> w = randn(rng, Shape{3, 3, 3, 4}, 0.3);
        Tensor<double> bb = randn(rng, Shape{4}, 0.1);
        s.grad_pair("conv2d",
                    [](auto& t, const auto& l) {
                        (void)t;
                        return mean_all(global_avg_pool(conv2d(l[0], l[1], l[2], 2, 1)));
                    },
                    {x, w, bb}, 24, rng, w32, w64);
        s.grad_pair("avgpool",
                    [](auto& t, const auto& l) {
                        (void)t;
                        return mean_all(avg_pool2x2(relu(l[0])));
                    },
                    {randn_off_zero(rng, Shape{2, 4, 4, 2})}, 16, rng, w32, w64);
    }
    s.add("grad/primitives/f32", w32 <= 1e-3, "max rel err " + fmt(w32));
    s.add("grad/primitives/f64", w64 <= 1e-6, "max rel err " + fmt(w64));
}

void check_loss_grads(Suite& s, Rng& rng) {
    const struct {
        TinyProblem::Loss which;
        const char* name;
    } losses[3] = {{TinyProblem::Loss::bce, "bce-loss"},
                   {TinyProblem::Loss::rate, "rate-loss"},
                   {TinyProblem::Loss::total, "total-loss"}};
    for (const auto& L : losses) {
        double w32 = 0.0, w64 = 0.0;
        for (int trial = 0; trial < 100; ++trial) {
            TinyProblem prob(rng);
            auto builder = prob.builder(L.which, 0.1, 0.5);
            s.grad_pair(L.name, builder, prob.params, 6, rng, w32, w64);
        }
        s.add(std::string("grad/") + L.name + "/f32", w32 <= 1e-3, "max rel err " + fmt(w32));
        s.add(std::string("grad/") + L.name + "/f64", w64 <= 1e-6, "max rel err " + fmt(w64));
    }
}

void check_bce_oracle(Suite& s, Rng& rng) {
    double worst = 0.0;
    for (int i = 0; i < 2000; ++i) {
        const double a = rng.uniform(-15.0, 15.0);
        const double z = rng.bernoulli(0.5) ? 1.0 : 0.0;
        Tape<double> t;
        Tensor<double> logits(Shape{1, 1});
        logits[0] = a;
        Tensor<double> target(Shape{1, 1});
        target[0] = z;
        const double stable = bce_with_logits(t.constant(logits), target).val()[0];
        const double naive = oracle::naive_bce(a, z);
        if (std::isfinite(naive)) worst = std::max(worst, std::abs(stable - naive));
    }
    // saturation limits of the stable form
    Tape<double> t;
    Tensor<double> big(Shape{1, 3});
    big[0] = 50.0;
    big[1] = -50.0;
    big[2] = 0.0;
    Tensor<double> ones(Shape{1, 3});
    ones.fill(1.0);
    const Tensor<double>& v = bce_with_logits(t.constant(big), ones).val();
    const bool sat = v[0] < 1e-10 && std::abs(v[1] - 50.0) < 1e-6 &&
                     std::abs(v[2] - std::log(2.0)) < 1e-12 && std::isfinite(v[0]);
    s.add("oracle/bce-naive", worst <= 1e-6 && sat, "max abs diff " + fmt(worst));
}

void check_logdet_oracle(Suite& s, Rng& rng) {
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 4 + int(rng.uniform_int(28));
        const int d = 2 + int(rng.uniform_int(14));
        Tensor<double> rows = randn(rng, Shape{n, d});
        Tape<double> t;
        auto nrm = l2_normalize_rows(t.constant(rows));
        const double chol = logdet_regularized_cov(nrm, 0.5).val()[0];
        std::vector<double> nr(nrm.val().vec());
        const double eig = oracle::logdet_rate_eigen_route(nr, n, d, 0.5);
        worst = std::max(worst, std::abs(chol - eig) / std::max(1.0, std::abs(eig)));
    }
    // collapsed batch: identical rows, exact zero
    Tensor<double> same(Shape{6, 5});
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 5; ++j) same.at(i, j) = 0.1 * (j + 1);
    Tape<double> t;
    const double collapsed = logdet_regularized_cov(t.constant(same), 0.5).val()[0];
    // hand case: rows (1,0) and (0,1), eps = 0.5 -> 1/2 log 5
    Tensor<double> basis(Shape{2, 2});
    basis.at(0, 0) = 1.0;
    basis.at(1, 1) = 1.0;
    Tape<double> t2;
    const double hand = logdet_regularized_cov(t2.constant(basis), 0.5).val()[0];
    const bool hand_ok = std::abs(hand - 0.5 * std::log(5.0)) < 1e-12;
    s.add("oracle/logdet-eigen", worst <= 1e-6 && collapsed == 0.0 && hand_ok,
          "max rel diff " + fmt(worst));
}

void check_jacobi(Suite& s, Rng& rng) {
    bool ok = true;
    std::string detail;
    {  // identity
        std::vector<double> m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
        const auto eig = jacobi_eigenvalues(m, 3);
        for (double v : eig) ok = ok && std::abs(v - 1.0) < 1e-12;
    }
    {  // rotated diag(3,1)
        const double c = std::sqrt(0.5);
        std::vector<double> m = {c * c * 3 + c * c * 1, c * c * 3 - c * c * 1,
                                 c * c * 3 - c * c * 1, c * c * 3 + c * c * 1};
        const auto eig = jacobi_eigenvalues(m, 2);
        ok = ok && std::abs(eig[0] - 3.0) < 1e-8 && std::abs(eig[1] - 1.0) < 1e-8;
    }
    {  // rank-1 uu^T with |u|^2 = 5
        std::vector<double> u = {1, 2};
        std::vector<double> m = {u[0] * u[0], u[0] * u[1], u[1] * u[0], u[1] * u[1]};
        const auto eig = jacobi_eigenvalues(m, 2);
        ok = ok && std::abs(eig[0] - 5.0) < 1e-10 && std::abs(eig[1]) < 1e-10;
    }
    {  // random construct-and-recover via random rotations
        for (int trial = 0; trial < 10; ++trial) {
            const int d = 3 + int(rng.uniform_int(6));
            std::vector<double> diag(static_cast<size_t>(d));
            for (auto& v : diag) v = rng.uniform(0.0, 4.0);
            // apply a few random Givens rotations to D
            std::vector<double> m(size_t(d) * d, 0.0);
            for (int i = 0; i < d; ++i) m[size_t(i) * d + i] = diag[size_t(i)];
            for (int r = 0; r < 3 * d; ++r) {
                const int p = int(rng.uniform_int(d));
                int q = int(rng.uniform_int(d));
                if (p == q) q = (q + 1) % d;
                const double th = rng.uniform(0.0, 3.14159);
                const double cs = std::cos(th), sn = std::sin(th);
                for (int kcol = 0; kcol < d; ++kcol) {
                    const double mp = m[size_t(p) * d + kcol], mq = m[size_t(q) * d + kcol];
                    m[size_t(p) * d + kcol] = cs * mp - sn * mq;
                    m[size_t(q) * d + kcol] = sn * mp + cs * mq;
                }
                for (int krow = 0; krow < d; ++krow) {
                    const double mp = m[size_t(krow) * d + p], mq = m[size_t(krow) * d + q];
                    m[size_t(krow) * d + p] = cs * mp - sn * mq;
                    m[size_t(krow) * d + q] = sn * mp + cs * mq;
                }
            }
            auto eig = jacobi_eigenvalues(m, d);
            std::sort(diag.begin(), diag.end(), std::greater<double>());
            for (int i = 0; i < d; ++i)
                ok = ok && std::abs(eig[size_t(i)] - diag[size_t(i)]) < 1e-8;
        }
    }
    s.add("oracle/jacobi", ok, ok ? "construct-and-recover within 1e-8" : "mismatch");
}

void check_spectrum(Suite& s, Rng& rng) {
    bool ok = true;
    {  // uniform spectrum
        const auto sum = summary_from_eigenvalues({1, 1, 1, 1});
        ok = ok && std::abs(sum.d_eff - 4.0) < 1e-9 && std::abs(sum.r_eff - 4.0) < 1e-9;
        ok = ok && std::abs(sum.cumulative_variance[1] - 0.5) < 1e-12;
    }
    {  // rank-1
        const auto sum = summary_from_eigenvalues({1, 0, 0});
        ok = ok && std::abs(sum.d_eff - 1.0) < 1e-9 && std::abs(sum.r_eff - 1.0) < 1e-9;
    }
    {  // rotation invariance of d_eff on real features
        Tensor<double> f = randn(rng, Shape{40, 6});
        const auto s1 = spectrum_summary(f);
        // rotate features by a random orthogonal-ish composition of Givens
        Tensor<double> g = f;
        for (int r = 0; r < 12; ++r) {
            const int p = int(rng.uniform_int(6));
            int q = int(rng.uniform_int(6));
            if (p == q) q = (q + 1) % 6;
            const double th = rng.uniform(0.0, 3.14159);
            const double cs = std::cos(th), sn = std::sin(th);
            for (int i = 0; i < 40; ++i) {
                const double a = g.at(i, p), b = g.at(i, q);
                g.at(i, p) = cs * a - sn * b;
                g.at(i, q) = sn * a + cs * b;
            }
        }
        const auto s2 = spectrum_summary(g);
        ok = ok && std::abs(s1.d_eff - s2.d_eff) < 1e-6 && std::abs(s1.r_eff - s2.r_eff) < 1e-6;
    }
    s.add("oracle/spectrum", ok, ok ? "identities within 1e-6" : "mismatch");
}

void check_map_oracle(Suite& s, Rng& rng) {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 20 + int(rng.uniform_int(81));
        const int d2 = 4;
        FeatureSet fs;
        fs.n = n;
        fs.dim = d2;
        fs.features.resize(size_t(n) * d2);
        for (auto& v : fs.features) v = float(rng.normal());
        fs.labels.resize(static_cast<size_t>(n));
        for (auto& l : fs.labels) l = uint16_t(rng.uniform_int(4));
        const double fast = retrieval_map(fs);
        // reference path recomputes the orders independently
        std::vector<std::vector<int>> order(static_cast<size_t>(n));
        for (int q = 0; q < n; ++q) {
            std::vector<std::pair<double, int>> sims;
            for (int i = 0; i < n; ++i) {
                if (i == q) continue;
                double dot = 0, na = 0, nb = 0;
                for (int j = 0; j < d2; ++j) {
                    dot += double(fs.row(i)[j]) * fs.row(q)[j];
                    na += double(fs.row(i)[j]) * fs.row(i)[j];
                    nb += double(fs.row(q)[j]) * fs.row(q)[j];
                }
                sims.push_back({dot / (std::sqrt(na) * std::sqrt(nb) + 1e-12), i});
            }
            std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            for (const auto& [v, i] : sims) order[size_t(q)].push_back(i);
        }
        const double ref = oracle::brute_force_map(order, fs.labels);
        worst = std::max(worst, std::abs(fast - ref));
    }
    // duplicated pairs: every class a single duplicated pair -> mAP 1
    FeatureSet dup;
    dup.n = 10;
    dup.dim = 3;
    dup.features.resize(30);
    dup.labels.resize(10);
    for (int i = 0; i < 5; ++i) {
        float v[3] = {float(i + 1), float(2 * i - 3), float(i * i)};
        for (int r = 0; r < 2; ++r) {
            for (int j = 0; j < 3; ++j) dup.features[size_t((2 * i + r) * 3 + j)] = v[j];
            dup.labels[size_t(2 * i + r)] = uint16_t(i);
        }
    }
    const double dup_map = retrieval_map(dup);
    s.add("oracle/map", worst <= 1e-9 && dup_map == 1.0, "max abs diff " + fmt(worst));
}

void check_knn_oracle(Suite& s, Rng& rng) {
    // 3-class gaussian blobs, compare vote-by-vote with the reference
    const int per = 10, d2 = 3;
    FeatureSet train;
    train.n = 3 * per;
    train.dim = d2;
    train.features.resize(size_t(train.n) * d2);
    train.labels.resize(static_cast<size_t>(train.n));
    std::vector<std::vector<double>> tr;
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < per; ++i) {
            std::vector<double> row(d2);
            for (int j = 0; j < d2; ++j) {
                row[size_t(j)] = (j == c ? 3.0 : 0.0) + rng.normal(0.0, 0.5);
                train.features[size_t((c * per + i) * d2 + j)] = float(row[size_t(j)]);
            }
            train.labels[size_t(c * per + i)] = uint16_t(c);
            tr.push_back(row);
        }
    bool ok = true;
    for (int q = 0; q < 30; ++q) {
        FeatureSet test;
        test.n = 1;
        test.dim = d2;
        test.features.resize(static_cast<size_t>(d2));
        std::vector<double> query(d2);
        for (int j = 0; j < d2; ++j) {
            query[size_t(j)] = rng.normal(0.0, 2.0);
            test.features[size_t(j)] = float(query[size_t(j)]);
        }
        const int ref = oracle::knn_predict_reference(tr, train.labels, query, 5, 0.07);
        test.labels = {uint16_t(ref)};
        ok = ok && knn_classify(train, test, 5, 0.07) == 1.0;
    }
    s.add("oracle/knn", ok, ok ? "matches exhaustive reference on 30 queries" : "mismatch");
}

void check_entropy(Suite& s, Rng& rng) {
    BinaryCodeSet constant;
    constant.n = 100;
    constant.bits = 16;
    constant.packed.assign(100 * 2, 0xAA);
    const auto crep = code_entropy(constant, 8);
    bool ok = crep.marginal_mean == 0.0 && crep.block_mean == 0.0;

    BinaryCodeSet fair;
    fair.n = 10000;
    fair.bits = 64;
    fair.packed.resize(size_t(fair.n) * 8);
    for (auto& byte : fair.packed) byte = uint8_t(rng.next_u64() & 0xff);
    const auto frep = code_entropy(fair, 8);
    ok = ok && frep.marginal_mean >= 0.999 && frep.block_mean >= 7.5 && frep.block_mean < 8.0;
    s.add("oracle/entropy", ok,
          "fair-bit marginal " + fmt(frep.marginal_mean) + ", block " + fmt(frep.block_mean));
}

void check_mi(Suite& s, Rng& rng) {
    const int n = 10000;
    BinaryCodeSet codes;
    codes.n = n;
    codes.bits = 8;
    codes.packed.assign(static_cast<size_t>(n), 0);
    std::vector<uint16_t> factors(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const bool f = rng.bernoulli(0.5);
        factors[size_t(i)] = f ? 1 : 0;
        codes.set(i, 0, f);                    // planted identity bit
        codes.set(i, 1, rng.bernoulli(0.5));   // independent bit
    }
    const auto mi = factor_bit_mutual_information(codes, factors, 1);
    const bool ok = mi[0] >= 0.99 && mi[1] <= 0.01;
    s.add("oracle/mi", ok, "planted " + fmt(mi[0]) + ", independent " + fmt(mi[1]));
}

}  // namespace

std::string VerifyReport::table() const {
    std::ostringstream os;
    size_t width = 4;
    for (const auto& c : checks) width = std::max(width, c.name.size());
    for (const auto& c : checks) {
        os << (c.pass ? "PASS  " : "FAIL  ") << c.name;
        for (size_t i = c.name.size(); i < width + 2; ++i) os << ' ';
        os << c.detail << "\n";
    }
    os << (all_pass ? "all checks passed" : "CHECKS FAILED") << "\n";
    return os.str();
}

VerifyReport run_verification(const std::string& inject_fault) {
    if (!inject_fault.empty() && inject_fault != "logdet-grad-sign")
        raise(ErrCode::config, "unknown fault '" + inject_fault + "'");
    testing::logdet_grad_sign_flip.store(inject_fault == "logdet-grad-sign");

    Suite s;
    Rng rng(20240711);
    check_primitive_grads(s, rng);
    check_loss_grads(s, rng);
    check_bce_oracle(s, rng);
    check_logdet_oracle(s, rng);
    check_jacobi(s, rng);
    check_spectrum(s, rng);
    check_map_oracle(s, rng);
    check_knn_oracle(s, rng);
    check_entropy(s, rng);
    check_mi(s, rng);

    testing::logdet_grad_sign_flip.store(false);
    return s.report;
}

}  // namespace bits
