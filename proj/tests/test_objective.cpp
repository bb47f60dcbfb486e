#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "bits/objective.hpp"

using namespace bits;

namespace {

ModelConfig tiny_model_config(uint64_t seed = 1) {
    ModelConfig cfg;
    cfg.backbone = BackboneKind::mlp;
    cfg.in_h = 4;
    cfg.in_w = 4;
    cfg.in_c = 1;
    cfg.backbone_dim = 8;
    cfg.mlp_hidden = 8;
    cfg.head_hidden = 8;
    cfg.head_out = 16;
    cfg.init_seed = seed;
    return cfg;
}

ViewBatch<float> random_views(Rng& rng, int n_global, int n_local, int n = 6) {
    ViewBatch<float> vb;
    for (int g = 0; g < n_global; ++g) {
        Tensor<float> v(Shape{n, 4, 4, 1});
        for (int64_t i = 0; i < v.size(); ++i) v[i] = float(rng.normal());
        vb.globals.push_back(std::move(v));
    }
    for (int l = 0; l < n_local; ++l) {
        Tensor<float> v(Shape{n, 4, 4, 1});
        for (int64_t i = 0; i < v.size(); ++i) v[i] = float(rng.normal());
        vb.locals.push_back(std::move(v));
    }
    return vb;
}

}  // namespace

TEST_CASE("binarize_targets thresholds at zero, exact zeros map to 0") {
    Tensor<float> logits(Shape{1, 3});
    logits[0] = 0.3f;
    logits[1] = -0.2f;
    logits[2] = 0.0f;
    const Tensor<uint8_t> bits = binarize_targets(logits);
    CHECK(bits[0] == 1);
    CHECK(bits[1] == 0);
    CHECK(bits[2] == 0);
}

TEST_CASE("binarize_targets all-negative row is all zero") {
    Tensor<float> logits(Shape{2, 4});
    logits.fill(-5.0f);
    const Tensor<uint8_t> bits = binarize_targets(logits);
    for (int64_t i = 0; i < bits.size(); ++i) CHECK(bits[i] == 0);
}

TEST_CASE("binarize matches the sigmoid threshold on 1000 random logits") {
    Rng rng(77);
    Tensor<float> logits(Shape{1, 1000});
    for (int i = 0; i < 1000; ++i) logits[i] = float(rng.normal(0.0, 3.0));
    const Tensor<uint8_t> bits = binarize_targets(logits);
    for (int i = 0; i < 1000; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-double(logits[i])));
        CHECK(int(bits[i]) == int(p > 0.5));
    }
}

TEST_CASE("binarize_targets rejects NaN logits") {
    Tensor<float> logits(Shape{1, 2});
    logits[1] = std::nanf("");
    CHECK_THROWS_AS(binarize_targets(logits), BitsError);
}

TEST_CASE("binary agreement loss: perfect agreement is ~0, zero logits give log 2") {
    Rng rng(3);
    const int n = 4, b = 8;
    Tensor<uint8_t> bits(Shape{n, b});
    for (int64_t i = 0; i < bits.size(); ++i) bits[i] = rng.bernoulli(0.5) ? 1 : 0;

    Tape<float> t;
    Tensor<float> perfect(Shape{n, b});
    for (int64_t i = 0; i < perfect.size(); ++i) perfect[i] = bits[i] ? 50.0f : -50.0f;
    const auto pairing = view_pairing(2, 0);
    std::vector<Value<float>> sl = {t.constant(perfect), t.constant(perfect)};
    std::vector<Tensor<uint8_t>> tb = {bits, bits};
    CHECK(double(binary_agreement_loss(t, sl, tb, pairing).val()[0]) ==
          doctest::Approx(0.0).epsilon(1e-9));

    Tensor<float> zeros(Shape{n, b});
    std::vector<Value<float>> zl = {t.constant(zeros), t.constant(zeros)};
    CHECK(double(binary_agreement_loss(t, zl, tb, pairing).val()[0]) ==
          doctest::Approx(std::log(2.0)).epsilon(1e-7));
}

TEST_CASE("two-view symmetric loss equals the hand-computed form on a 2x4 instance") {
    // direct formula oracle: mean over both directions, batch and bits of
    // -z log s(a) - (1-z) log(1-s(a))
    const int n = 2, b = 4;
    Tape<float> t;
    Tensor<float> a1(Shape{n, b}), a2(Shape{n, b});
    Tensor<uint8_t> z1(Shape{n, b}), z2(Shape{n, b});
    Rng rng(10);
    for (int64_t i = 0; i < a1.size(); ++i) {
        a1[i] = float(rng.normal());
        a2[i] = float(rng.normal());
        z1[i] = rng.bernoulli(0.5) ? 1 : 0;
        z2[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    double hand = 0.0;
    for (int64_t i = 0; i < a1.size(); ++i) {
        const double s2 = 1.0 / (1.0 + std::exp(-double(a2[i])));
        const double s1 = 1.0 / (1.0 + std::exp(-double(a1[i])));
        hand += -(double(z1[i]) * std::log(s2) + (1.0 - z1[i]) * std::log(1.0 - s2));
        hand += -(double(z2[i]) * std::log(s1) + (1.0 - z2[i]) * std::log(1.0 - s1));
    }
    hand /= double(2 * n * b);
    std::vector<Value<float>> sl = {t.constant(a1), t.constant(a2)};
    std::vector<Tensor<uint8_t>> tb = {z1, z2};
    const double got = double(binary_agreement_loss(t, sl, tb, view_pairing(2, 0)).val()[0]);
    CHECK(got == doctest::Approx(hand).epsilon(1e-6));
}

TEST_CASE("empty pairing is a hard error") {
    Tape<float> t;
    std::vector<Value<float>> sl = {t.constant(Tensor<float>(Shape{2, 8}))};
    std::vector<Tensor<uint8_t>> tb = {Tensor<uint8_t>(Shape{2, 8})};
    CHECK_THROWS_AS(binary_agreement_loss(t, sl, tb, {}), BitsError);
}

TEST_CASE("soft targets: tau -> 0 limit reproduces hard targets away from 0") {
    Rng rng(21);
    const int n = 4, b = 8;
    Tensor<float> s_logits(Shape{n, b}), t_logits(Shape{n, b});
    for (int64_t i = 0; i < s_logits.size(); ++i) {
        s_logits[i] = float(rng.normal());
        double v = rng.normal();
        if (std::abs(v) < 0.2) v = v < 0 ? -0.2 : 0.2;  // bounded away from 0
        t_logits[i] = float(v);
    }
    Tape<float> t;
    std::vector<Value<float>> sl = {t.constant(s_logits), t.constant(s_logits)};
    std::vector<Tensor<float>> tl = {t_logits, t_logits};
    std::vector<Tensor<uint8_t>> tb = {binarize_targets(t_logits), binarize_targets(t_logits)};
    const auto pairing = view_pairing(2, 0);
    const double soft = double(soft_agreement_loss(t, sl, tl, pairing, 1e-6).val()[0]);
    const double hard = double(binary_agreement_loss(t, sl, tb, pairing).val()[0]);
    CHECK(soft == doctest::Approx(hard).epsilon(1e-4));
}

TEST_CASE("soft targets: teacher logit 0 gives target 0.5 and loss log 2 at student 0") {
    Tape<float> t;
    Tensor<float> zero(Shape{1, 4});
    std::vector<Value<float>> sl = {t.constant(zero), t.constant(zero)};
    std::vector<Tensor<float>> tl = {zero, zero};
    const double loss =
        double(soft_agreement_loss(t, sl, tl, view_pairing(2, 0), 0.7).val()[0]);
    CHECK(loss == doctest::Approx(std::log(2.0)).epsilon(1e-7));
}

TEST_CASE("soft targets: tau = 1, teacher logit 2 uses sigma(2) as BCE target") {
    const double target = 1.0 / (1.0 + std::exp(-2.0));
    CHECK(target == doctest::Approx(0.8808).epsilon(1e-4));
    Tape<float> t;
    Tensor<float> s_logits(Shape{1, 1});
    s_logits[0] = 0.7f;
    Tensor<float> t_logits(Shape{1, 1});
    t_logits[0] = 2.0f;
    std::vector<Value<float>> sl = {t.constant(s_logits), t.constant(s_logits)};
    std::vector<Tensor<float>> tl = {t_logits, t_logits};
    const double got =
        double(soft_agreement_loss(t, sl, tl, view_pairing(2, 0), 1.0).val()[0]);
    const double s = 1.0 / (1.0 + std::exp(-0.7));
    const double expected = -(target * std::log(s) + (1.0 - target) * std::log(1.0 - s));
    CHECK(got == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("cosine agreement: aligned rows 0, orthogonal rows 1, random matches formula") {
    const int b = 8;
    Tensor<uint8_t> bits(Shape{1, b});
    for (int i = 0; i < b; ++i) bits[i] = i % 2;
    Tape<float> t;

    Tensor<float> aligned(Shape{1, b});
    for (int i = 0; i < b; ++i) aligned[i] = bits[i] ? 2.5f : -2.5f;  // proportional to +-1
    std::vector<Tensor<uint8_t>> tb = {bits, bits};
    std::vector<Value<float>> sa = {t.constant(aligned), t.constant(aligned)};
    CHECK(double(cosine_agreement_loss(t, sa, tb, view_pairing(2, 0)).val()[0]) ==
          doctest::Approx(0.0).epsilon(1e-6));

    Tensor<float> ortho(Shape{1, b});  // flips sign pairwise: dot with +-1 pattern is 0
    for (int i = 0; i < b; ++i) ortho[i] = (i % 4 < 2) ? 1.0f : -1.0f;
    double dot = 0.0;
    for (int i = 0; i < b; ++i) dot += double(ortho[i]) * (bits[i] ? 1.0 : -1.0);
    REQUIRE(dot == 0.0);
    std::vector<Value<float>> so = {t.constant(ortho), t.constant(ortho)};
    CHECK(double(cosine_agreement_loss(t, so, tb, view_pairing(2, 0)).val()[0]) ==
          doctest::Approx(1.0).epsilon(1e-6));

    Rng rng(5);
    Tensor<float> rnd(Shape{2, b});
    Tensor<uint8_t> rz(Shape{2, b});
    for (int64_t i = 0; i < rnd.size(); ++i) {
        rnd[i] = float(rng.normal());
        rz[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    double hand = 0.0;
    for (int r = 0; r < 2; ++r) {
        double d = 0.0, na = 0.0;
        for (int i = 0; i < b; ++i) {
            d += double(rnd.at(r, i)) * (rz.at(r, i) ? 1.0 : -1.0);
            na += double(rnd.at(r, i)) * rnd.at(r, i);
        }
        hand += 1.0 - d / ((std::sqrt(na) + 1e-12) * std::sqrt(double(b)));
    }
    hand /= 2.0;
    std::vector<Value<float>> sr = {t.constant(rnd), t.constant(rnd)};
    std::vector<Tensor<uint8_t>> tz = {rz, rz};
    CHECK(double(cosine_agreement_loss(t, sr, tz, view_pairing(2, 0)).val()[0]) ==
          doctest::Approx(hand).epsilon(1e-6));
}

TEST_CASE("total loss: beta = 0 makes total equal bce exactly") {
    Rng rng(8);
    auto pair = init_model<float>(tiny_model_config());
    ViewBatch<float> vb = random_views(rng, 2, 0);
    AgreementConfig cfg;
    cfg.beta = 0.0;
    Tape<float> t;
    const auto out = total_loss(t, pair, vb, cfg);
    CHECK(out.breakdown.total == out.breakdown.bce);
    CHECK(double(out.loss.val()[0]) == doctest::Approx(out.breakdown.bce).epsilon(1e-6));
}

TEST_CASE("total loss: identical logits collapse the rate term to zero") {
    Rng rng(9);
    auto pair = init_model<float>(tiny_model_config());
    // identical views for every batch element -> identical logits rows
    Tensor<float> one(Shape{1, 4, 4, 1});
    for (int64_t i = 0; i < one.size(); ++i) one[i] = float(rng.normal());
    Tensor<float> batch(Shape{5, 4, 4, 1});
    for (int s = 0; s < 5; ++s)
        std::copy(one.data(), one.data() + one.size(), batch.data() + s * one.size());
    ViewBatch<float> vb;
    vb.globals = {batch, batch};
    AgreementConfig cfg;
    Tape<float> t;
    const auto out = total_loss(t, pair, vb, cfg);
    CHECK(out.breakdown.rate == 0.0);
    CHECK(out.breakdown.total == doctest::Approx(out.breakdown.bce).epsilon(1e-9));
}

TEST_CASE("total loss recomposition: total = bce + beta*rate within 1e-6") {
    Rng rng(12);
    auto pair = init_model<float>(tiny_model_config());
    ViewBatch<float> vb = random_views(rng, 2, 1);
    AgreementConfig cfg;
    cfg.beta = 0.1;
    Tape<float> t;
    const auto out = total_loss(t, pair, vb, cfg);
    CHECK(out.breakdown.total ==
          doctest::Approx(out.breakdown.bce + 0.1 * out.breakdown.rate).epsilon(1e-9));
    CHECK(double(out.loss.val()[0]) == doctest::Approx(out.breakdown.total).epsilon(1e-5));
    CHECK(out.breakdown.agreement_rate >= 0.0);
    CHECK(out.breakdown.agreement_rate <= 1.0);
}

TEST_CASE("teacher parameters receive no gradient from the total loss") {
    Rng rng(13);
    auto pair = init_model<float>(tiny_model_config());
    ViewBatch<float> vb = random_views(rng, 2, 0);
    AgreementConfig cfg;
    Tape<float> t;
    auto out = total_loss(t, pair, vb, cfg);
    t.backward(out.loss);
    double teacher_grad = 0.0, student_grad = 0.0;
    pair.teacher.for_each([&](Parameter<float>& p) {
        for (int64_t i = 0; i < p.grad.size(); ++i) teacher_grad += std::abs(double(p.grad[i]));
    });
    pair.student.for_each([&](Parameter<float>& p) {
        for (int64_t i = 0; i < p.grad.size(); ++i) student_grad += std::abs(double(p.grad[i]));
    });
    CHECK(teacher_grad == 0.0);
    CHECK(student_grad > 0.0);
}

TEST_CASE("bce loss is invariant to consistent bit permutation and batch order") {
    Rng rng(14);
    const int n = 5, b = 8;
    Tensor<float> logits(Shape{n, b});
    Tensor<uint8_t> bits(Shape{n, b});
    for (int64_t i = 0; i < logits.size(); ++i) {
        logits[i] = float(rng.normal());
        bits[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    Tape<float> t;
    const auto pairing = view_pairing(2, 0);
    auto loss_of = [&](const Tensor<float>& a, const Tensor<uint8_t>& z) {
        std::vector<Value<float>> sl = {t.constant(a), t.constant(a)};
        std::vector<Tensor<uint8_t>> tb = {z, z};
        return double(binary_agreement_loss(t, sl, tb, pairing).val()[0]);
    };
    const double base = loss_of(logits, bits);

    // permute bit indices consistently
    std::vector<int> perm(b);
    for (int i = 0; i < b; ++i) perm[size_t(i)] = (i * 3 + 1) % b;
    Tensor<float> pl(Shape{n, b});
    Tensor<uint8_t> pb(Shape{n, b});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < b; ++j) {
            pl.at(i, perm[size_t(j)]) = logits.at(i, j);
            pb[int64_t(i) * b + perm[size_t(j)]] = bits[int64_t(i) * b + j];
        }
    CHECK(loss_of(pl, pb) == doctest::Approx(base).epsilon(1e-6));

    // permute batch order
    Tensor<float> rl(Shape{n, b});
    Tensor<uint8_t> rb(Shape{n, b});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < b; ++j) {
            rl.at(n - 1 - i, j) = logits.at(i, j);
            rb[int64_t(n - 1 - i) * b + j] = bits[int64_t(i) * b + j];
        }
    CHECK(loss_of(rl, rb) == doctest::Approx(base).epsilon(1e-6));
}

TEST_CASE("sum-over-bits normalization scales the loss by B") {
    Rng rng(15);
    const int n = 4, b = 8;
    Tensor<float> logits(Shape{n, b});
    Tensor<uint8_t> bits(Shape{n, b});
    for (int64_t i = 0; i < logits.size(); ++i) {
        logits[i] = float(rng.normal());
        bits[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    Tape<float> t;
    std::vector<Value<float>> sl = {t.constant(logits), t.constant(logits)};
    std::vector<Tensor<uint8_t>> tb = {bits, bits};
    const auto pairing = view_pairing(2, 0);
    const double mean_norm =
        double(binary_agreement_loss(t, sl, tb, pairing, BitNorm::mean_over_bits).val()[0]);
    const double sum_norm =
        double(binary_agreement_loss(t, sl, tb, pairing, BitNorm::sum_over_bits).val()[0]);
    CHECK(sum_norm == doctest::Approx(mean_norm * b).epsilon(1e-5));
}
