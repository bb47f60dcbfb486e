#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "bits/model.hpp"

using namespace bits;

namespace {

ModelConfig conv_config(uint64_t seed = 7) {
    ModelConfig cfg;
    cfg.backbone = BackboneKind::small_conv;
    cfg.in_h = 16;
    cfg.in_w = 16;
    cfg.in_c = 3;
    cfg.backbone_dim = 32;
    cfg.head_hidden = 32;
    cfg.head_out = 16;
    cfg.init_seed = seed;
    return cfg;
}

bool params_equal(const BranchParams<float>& a, const BranchParams<float>& b) {
    std::vector<const Parameter<float>*> pa, pb;
    a.for_each([&](const Parameter<float>& p) { pa.push_back(&p); });
    b.for_each([&](const Parameter<float>& p) { pb.push_back(&p); });
    if (pa.size() != pb.size()) return false;
    for (size_t i = 0; i < pa.size(); ++i) {
        if (pa[i]->value.size() != pb[i]->value.size()) return false;
        for (int64_t j = 0; j < pa[i]->value.size(); ++j)
            if (pa[i]->value[j] != pb[i]->value[j]) return false;
    }
    return true;
}

Tensor<float> random_batch(Rng& rng, int n, int h, int w, int c) {
    Tensor<float> x(Shape{n, h, w, c});
    for (int64_t i = 0; i < x.size(); ++i) x[i] = float(rng.normal());
    return x;
}

}  // namespace

TEST_CASE("init is deterministic per seed and clones the teacher") {
    auto a = init_model<float>(conv_config(3));
    auto b = init_model<float>(conv_config(3));
    CHECK(params_equal(a.student, b.student));
    CHECK(params_equal(a.student, a.teacher));

    auto c = init_model<float>(conv_config(4));
    CHECK(!params_equal(a.student, c.student));
}

TEST_CASE("head_out must be a positive multiple of 8") {
    ModelConfig cfg = conv_config();
    cfg.head_out = 12;
    CHECK_THROWS_AS(init_model<float>(cfg), BitsError);
    cfg.head_out = 4;
    CHECK_THROWS_AS(init_model<float>(cfg), BitsError);
}

TEST_CASE("head has exactly three affine layers with the configured widths") {
    auto pair = init_model<float>(conv_config());
    REQUIRE(pair.student.head.size() == 3);
    CHECK(pair.student.head[0].w.value.shape() == Shape{32, 32});
    CHECK(pair.student.head[2].w.value.shape() == Shape{32, 16});
}

TEST_CASE("zero input through a zeroed final head layer gives all-zero logits") {
    auto pair = init_model<float>(conv_config());
    pair.student.head[2].w.value.fill(0.0f);
    pair.student.head[2].b.value.fill(0.0f);
    Tape<float> t;
    auto bb = bind_branch(t, pair.student, false);
    Tensor<float> zero(Shape{2, 16, 16, 3});
    const auto out = forward_branch(t, pair.cfg, bb, t.constant(zero));
    for (int64_t i = 0; i < out.logits.val().size(); ++i) CHECK(out.logits.val()[i] == 0.0f);
}

TEST_CASE("teacher forward allocates no gradient state; outputs match student at init") {
    Rng rng(5);
    auto pair = init_model<float>(conv_config());
    Tensor<float> x = random_batch(rng, 3, 16, 16, 3);
    Tape<float> t;
    auto tb = bind_branch(t, pair.teacher, false);
    const auto tout = forward_branch(t, pair.cfg, tb, t.constant(x));
    CHECK(!tout.logits.requires_grad());
    CHECK(t.node(tout.logits.id).grad.size() == 0);

    auto sb = bind_branch(t, pair.student, true);
    const auto sout = forward_branch(t, pair.cfg, sb, t.constant(x));
    CHECK(sout.logits.requires_grad());
    for (int64_t i = 0; i < tout.logits.val().size(); ++i)
        CHECK(tout.logits.val()[i] == sout.logits.val()[i]);  // exact: cloned parameters
}

TEST_CASE("forward is a pure function: bitwise identical on repeated calls") {
    Rng rng(6);
    auto pair = init_model<float>(conv_config());
    Tensor<float> x = random_batch(rng, 2, 16, 16, 3);
    Tape<float> t1, t2;
    const auto a = forward_branch(t1, pair.cfg, bind_branch(t1, pair.student, false), t1.constant(x));
    const auto b = forward_branch(t2, pair.cfg, bind_branch(t2, pair.student, false), t2.constant(x));
    for (int64_t i = 0; i < a.logits.val().size(); ++i)
        CHECK(a.logits.val()[i] == b.logits.val()[i]);
}

TEST_CASE("conv backbone accepts smaller local views") {
    Rng rng(16);
    auto pair = init_model<float>(conv_config());
    Tensor<float> local = random_batch(rng, 2, 8, 8, 3);
    Tape<float> t;
    const auto out =
        forward_branch(t, pair.cfg, bind_branch(t, pair.student, false), t.constant(local));
    CHECK(out.features.shape() == Shape{2, 32});
    CHECK(out.logits.shape() == Shape{2, 16});
}

TEST_CASE("mlp backbone rejects off-size inputs") {
    ModelConfig cfg = conv_config();
    cfg.backbone = BackboneKind::mlp;
    auto pair = init_model<float>(cfg);
    Rng rng(2);
    Tensor<float> small = random_batch(rng, 2, 8, 8, 3);
    Tape<float> t;
    CHECK_THROWS_AS(
        forward_branch(t, pair.cfg, bind_branch(t, pair.student, false), t.constant(small)),
        BitsError);
}

TEST_CASE("non-finite activations are hard errors naming the layer") {
    auto pair = init_model<float>(conv_config());
    pair.student.convs[1].w.value.fill(std::numeric_limits<float>::infinity());
    Rng rng(3);
    Tensor<float> x = random_batch(rng, 1, 16, 16, 3);
    Tape<float> t;
    CHECK_THROWS_WITH_AS(
        forward_branch(t, pair.cfg, bind_branch(t, pair.student, false), t.constant(x)),
        doctest::Contains("backbone layer 1"), BitsError);
}

TEST_CASE("ema_update: m = 1 freezes, m = 0 copies, m = 0.5 averages") {
    auto pair = init_model<float>(conv_config());
    auto before = pair.teacher;
    pair.student.head[0].w.value.fill(4.0f);
    ema_update(pair, 1.0);
    CHECK(params_equal(pair.teacher, before));

    ema_update(pair, 0.0);
    CHECK(params_equal(pair.teacher, pair.student));

    pair.teacher.head[0].w.value.fill(2.0f);
    pair.student.head[0].w.value.fill(4.0f);
    ema_update(pair, 0.5);
    CHECK(pair.teacher.head[0].w.value[0] == 3.0f);
}

TEST_CASE("ema compounding on a frozen student matches a single update") {
    auto a = init_model<float>(conv_config(11));
    auto b = init_model<float>(conv_config(11));
    // push teachers away from the (shared, frozen) student
    a.teacher.head[0].w.value.fill(1.0f);
    b.teacher.head[0].w.value.fill(1.0f);
    const double m1 = 0.9, m2 = 0.7;
    ema_update(a, m1);
    ema_update(a, m2);
    ema_update(b, m1 * m2);  // against a fixed student the momenta compound
    std::vector<const Parameter<float>*> pa, pb;
    a.teacher.for_each([&](const Parameter<float>& p) { pa.push_back(&p); });
    b.teacher.for_each([&](const Parameter<float>& p) { pb.push_back(&p); });
    for (size_t i = 0; i < pa.size(); ++i)
        for (int64_t j = 0; j < pa[i]->value.size(); ++j)
            CHECK(double(pa[i]->value[j]) ==
                  doctest::Approx(double(pb[i]->value[j])).epsilon(1e-6));
}

TEST_CASE("reset_heads schedule: n = 0 never fires, n = 10 fires at 10, 20, 30") {
    auto pair = init_model<float>(conv_config());
    for (int epoch = 1; epoch <= 30; ++epoch) CHECK(!reset_heads(pair, epoch, 0));
    std::vector<int> fired;
    for (int epoch = 1; epoch <= 30; ++epoch)
        if (reset_heads(pair, epoch, 10)) fired.push_back(epoch);
    CHECK(fired == std::vector<int>{10, 20, 30});
}

TEST_CASE("reset changes the head, keeps backbones bitwise, and clones both heads") {
    auto pair = init_model<float>(conv_config(9));
    auto before = pair;
    REQUIRE(reset_heads(pair, 10, 10, true));

    bool head_changed = false;
    for (size_t l = 0; l < pair.student.head.size(); ++l)
        for (int64_t i = 0; i < pair.student.head[l].w.value.size(); ++i)
            head_changed = head_changed ||
                           pair.student.head[l].w.value[i] != before.student.head[l].w.value[i];
    CHECK(head_changed);

    for (size_t l = 0; l < pair.student.convs.size(); ++l)
        for (int64_t i = 0; i < pair.student.convs[l].w.value.size(); ++i) {
            CHECK(pair.student.convs[l].w.value[i] == before.student.convs[l].w.value[i]);
            CHECK(pair.teacher.convs[l].w.value[i] == before.teacher.convs[l].w.value[i]);
        }

    for (size_t l = 0; l < pair.student.head.size(); ++l)
        for (int64_t i = 0; i < pair.student.head[l].w.value.size(); ++i)
            CHECK(pair.student.head[l].w.value[i] == pair.teacher.head[l].w.value[i]);
}

TEST_CASE("student-only reset leaves the teacher head in place") {
    auto pair = init_model<float>(conv_config(13));
    auto before_teacher = pair.teacher;
    force_head_reset(pair, false);
    CHECK(params_equal(pair.teacher, before_teacher));
    CHECK(!params_equal(pair.student, pair.teacher));
}

TEST_CASE("head reset draws differ across consecutive resets") {
    auto pair = init_model<float>(conv_config(15));
    force_head_reset(pair, true);
    auto first = pair.student.head[0].w.value;
    force_head_reset(pair, true);
    bool differs = false;
    for (int64_t i = 0; i < first.size(); ++i)
        differs = differs || first[i] != pair.student.head[0].w.value[i];
    CHECK(differs);
}

TEST_CASE("momentum schedule endpoints and midpoint") {
    CHECK(momentum_schedule(0, 100, 0.996, 1.0) == doctest::Approx(0.996).epsilon(1e-12));
    CHECK(momentum_schedule(100, 100, 0.996, 1.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(momentum_schedule(50, 100, 0.996, 1.0) == doctest::Approx(0.998).epsilon(1e-12));
}
