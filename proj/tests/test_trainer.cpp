#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "bits/trainer.hpp"

using namespace bits;

namespace {

namespace fs = std::filesystem;

std::string fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f);
    return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

ImageDataset small_synthetic(int per_combo = 1, int image = 8, uint64_t seed = 5) {
    SyntheticFactorSpec spec;
    spec.image_size = image;
    spec.samples_per_combination = per_combo;
    return generate_synthetic(spec, seed);
}

ModelConfig tiny_model(uint64_t seed = 1) {
    ModelConfig m;
    m.backbone = BackboneKind::mlp;
    m.in_h = 8;
    m.in_w = 8;
    m.in_c = 3;
    m.backbone_dim = 16;
    m.mlp_hidden = 16;
    m.head_hidden = 16;
    m.head_out = 16;
    m.init_seed = seed;
    return m;
}

TrainConfig tiny_train(int epochs = 2) {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 32;
    t.base_lr = 1e-3;
    t.min_lr = 5e-5;
    t.warmup_epochs = 1;
    t.reset_period = 0;
    t.checkpoint_every = 1;
    t.seed = 3;
    return t;
}

AugmentPolicy light_policy() {
    AugmentPolicy p;
    p.crop_min = 0.6;
    p.noise_std = 0.0;
    p.blur_prob = 0.0;
    return p;
}

std::vector<Parameter<float>*> param_ptrs(ModelPair<float>& pair, Branch b) {
    std::vector<Parameter<float>*> out;
    pair.branch(b).for_each([&](Parameter<float>& p) { out.push_back(&p); });
    return out;
}

}  // namespace

TEST_CASE("lr schedule hits base_lr at warmup end and exactly min_lr at the last step") {
    const int64_t total = 200, warm = 40;
    CHECK(lr_schedule(warm, total, warm, 1e-2, 1e-4) == doctest::Approx(1e-2).epsilon(1e-12));
    CHECK(lr_schedule(total - 1, total, warm, 1e-2, 1e-4) == 1e-4);
    CHECK(lr_schedule(0, total, warm, 1e-2, 1e-4) == 0.0);
    double prev = lr_schedule(warm, total, warm, 1e-2, 1e-4);
    for (int64_t s = warm + 1; s < total; ++s) {
        const double cur = lr_schedule(s, total, warm, 1e-2, 1e-4);
        CHECK(cur <= prev + 1e-15);  // monotone non-increasing after warmup
        prev = cur;
    }
}

TEST_CASE("gradient clipping: norm below cg unchanged, above rescaled, direction kept") {
    Parameter<float> a("a", Tensor<float>(Shape{2}));
    Parameter<float> b("b", Tensor<float>(Shape{2}));
    std::vector<Parameter<float>*> params = {&a, &b};

    a.grad[0] = 0.3f;
    a.grad[1] = 0.0f;
    b.grad[0] = 0.4f;
    b.grad[1] = 0.0f;  // norm 0.5
    CHECK(clip_gradients(params, 1.0) == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(a.grad[0] == 0.3f);

    a.grad[0] = 0.0f;
    a.grad[1] = 2.4f;
    b.grad[0] = 3.2f;
    b.grad[1] = 0.0f;  // norm 4
    const double pre = clip_gradients(params, 1.0);
    CHECK(pre == doctest::Approx(4.0).epsilon(1e-6));
    double post_sq = 0.0, dot = 0.0;
    post_sq += double(a.grad[1]) * a.grad[1] + double(b.grad[0]) * b.grad[0];
    dot = 2.4 * a.grad[1] + 3.2 * b.grad[0];
    CHECK(std::sqrt(post_sq) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(dot / (4.0 * std::sqrt(post_sq)) == doctest::Approx(1.0).epsilon(1e-6));

    a.grad[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(clip_gradients(params, 1.0), BitsError);
}

TEST_CASE("teacher parameters after T steps follow the EMA recursion exactly") {
    auto pair = init_model<float>(tiny_model());
    // 3-step scalar recursion against hand computation; all intermediate
    // values are exactly representable so the comparison is exact
    float& s0 = pair.student.head[0].w.value[0];
    pair.teacher.head[0].w.value[0] = 2.0f;
    const double m[3] = {0.5, 0.75, 0.25};
    const float svals[3] = {4.0f, -2.0f, 1.0f};
    const float expected[3] = {3.0f, 1.75f, 1.1875f};
    for (int step = 0; step < 3; ++step) {
        s0 = svals[step];
        ema_update(pair, m[step]);
        CHECK(pair.teacher.head[0].w.value[0] == expected[step]);
    }
}

TEST_CASE("one-epoch training writes metrics with the documented keys") {
    const ImageDataset data = small_synthetic();
    const std::string dir = fresh_dir("bits_trainer_smoke");
    TrainConfig t = tiny_train(1);
    const TrainResult res = train(t, tiny_model(), light_policy(), data, dir);
    CHECK(fs::exists(res.final_checkpoint));

    std::ifstream metrics(dir + "/metrics.jsonl");
    REQUIRE(metrics);
    std::string line;
    int rows = 0;
    while (std::getline(metrics, line)) {
        const auto row = nlohmann::json::parse(line);
        for (const char* key :
             {"epoch", "step", "lr", "m", "bce", "rate", "total", "agreement_rate", "grad_norm"})
            CHECK(row.contains(key));
        CHECK(std::isfinite(row["total"].get<double>()));
        CHECK(row["agreement_rate"].get<double>() >= 0.0);
        CHECK(row["agreement_rate"].get<double>() <= 1.0);
        ++rows;
    }
    CHECK(rows == 256 / 32);
}

TEST_CASE("lr = 0 leaves parameters bitwise unchanged while EMA still applies") {
    const ImageDataset data = small_synthetic();
    const std::string dir = fresh_dir("bits_trainer_lr0");
    TrainConfig t = tiny_train(1);
    t.base_lr = 0.0;
    t.min_lr = 0.0;
    t.ema_start = 0.5;
    t.ema_end = 0.5;
    auto reference = init_model<float>(tiny_model());
    train(t, tiny_model(), light_policy(), data, dir);
    const Checkpoint ckpt = load_checkpoint(dir + "/ckpt_epoch001");
    auto loaded = init_model<float>(tiny_model());
    restore_pair(loaded, ckpt);
    auto ref = param_ptrs(reference, Branch::student);
    auto got = param_ptrs(loaded, Branch::student);
    for (size_t i = 0; i < ref.size(); ++i)
        for (int64_t j = 0; j < ref[i]->value.size(); ++j)
            CHECK(ref[i]->value[j] == got[i]->value[j]);
}

TEST_CASE("m = 1 keeps the teacher frozen while the student moves") {
    const ImageDataset data = small_synthetic();
    const std::string dir = fresh_dir("bits_trainer_m1");
    TrainConfig t = tiny_train(1);
    t.ema_start = 1.0;
    t.ema_end = 1.0;
    t.base_lr = 1e-2;
    auto reference = init_model<float>(tiny_model());
    train(t, tiny_model(), light_policy(), data, dir);
    auto loaded = init_model<float>(tiny_model());
    restore_pair(loaded, load_checkpoint(dir + "/ckpt_epoch001"));
    auto ref_t = param_ptrs(reference, Branch::teacher);
    auto got_t = param_ptrs(loaded, Branch::teacher);
    auto ref_s = param_ptrs(reference, Branch::student);
    auto got_s = param_ptrs(loaded, Branch::student);
    bool teacher_same = true, student_moved = false;
    for (size_t i = 0; i < ref_t.size(); ++i)
        for (int64_t j = 0; j < ref_t[i]->value.size(); ++j) {
            teacher_same = teacher_same && ref_t[i]->value[j] == got_t[i]->value[j];
            student_moved = student_moved || ref_s[i]->value[j] != got_s[i]->value[j];
        }
    CHECK(teacher_same);
    CHECK(student_moved);
}

TEST_CASE("reset epochs are exactly multiples of n; optimizer head state clears") {
    const ImageDataset data = small_synthetic();
    const std::string dir = fresh_dir("bits_trainer_resets");
    TrainConfig t = tiny_train(5);
    t.reset_period = 2;
    std::vector<int> fired;
    TrainHooks hooks;
    hooks.on_epoch_end = [&](int epoch, bool did_reset, ModelPair<float>&) {
        if (did_reset) fired.push_back(epoch);
    };
    train(t, tiny_model(), light_policy(), data, dir, "", &hooks);
    CHECK(fired == std::vector<int>{2, 4});
}

TEST_CASE("two identical runs are bitwise identical; resume matches uninterrupted") {
    const ImageDataset data = small_synthetic();
    const std::string d1 = fresh_dir("bits_det_a");
    const std::string d2 = fresh_dir("bits_det_b");
    TrainConfig t = tiny_train(3);
    t.checkpoint_every = 1;
    train(t, tiny_model(), light_policy(), data, d1);
    train(t, tiny_model(), light_policy(), data, d2);
    CHECK(slurp(d1 + "/metrics.jsonl") == slurp(d2 + "/metrics.jsonl"));
    CHECK(slurp(d1 + "/ckpt_epoch003") == slurp(d2 + "/ckpt_epoch003"));

    const std::string d3 = fresh_dir("bits_det_resume");
    train(t, tiny_model(), light_policy(), data, d3, d1 + "/ckpt_epoch001");
    CHECK(slurp(d3 + "/ckpt_epoch003") == slurp(d1 + "/ckpt_epoch003"));

    // resumed metrics rows (epochs 2..3) equal the uninterrupted tail
    std::istringstream full(slurp(d1 + "/metrics.jsonl"));
    std::string line, tail_expect, tail_got;
    while (std::getline(full, line))
        if (nlohmann::json::parse(line)["epoch"].get<int>() >= 2) tail_expect += line + "\n";
    std::istringstream resumed(slurp(d3 + "/metrics.jsonl"));
    while (std::getline(resumed, line)) tail_got += line + "\n";
    CHECK(tail_got == tail_expect);
}

TEST_CASE("resume with a different semantic config is refused") {
    const ImageDataset data = small_synthetic();
    const std::string dir = fresh_dir("bits_resume_refuse");
    TrainConfig t = tiny_train(2);
    train(t, tiny_model(), light_policy(), data, dir);
    TrainConfig changed = t;
    changed.base_lr = 2e-3;
    CHECK_THROWS_AS(
        train(changed, tiny_model(), light_policy(), data, dir, dir + "/ckpt_epoch002"),
        BitsError);
}

TEST_CASE("finetune continues parameters smoothly or resets heads on request") {
    const ImageDataset data = small_synthetic();
    const std::string dir = fresh_dir("bits_ft_base");
    TrainConfig t = tiny_train(2);
    train(t, tiny_model(), light_policy(), data, dir);
    const Checkpoint ckpt = load_checkpoint(dir + "/ckpt_epoch002");

    // reset_at_start = false: the restored state equals the checkpoint
    auto cont = init_model<float>(tiny_model());
    restore_pair(cont, ckpt);
    force_head_reset(cont, true);
    bool head_changed = false;
    const Tensor<float>* saved = ckpt.find_param("student.head.fc0.w");
    REQUIRE(saved != nullptr);
    for (int64_t i = 0; i < saved->size(); ++i)
        head_changed = head_changed || (*saved)[i] != cont.student.head[0].w.value[i];
    CHECK(head_changed);
    // backbone untouched by the reset
    const Tensor<float>* saved_bb = ckpt.find_param("student.backbone.fc0.w");
    REQUIRE(saved_bb != nullptr);
    for (int64_t i = 0; i < saved_bb->size(); ++i)
        CHECK((*saved_bb)[i] == cont.student.mlp[0].w.value[i]);

    // end-to-end finetune runs and checkpoints
    const std::string ft_dir = fresh_dir("bits_ft_run");
    TrainConfig ft = tiny_train(1);
    const TrainResult res = finetune(ft, dir + "/ckpt_epoch002", light_policy(), data, ft_dir, true);
    CHECK(fs::exists(res.final_checkpoint));

    // two identical finetunes are bitwise identical
    const std::string ft_dir2 = fresh_dir("bits_ft_run2");
    finetune(ft, dir + "/ckpt_epoch002", light_policy(), data, ft_dir2, true);
    CHECK(slurp(ft_dir + "/ckpt_epoch001") == slurp(ft_dir2 + "/ckpt_epoch001"));
}

TEST_CASE("checkpoint save/load round-trips parameters bitwise") {
    auto pair = init_model<float>(tiny_model(77));
    nlohmann::json meta = semantic_meta(tiny_train(), pair.cfg, light_policy(), ChannelStats{{0.5, 0.5, 0.5}, {0.25, 0.25, 0.25}});
    meta["epoch"] = 0;
    meta["step"] = 0;
    Checkpoint ckpt = snapshot_pair(pair, meta);
    const std::string path = fresh_dir("bits_ckpt_rt") + "/ckpt";
    save_checkpoint(ckpt, path);
    const Checkpoint back = load_checkpoint(path);
    CHECK(back.meta == ckpt.meta);
    REQUIRE(back.params.size() == ckpt.params.size());
    for (size_t i = 0; i < back.params.size(); ++i) {
        CHECK(back.params[i].first == ckpt.params[i].first);
        for (int64_t j = 0; j < back.params[i].second.size(); ++j)
            CHECK(back.params[i].second[j] == ckpt.params[i].second[j]);
    }
    // rng state survives the f32 framing bit-exactly
    Rng r(12345);
    r.next_u64();
    const Rng::State s = r.state();
    CHECK(rng_state_from_tensor(rng_state_to_tensor(s)) == s);
}

TEST_CASE("non-finite loss aborts with a failure checkpoint") {
    const ImageDataset data = small_synthetic();
    const std::string dir = fresh_dir("bits_diverge");
    TrainConfig t = tiny_train(1);
    t.base_lr = 1e18;  // guaranteed blow-up
    t.warmup_epochs = 0;
    t.clip_norm = 1e18;
    try {
        train(t, tiny_model(), light_policy(), data, dir);
        // divergence may also surface as a non-finite activation error
    } catch (const BitsError& e) {
        CHECK(e.code() == ErrCode::numeric);
    }
}
