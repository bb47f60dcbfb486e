#include "bits/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace bits {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::vector<Parameter<float>*> student_params(ModelPair<float>& pair) {
    std::vector<Parameter<float>*> out;
    pair.student.for_each([&](Parameter<float>& p) { out.push_back(&p); });
    return out;
}

}  // namespace

double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr,
                   double min_lr) {
    if (step < 0 || step > total_steps)
        raise(ErrCode::invalid, "lr_schedule: step outside [0, total_steps]");
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * double(step) / double(warmup_steps);
    const int64_t last = total_steps - 1;
    if (step >= last) return min_lr;
    const double span = double(last - warmup_steps);
    const double x = span > 0.0 ? double(step - warmup_steps) / span : 1.0;
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + std::cos(kPi * x));
}

double clip_gradients(std::vector<Parameter<float>*>& params, double cg) {
    if (!(cg > 0.0)) raise(ErrCode::invalid, "clip_gradients: cg must be > 0");
    double sq = 0.0;
    for (const Parameter<float>* p : params)
        for (int64_t i = 0; i < p->grad.size(); ++i) sq += double(p->grad[i]) * double(p->grad[i]);
    const double norm = std::sqrt(sq);
    if (std::isnan(norm)) raise(ErrCode::numeric, "clip_gradients: NaN gradient norm");
    if (norm > cg) {
        const float s = float(cg / norm);
        for (Parameter<float>* p : params)
            for (int64_t i = 0; i < p->grad.size(); ++i) p->grad[i] *= s;
    }
    return norm;
}

void AdamW::attach(const std::vector<Parameter<float>*>& params) {
    slots_.clear();
    slots_.reserve(params.size());
    for (const Parameter<float>* p : params)
        slots_.push_back({Tensor<float>(p->value.shape()), Tensor<float>(p->value.shape()), 0});
}

void AdamW::reset_slot(size_t i) {
    slots_[i].m.fill(0.0f);
    slots_[i].v.fill(0.0f);
    slots_[i].t = 0;
}

void AdamW::step(const std::vector<Parameter<float>*>& params, double lr, double weight_decay) {
    if (params.size() != slots_.size()) raise(ErrCode::invalid, "AdamW: attach() before step()");
    for (size_t k = 0; k < params.size(); ++k) {
        Parameter<float>& p = *params[k];
        Slot& s = slots_[k];
        s.t += 1;
        const double bc1 = 1.0 - std::pow(beta1_, double(s.t));
        const double bc2 = 1.0 - std::pow(beta2_, double(s.t));
        const float b1 = float(beta1_), b2 = float(beta2_);
        const double wd = p.no_decay ? 0.0 : weight_decay;
        for (int64_t i = 0; i < p.value.size(); ++i) {
            const float g = p.grad[i];
            s.m[i] = b1 * s.m[i] + (1.0f - b1) * g;
            s.v[i] = b2 * s.v[i] + (1.0f - b2) * g * g;
            const double mh = double(s.m[i]) / bc1;
            const double vh = double(s.v[i]) / bc2;
            p.value[i] = float(double(p.value[i]) -
                               lr * (mh / (std::sqrt(vh) + eps_) + wd * double(p.value[i])));
        }
    }
}

// ---------------------------------------------------------------------------
// config <-> meta JSON
// ---------------------------------------------------------------------------

nlohmann::json semantic_meta(const TrainConfig& tcfg, const ModelConfig& mcfg,
                             const AugmentPolicy& policy, const ChannelStats& stats) {
    nlohmann::json j;
    j["version"] = 1;
    j["model"] = {{"backbone", backbone_name(mcfg.backbone)},
                  {"in_h", mcfg.in_h},
                  {"in_w", mcfg.in_w},
                  {"in_c", mcfg.in_c},
                  {"backbone_dim", mcfg.backbone_dim},
                  {"head_hidden", mcfg.head_hidden},
                  {"head_out", mcfg.head_out},
                  {"activation", activation_name(mcfg.activation)},
                  {"init_seed", mcfg.init_seed},
                  {"mlp_hidden", mcfg.mlp_hidden}};
    j["train"] = {{"epochs", tcfg.epochs},
                  {"batch_size", tcfg.batch_size},
                  {"base_lr", tcfg.base_lr},
                  {"min_lr", tcfg.min_lr},
                  {"warmup_epochs", tcfg.warmup_epochs},
                  {"weight_decay", tcfg.weight_decay},
                  {"clip_norm", tcfg.clip_norm},
                  {"reset_period", tcfg.reset_period},
                  {"head_reset_both", tcfg.head_reset_both},
                  {"ema_start", tcfg.ema_start},
                  {"ema_end", tcfg.ema_end},
                  {"seed", tcfg.seed},
                  {"checkpoint_every", tcfg.checkpoint_every}};
    j["agreement"] = {{"mode", agreement_mode_name(tcfg.agreement.mode)},
                      {"beta", tcfg.agreement.beta},
                      {"eps", tcfg.agreement.eps},
                      {"tau", tcfg.agreement.tau},
                      {"bit_norm", bit_norm_name(tcfg.agreement.bit_norm)},
                      {"rate_dscale", tcfg.agreement.rate_dscale}};
    j["augment"] = {{"crop_min", policy.crop_min},
                    {"crop_max", policy.crop_max},
                    {"local_crop_min", policy.local_crop_min},
                    {"local_crop_max", policy.local_crop_max},
                    {"flip_prob", policy.flip_prob},
                    {"brightness", policy.brightness},
                    {"contrast", policy.contrast},
                    {"noise_std", policy.noise_std},
                    {"blur_prob", policy.blur_prob},
                    {"n_global", policy.n_global},
                    {"n_local", policy.n_local}};
    j["norm_mean"] = stats.mean;
    j["norm_std"] = stats.stdev;
    return j;
}

ModelConfig model_config_from_meta(const nlohmann::json& meta) {
    const auto& m = meta.at("model");
    ModelConfig cfg;
    cfg.backbone = backbone_from(m.at("backbone").get<std::string>());
    cfg.in_h = m.at("in_h").get<int>();
    cfg.in_w = m.at("in_w").get<int>();
    cfg.in_c = m.at("in_c").get<int>();
    cfg.backbone_dim = m.at("backbone_dim").get<int>();
    cfg.head_hidden = m.at("head_hidden").get<int>();
    cfg.head_out = m.at("head_out").get<int>();
    cfg.activation = activation_from(m.at("activation").get<std::string>());
    cfg.init_seed = m.at("init_seed").get<uint64_t>();
    cfg.mlp_hidden = m.at("mlp_hidden").get<int>();
    return cfg;
}

ChannelStats channel_stats_from_meta(const nlohmann::json& meta) {
    ChannelStats st;
    st.mean = meta.at("norm_mean").get<std::vector<double>>();
    st.stdev = meta.at("norm_std").get<std::vector<double>>();
    return st;
}

Checkpoint snapshot_pair(const ModelPair<float>& pair, const nlohmann::json& meta) {
    Checkpoint ckpt;
    ckpt.meta = meta;
    pair.student.for_each(
        [&](const Parameter<float>& p) { ckpt.params.emplace_back("student." + p.name, p.value); });
    pair.teacher.for_each(
        [&](const Parameter<float>& p) { ckpt.params.emplace_back("teacher." + p.name, p.value); });
    ckpt.blobs.emplace_back("rng.model", rng_state_to_tensor(pair.model_rng.state()));
    return ckpt;
}

void restore_pair(ModelPair<float>& pair, const Checkpoint& ckpt) {
    std::string mismatches;
    auto restore = [&](const std::string& prefix, BranchParams<float>& branch) {
        branch.for_each([&](Parameter<float>& p) {
            const Tensor<float>* src = ckpt.find_param(prefix + p.name);
            if (!src) {
                mismatches += " missing:" + prefix + p.name;
                return;
            }
            if (!(src->shape() == p.value.shape())) {
                mismatches += " shape:" + prefix + p.name + shape_str(src->shape()) + "!=" +
                              shape_str(p.value.shape());
                return;
            }
            p.value = *src;
        });
    };
    restore("student.", pair.student);
    restore("teacher.", pair.teacher);
    if (!mismatches.empty())
        raise(ErrCode::invalid, "checkpoint does not match model:" + mismatches);
    if (const Tensor<float>* rs = ckpt.find_blob("rng.model"))
        pair.model_rng.set_state(rng_state_from_tensor(*rs));
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

namespace {

struct LoopState {
    ModelPair<float> pair;
    AdamW opt;
    std::vector<Parameter<float>*> params;
    size_t head_param_start = 0;
    ChannelStats stats;
};

nlohmann::json meta_without_progress(nlohmann::json meta) {
    meta.erase("epoch");
    meta.erase("step");
    return meta;
}

void save_state(const LoopState& st, const nlohmann::json& base_meta, int epoch, int64_t step,
                const std::string& path) {
    nlohmann::json meta = base_meta;
    meta["epoch"] = epoch;
    meta["step"] = step;
    Checkpoint ckpt = snapshot_pair(st.pair, meta);
    // optimizer slots, framed like parameters
    const auto& slots = const_cast<LoopState&>(st).opt.slots();
    Tensor<float> counts(Shape{int(slots.size())});
    for (size_t i = 0; i < slots.size(); ++i) {
        ckpt.blobs.emplace_back("opt.m.student." + st.params[i]->name, slots[i].m);
        ckpt.blobs.emplace_back("opt.v.student." + st.params[i]->name, slots[i].v);
        counts[int64_t(i)] = float(slots[i].t);
    }
    ckpt.blobs.emplace_back("opt.t", counts);
    save_checkpoint(ckpt, path);
}

void restore_optimizer(LoopState& st, const Checkpoint& ckpt) {
    auto& slots = st.opt.slots();
    const Tensor<float>* counts = ckpt.find_blob("opt.t");
    if (!counts || counts->size() != int64_t(slots.size()))
        raise(ErrCode::data, "checkpoint optimizer state missing or inconsistent");
    for (size_t i = 0; i < slots.size(); ++i) {
        const Tensor<float>* m = ckpt.find_blob("opt.m.student." + st.params[i]->name);
        const Tensor<float>* v = ckpt.find_blob("opt.v.student." + st.params[i]->name);
        if (!m || !v || !(m->shape() == slots[i].m.shape()) || !(v->shape() == slots[i].v.shape()))
            raise(ErrCode::data, "checkpoint optimizer slot mismatch for " + st.params[i]->name);
        slots[i].m = *m;
        slots[i].v = *v;
        slots[i].t = int64_t((*counts)[int64_t(i)]);
    }
}

std::vector<int64_t> epoch_order(uint64_t seed, int epoch, int64_t n) {
    std::vector<int64_t> order(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) order[size_t(i)] = i;
    Rng rng(derive_seed(seed, 0x53484655u, uint64_t(epoch)));  // shuffle stream
    for (int64_t i = n - 1; i > 0; --i) {
        const int64_t j = rng.uniform_int(i + 1);
        std::swap(order[size_t(i)], order[size_t(j)]);
    }
    return order;
}

std::string ckpt_name(int epoch) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ckpt_epoch%03d", epoch);
    return buf;
}

TrainResult run_loop(const TrainConfig& tcfg, const AugmentPolicy& policy,
                     const ImageDataset& data, const std::string& out_dir, LoopState& st,
                     const nlohmann::json& base_meta, int start_epoch, int64_t start_step,
                     const TrainHooks* hooks) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    const int64_t n = data.n;
    const int bs = tcfg.batch_size;
    if (n < bs && n < 2) raise(ErrCode::data, "dataset too small for one batch");
    int64_t spe = n / bs;
    if (n % bs >= 2) ++spe;
    if (spe < 1) raise(ErrCode::data, "dataset smaller than two samples");
    const int64_t total_steps = spe * tcfg.epochs;
    const int64_t warmup_steps = int64_t(std::llround(tcfg.warmup_epochs * double(spe)));

    const ModelConfig& mcfg = st.pair.cfg;
    const int local_h = mcfg.backbone == BackboneKind::mlp ? mcfg.in_h : std::max(4, mcfg.in_h / 2);
    const int local_w = mcfg.backbone == BackboneKind::mlp ? mcfg.in_w : std::max(4, mcfg.in_w / 2);

    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::app);
    if (!metrics) raise(ErrCode::data, "cannot open metrics file in " + out_dir);

    TrainResult result;
    result.total_steps = total_steps;
    int64_t gstep = start_step;

    for (int epoch = start_epoch + 1; epoch <= tcfg.epochs; ++epoch) {
        const std::vector<int64_t> order = epoch_order(tcfg.seed, epoch, n);
        for (int64_t b0 = 0; b0 + 2 <= n; b0 += bs) {
            const int64_t cur = std::min<int64_t>(bs, n - b0);
            if (cur < 2) break;

            // per-sample seeded views, parallel over the batch
            std::vector<ViewSet> sets(static_cast<size_t>(cur));
            parallel_for(cur, [&](int64_t i) {
                const int64_t idx = order[size_t(b0 + i)];
                Rng rng(derive_seed(tcfg.seed, uint64_t(epoch), uint64_t(idx)));
                sets[size_t(i)] =
                    make_views(data, idx, policy, mcfg.in_h, mcfg.in_w, local_h, local_w, rng);
                for (auto& v : sets[size_t(i)].globals) normalize_view(v, st.stats);
                for (auto& v : sets[size_t(i)].locals) normalize_view(v, st.stats);
            });
            ViewBatch<float> batch;
            for (int g = 0; g < policy.n_global; ++g)
                batch.globals.push_back(stack_views(sets, true, g));
            for (int l = 0; l < policy.n_local; ++l)
                batch.locals.push_back(stack_views(sets, false, l));

            const double lr = lr_schedule(gstep, total_steps, warmup_steps, tcfg.base_lr, tcfg.min_lr);
            const double m = momentum_schedule(gstep, total_steps, tcfg.ema_start, tcfg.ema_end);

            Tape<float> tape;
            TotalLossResult<float> out = total_loss(tape, st.pair, batch, tcfg.agreement);
            if (!std::isfinite(out.breakdown.total)) {
                save_state(st, base_meta, epoch, gstep, out_dir + "/ckpt_failure");
                raise(ErrCode::numeric, "non-finite loss at step " + std::to_string(gstep) +
                                            " (state dumped to ckpt_failure)");
            }
            tape.backward(out.loss);
            const double gnorm = clip_gradients(st.params, tcfg.clip_norm);
            st.opt.step(st.params, lr, tcfg.weight_decay);
            for (Parameter<float>* p : st.params) p->zero_grad();
            ema_update(st.pair, m);

            nlohmann::json row = {{"epoch", epoch},
                                  {"step", gstep},
                                  {"lr", lr},
                                  {"m", m},
                                  {"bce", out.breakdown.bce},
                                  {"rate", out.breakdown.rate},
                                  {"total", out.breakdown.total},
                                  {"agreement_rate", out.breakdown.agreement_rate},
                                  {"grad_norm", gnorm}};
            metrics << row.dump() << "\n";
            metrics.flush();
            result.last = out.breakdown;
            if (hooks && hooks->on_step) hooks->on_step(gstep, out.breakdown);
            ++gstep;
        }

        if (hooks && hooks->before_reset) hooks->before_reset(epoch, st.pair);
        const bool did_reset =
            reset_heads(st.pair, epoch, tcfg.reset_period, tcfg.head_reset_both);
        if (did_reset)
            for (size_t i = st.head_param_start; i < st.params.size(); ++i) st.opt.reset_slot(i);
        if (hooks && hooks->on_epoch_end) hooks->on_epoch_end(epoch, did_reset, st.pair);

        if (epoch % tcfg.checkpoint_every == 0 || epoch == tcfg.epochs) {
            const std::string path = out_dir + "/" + ckpt_name(epoch);
            save_state(st, base_meta, epoch, gstep, path);
            result.final_checkpoint = path;
        }
    }
    return result;
}

LoopState make_state(const ModelConfig& mcfg, const ImageDataset& data) {
    LoopState st;
    st.pair = init_model<float>(mcfg);
    st.params = student_params(st.pair);
    st.head_param_start = st.params.size() - 2 * st.pair.student.head.size();
    st.opt.attach(st.params);
    st.stats = compute_channel_stats(data);
    return st;
}

}  // namespace

TrainResult train(const TrainConfig& tcfg, const ModelConfig& mcfg, const AugmentPolicy& policy,
                  const ImageDataset& data, const std::string& out_dir,
                  const std::string& resume_from, const TrainHooks* hooks) {
    tcfg.validate();
    mcfg.validate();
    policy.validate();
    data.validate();
    if (int(data.channels) != mcfg.in_c)
        raise(ErrCode::data, "dataset has " + std::to_string(data.channels) +
                                 " channels, model expects " + std::to_string(mcfg.in_c));
    set_max_threads(tcfg.workers <= 0 ? 1 : tcfg.workers);

    LoopState st = make_state(mcfg, data);
    nlohmann::json base_meta = semantic_meta(tcfg, mcfg, policy, st.stats);

    int start_epoch = 0;
    int64_t start_step = 0;
    if (!resume_from.empty()) {
        Checkpoint ckpt = load_checkpoint(resume_from);
        if (meta_without_progress(ckpt.meta) != base_meta)
            raise(ErrCode::config,
                  "resume config does not match checkpoint config; refusing to resume");
        restore_pair(st.pair, ckpt);
        restore_optimizer(st, ckpt);
        start_epoch = ckpt.meta.at("epoch").get<int>();
        start_step = ckpt.meta.at("step").get<int64_t>();
    }
    return run_loop(tcfg, policy, data, out_dir, st, base_meta, start_epoch, start_step, hooks);
}

TrainResult finetune(const TrainConfig& tcfg, const std::string& checkpoint_path,
                     const AugmentPolicy& policy, const ImageDataset& data,
                     const std::string& out_dir, bool reset_at_start, const TrainHooks* hooks) {
    tcfg.validate();
    policy.validate();
    data.validate();
    set_max_threads(tcfg.workers <= 0 ? 1 : tcfg.workers);

    Checkpoint ckpt = load_checkpoint(checkpoint_path);
    const ModelConfig mcfg = model_config_from_meta(ckpt.meta);
    if (int(data.channels) != mcfg.in_c)
        raise(ErrCode::data, "dataset has " + std::to_string(data.channels) +
                                 " channels, checkpoint model expects " + std::to_string(mcfg.in_c));

    LoopState st = make_state(mcfg, data);
    restore_pair(st.pair, ckpt);
    if (reset_at_start) force_head_reset(st.pair, tcfg.head_reset_both);

    nlohmann::json base_meta = semantic_meta(tcfg, mcfg, policy, st.stats);
    return run_loop(tcfg, policy, data, out_dir, st, base_meta, 0, 0, hooks);
}

}  // namespace bits
