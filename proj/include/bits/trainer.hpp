#pragma once

#include <functional>
#include <optional>
#include <string>

#include "bits/augment.hpp"
#include "bits/checkpoint.hpp"
#include "bits/objective.hpp"

namespace bits {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 128;
    double base_lr = 1e-3;
    double min_lr = 5e-5;
    double warmup_epochs = 3.0;
    double weight_decay = 0.04;
    double clip_norm = 1.0;  // cg
    int reset_period = 10;   // n, 0 = never
    bool head_reset_both = true;
    double ema_start = 0.996;
    double ema_end = 1.0;
    uint64_t seed = 0;
    int checkpoint_every = 10;  // epochs
    int workers = 0;            // 0 = deterministic single-threaded
    AgreementConfig agreement;

    void validate() const {
        if (epochs < 1) raise(ErrCode::config, "epochs must be >= 1");
        if (batch_size < 2) raise(ErrCode::config, "batch_size must be >= 2 (covariance needs rows)");
        if (!(min_lr <= base_lr)) raise(ErrCode::config, "min_lr must be <= base_lr");
        if (!(clip_norm > 0.0)) raise(ErrCode::config, "clip_norm must be > 0");
        if (reset_period < 0) raise(ErrCode::config, "reset_period must be >= 0");
        if (ema_start < 0.0 || ema_start > 1.0 || ema_end < 0.0 || ema_end > 1.0)
            raise(ErrCode::config, "ema momentum must lie in [0,1]");
        if (checkpoint_every < 1) raise(ErrCode::config, "checkpoint_every must be >= 1");
        agreement.validate();
    }
};

// Linear warmup from 0 to base_lr over warmup_steps, cosine decay to exactly
// min_lr at the last applied step (total_steps - 1).
double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps, double base_lr,
                   double min_lr);

// Global-norm clipping across all parameters. Scales gradients by
// cg / norm when norm > cg; returns the pre-clip norm.
double clip_gradients(std::vector<Parameter<float>*>& params, double cg);

// Decoupled-weight-decay adaptive moment optimizer. Slots are kept per
// parameter with their own step counts so head resets can clear stale
// moments without touching the rest.
class AdamW {
public:
    struct Slot {
        Tensor<float> m, v;
        int64_t t = 0;
    };

    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void attach(const std::vector<Parameter<float>*>& params);
    void step(const std::vector<Parameter<float>*>& params, double lr, double weight_decay);
    void reset_slot(size_t i);
    std::vector<Slot>& slots() { return slots_; }

private:
    double beta1_, beta2_, eps_;
    std::vector<Slot> slots_;
};

struct TrainHooks {
    // called at the epoch boundary before the reset decision
    std::function<void(int epoch, ModelPair<float>&)> before_reset;
    // called after each epoch's reset decision, before checkpointing
    std::function<void(int epoch, bool did_reset, ModelPair<float>&)> on_epoch_end;
    // called after every optimizer step
    std::function<void(int64_t step, const LossBreakdown&)> on_step;
};

struct TrainResult {
    std::string final_checkpoint;
    int64_t total_steps = 0;
    LossBreakdown last;
};

// Full training run. Writes out_dir/metrics.jsonl (one JSON object per step)
// and out_dir/ckpt_epochNNN per checkpoint_every epochs plus the final epoch.
// resume_from continues an interrupted run bitwise (same semantic config
// required).
TrainResult train(const TrainConfig& tcfg, const ModelConfig& mcfg, const AugmentPolicy& policy,
                  const ImageDataset& data, const std::string& out_dir,
                  const std::string& resume_from = "", const TrainHooks* hooks = nullptr);

// Continued self-supervised training from a checkpoint: parameters and model
// rng restored, fresh optimizer state and a fresh schedule over tcfg.epochs.
// reset_at_start draws one head reset before the first epoch.
TrainResult finetune(const TrainConfig& tcfg, const std::string& checkpoint_path,
                     const AugmentPolicy& policy, const ImageDataset& data,
                     const std::string& out_dir, bool reset_at_start,
                     const TrainHooks* hooks = nullptr);

// checkpoint <-> model plumbing shared with the eval side
Checkpoint snapshot_pair(const ModelPair<float>& pair, const nlohmann::json& meta);
void restore_pair(ModelPair<float>& pair, const Checkpoint& ckpt);
ModelConfig model_config_from_meta(const nlohmann::json& meta);
ChannelStats channel_stats_from_meta(const nlohmann::json& meta);
nlohmann::json semantic_meta(const TrainConfig& tcfg, const ModelConfig& mcfg,
                             const AugmentPolicy& policy, const ChannelStats& stats);

}  // namespace bits
