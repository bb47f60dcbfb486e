#pragma once

#include <utility>
#include <vector>

#include "bits/model.hpp"

namespace bits {

enum class AgreementMode { bce_hard, bce_soft, cosine };
enum class BitNorm { mean_over_bits, sum_over_bits };

inline std::string agreement_mode_name(AgreementMode m) {
    switch (m) {
        case AgreementMode::bce_hard: return "bce-hard";
        case AgreementMode::bce_soft: return "bce-soft";
        case AgreementMode::cosine: return "cosine";
    }
    return "bce-hard";
}
inline AgreementMode agreement_mode_from(const std::string& s) {
    if (s == "bce-hard") return AgreementMode::bce_hard;
    if (s == "bce-soft") return AgreementMode::bce_soft;
    if (s == "cosine") return AgreementMode::cosine;
    raise(ErrCode::config, "unknown agreement mode '" + s + "'");
}
inline std::string bit_norm_name(BitNorm b) {
    return b == BitNorm::mean_over_bits ? "mean-over-bits" : "sum-over-bits";
}
inline BitNorm bit_norm_from(const std::string& s) {
    if (s == "mean-over-bits") return BitNorm::mean_over_bits;
    if (s == "sum-over-bits") return BitNorm::sum_over_bits;
    raise(ErrCode::config, "unknown bit_norm '" + s + "'");
}

struct AgreementConfig {
    AgreementMode mode = AgreementMode::bce_hard;
    double beta = 0.1;   // weight of the rate term
    double eps = 0.5;    // coding-rate epsilon
    double tau = 0.1;    // soft-target temperature (bce_soft only)
    BitNorm bit_norm = BitNorm::mean_over_bits;
    double rate_dscale = 0.0;  // scale constant in the rate term; 0 = use B

    void validate() const {
        if (!(beta >= 0.0)) raise(ErrCode::config, "beta must be >= 0");
        if (!(eps > 0.0)) raise(ErrCode::config, "eps must be > 0");
        if (!(tau > 0.0)) raise(ErrCode::config, "tau must be > 0");
    }
};

struct LossBreakdown {
    double bce = 0.0;             // agreement term (per the configured mode)
    double rate = 0.0;            // L_rate = -R_eps
    double total = 0.0;           // bce + beta * rate
    double agreement_rate = 0.0;  // fraction of matching hard bits, diagnostics only
};

// Hard targets: bit = 1 iff logit > 0 (exact zeros map to 0). Output carries
// no gradient by construction. NaN logits abort: they signal divergence.
template <class Real>
Tensor<uint8_t> binarize_targets(const Tensor<Real>& logits) {
    Tensor<uint8_t> bits(logits.shape());
    for (int64_t i = 0; i < logits.size(); ++i) {
        const Real v = logits[i];
        if (std::isnan(double(v))) raise(ErrCode::numeric, "binarize_targets: NaN logit");
        bits[i] = v > Real(0) ? 1 : 0;
    }
    return bits;
}

// (student view index, teacher global view index) pairs: every student view
// predicts every teacher global view except the identical crop.
inline std::vector<std::pair<int, int>> view_pairing(int n_global, int n_local) {
    std::vector<std::pair<int, int>> pairs;
    for (int g = 0; g < n_global; ++g)
        for (int v = 0; v < n_global + n_local; ++v)
            if (v != g) pairs.push_back({v, g});
    return pairs;
}

namespace detail {

// mean over batch (and over bits unless sum_over_bits) of a per-element loss
template <class Real>
Value<Real> reduce_loss(Value<Real> elems, BitNorm norm) {
    if (norm == BitNorm::mean_over_bits) return mean_all(elems);
    return mean_all(sum_axis(elems, 1));
}

template <class Real>
Tensor<Real> bits_to_real(const Tensor<uint8_t>& bits) {
    Tensor<Real> t(bits.shape());
    for (int64_t i = 0; i < t.size(); ++i) t[i] = Real(bits[i]);
    return t;
}

}  // namespace detail

// Symmetric multi-label agreement: mean over pairs of the per-bit BCE between
// student logits and hard teacher bits.
template <class Real>
Value<Real> binary_agreement_loss(Tape<Real>& tape, const std::vector<Value<Real>>& student_logits,
                                  const std::vector<Tensor<uint8_t>>& teacher_bits,
                                  const std::vector<std::pair<int, int>>& pairing,
                                  BitNorm norm = BitNorm::mean_over_bits) {
    if (pairing.empty()) raise(ErrCode::invalid, "binary_agreement_loss: empty pairing");
    Value<Real> acc;
    for (const auto& [v, g] : pairing) {
        Tensor<Real> target = detail::bits_to_real<Real>(teacher_bits[size_t(g)]);
        Value<Real> term = detail::reduce_loss(bce_with_logits(student_logits[size_t(v)], std::move(target)), norm);
        acc = acc.valid() ? add(acc, term) : term;
    }
    (void)tape;
    return scale(acc, 1.0 / double(pairing.size()));
}

// Ablation: real-valued targets sigmoid(teacher_logit / tau), stop-gradient.
template <class Real>
Value<Real> soft_agreement_loss(Tape<Real>& tape, const std::vector<Value<Real>>& student_logits,
                                const std::vector<Tensor<Real>>& teacher_logits,
                                const std::vector<std::pair<int, int>>& pairing, double tau,
                                BitNorm norm = BitNorm::mean_over_bits) {
    if (pairing.empty()) raise(ErrCode::invalid, "soft_agreement_loss: empty pairing");
    if (!(tau > 0.0)) raise(ErrCode::invalid, "soft_agreement_loss: tau must be > 0");
    Value<Real> acc;
    for (const auto& [v, g] : pairing) {
        const Tensor<Real>& tl = teacher_logits[size_t(g)];
        Tensor<Real> target(tl.shape());
        for (int64_t i = 0; i < tl.size(); ++i) {
            const double x = double(tl[i]) / tau;
            if (std::isnan(x)) raise(ErrCode::numeric, "soft_agreement_loss: NaN teacher logit");
            target[i] = bits::detail::stable_sigmoid(Real(x));
        }
        Value<Real> term = detail::reduce_loss(bce_with_logits(student_logits[size_t(v)], std::move(target)), norm);
        acc = acc.valid() ? add(acc, term) : term;
    }
    (void)tape;
    return scale(acc, 1.0 / double(pairing.size()));
}

// Ablation: 1 - cosine(student logit row, +-1-mapped teacher bits), mean over
// pairs and batch.
template <class Real>
Value<Real> cosine_agreement_loss(Tape<Real>& tape, const std::vector<Value<Real>>& student_logits,
                                  const std::vector<Tensor<uint8_t>>& teacher_bits,
                                  const std::vector<std::pair<int, int>>& pairing) {
    if (pairing.empty()) raise(ErrCode::invalid, "cosine_agreement_loss: empty pairing");
    Value<Real> acc;
    for (const auto& [v, g] : pairing) {
        const Tensor<uint8_t>& bits = teacher_bits[size_t(g)];
        const int b = bits.dim(1);
        Tensor<Real> target(bits.shape());
        const Real inv = Real(1.0 / std::sqrt(double(b)));
        for (int64_t i = 0; i < target.size(); ++i)
            target[i] = (bits[i] ? Real(1) : Real(-1)) * inv;
        Value<Real> sn = l2_normalize_rows(student_logits[size_t(v)]);
        Value<Real> cos_mean = mean_all(sum_axis(mul(sn, tape.constant(std::move(target))), 1));
        Value<Real> term = add_scalar(scale(cos_mean, -1.0), 1.0);
        acc = acc.valid() ? add(acc, term) : term;
    }
    return scale(acc, 1.0 / double(pairing.size()));
}

template <class Real>
struct TotalLossResult {
    Value<Real> loss;
    LossBreakdown breakdown;
};

// One augmented batch: all views normalized model inputs [N,H,W,C].
template <class Real>
struct ViewBatch {
    std::vector<Tensor<Real>> globals;
    std::vector<Tensor<Real>> locals;
};

// L = agreement + beta * (-R_eps), with the rate term over the row-normalized
// student logits of the global views, concatenated across the batch. Teacher
// targets come from global views only and never carry gradient.
template <class Real>
TotalLossResult<Real> total_loss(Tape<Real>& tape, ModelPair<Real>& pair,
                                 const ViewBatch<Real>& views, const AgreementConfig& cfg) {
    cfg.validate();
    const int n_global = int(views.globals.size());
    const int n_local = int(views.locals.size());
    if (n_global < 2) raise(ErrCode::invalid, "total_loss: need at least 2 global views");

    // teacher forward on global views, gradient-free
    BoundBranch<Real> tb = bind_branch(tape, pair.teacher, false);
    std::vector<Tensor<Real>> teacher_logits;
    for (int g = 0; g < n_global; ++g)
        teacher_logits.push_back(
            forward_branch(tape, pair.cfg, tb, tape.constant(views.globals[size_t(g)])).logits.val());
    std::vector<Tensor<uint8_t>> teacher_bits;
    for (const auto& tl : teacher_logits) teacher_bits.push_back(binarize_targets(tl));

    // student forward on all views
    BoundBranch<Real> sb = bind_branch(tape, pair.student, true);
    std::vector<Value<Real>> student_logits;
    for (int g = 0; g < n_global; ++g)
        student_logits.push_back(
            forward_branch(tape, pair.cfg, sb, tape.constant(views.globals[size_t(g)])).logits);
    for (int l = 0; l < n_local; ++l)
        student_logits.push_back(
            forward_branch(tape, pair.cfg, sb, tape.constant(views.locals[size_t(l)])).logits);

    const auto pairing = view_pairing(n_global, n_local);
    Value<Real> agree;
    switch (cfg.mode) {
        case AgreementMode::bce_hard:
            agree = binary_agreement_loss(tape, student_logits, teacher_bits, pairing, cfg.bit_norm);
            break;
        case AgreementMode::bce_soft:
            agree = soft_agreement_loss(tape, student_logits, teacher_logits, pairing, cfg.tau,
                                        cfg.bit_norm);
            break;
        case AgreementMode::cosine:
            agree = cosine_agreement_loss(tape, student_logits, teacher_bits, pairing);
            break;
    }

    // rate term over student global-view logits
    std::vector<Value<Real>> global_logits(student_logits.begin(),
                                           student_logits.begin() + n_global);
    Value<Real> rate_input =
        n_global == 1 ? global_logits[0] : concat_rows(global_logits);
    Value<Real> r_eps =
        logdet_regularized_cov(l2_normalize_rows(rate_input), cfg.eps, cfg.rate_dscale);
    Value<Real> rate = scale(r_eps, -1.0);

    Value<Real> total = add(agree, scale(rate, cfg.beta));

    LossBreakdown bd;
    bd.bce = double(agree.val()[0]);
    bd.rate = double(rate.val()[0]);
    bd.total = bd.bce + cfg.beta * bd.rate;

    // diagnostics: fraction of student hard bits equal to teacher bits
    int64_t match = 0, count = 0;
    for (const auto& [v, g] : pairing) {
        const Tensor<Real>& sl = student_logits[size_t(v)].val();
        const Tensor<uint8_t>& zb = teacher_bits[size_t(g)];
        for (int64_t i = 0; i < sl.size(); ++i) {
            match += (sl[i] > Real(0)) == (zb[i] != 0);
            ++count;
        }
    }
    bd.agreement_rate = count ? double(match) / double(count) : 0.0;

    return {total, bd};
}

}  // namespace bits
