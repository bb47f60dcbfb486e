#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "bits/ops.hpp"

namespace bits {

enum class BackboneKind { mlp, small_conv };
enum class Activation { gelu, relu };
enum class Branch { student, teacher };

inline std::string backbone_name(BackboneKind b) {
    return b == BackboneKind::mlp ? "mlp" : "small-conv";
}
inline BackboneKind backbone_from(const std::string& s) {
    if (s == "mlp") return BackboneKind::mlp;
    if (s == "small-conv") return BackboneKind::small_conv;
    raise(ErrCode::config, "unknown backbone '" + s + "'");
}
inline std::string activation_name(Activation a) {
    return a == Activation::gelu ? "gelu" : "relu";
}
inline Activation activation_from(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    raise(ErrCode::config, "unknown activation '" + s + "'");
}
inline std::string branch_name(Branch b) { return b == Branch::student ? "student" : "teacher"; }
inline Branch branch_from(const std::string& s) {
    if (s == "student") return Branch::student;
    if (s == "teacher") return Branch::teacher;
    raise(ErrCode::config, "unknown branch '" + s + "'");
}

struct ModelConfig {
    BackboneKind backbone = BackboneKind::small_conv;
    int in_h = 32, in_w = 32, in_c = 3;
    int backbone_dim = 128;  // d
    int head_hidden = 512;
    int head_out = 256;  // B, multiple of 8
    Activation activation = Activation::gelu;
    uint64_t init_seed = 0;
    int mlp_hidden = 256;

    // stride-2 conv channel plan ending at backbone_dim
    std::vector<int> conv_channels() const {
        auto at_least8 = [](int v) { return v < 8 ? 8 : v; };
        return {at_least8(backbone_dim / 8), at_least8(backbone_dim / 4),
                at_least8(backbone_dim / 2), backbone_dim};
    }

    void validate() const {
        if (backbone_dim < 1) raise(ErrCode::config, "backbone_dim must be >= 1");
        if (head_out < 8 || head_out % 8 != 0)
            raise(ErrCode::config,
                  "head_out must be >= 8 and divisible by 8, got " + std::to_string(head_out));
        if (head_hidden < 1) raise(ErrCode::config, "head_hidden must be >= 1");
        if (in_h < 1 || in_w < 1 || in_c < 1) raise(ErrCode::config, "bad input shape");
    }
};

template <class Real>
struct AffineLayer {
    Parameter<Real> w, b;
};

template <class Real>
struct ConvLayer {
    Parameter<Real> w, b;
};

template <class Real>
struct BranchParams {
    std::vector<ConvLayer<Real>> convs;
    std::vector<AffineLayer<Real>> mlp;
    std::vector<AffineLayer<Real>> head;  // exactly 3 affine layers

    template <class F>
    void for_each(F&& f) {
        for (auto& l : convs) {
            f(l.w);
            f(l.b);
        }
        for (auto& l : mlp) {
            f(l.w);
            f(l.b);
        }
        for (auto& l : head) {
            f(l.w);
            f(l.b);
        }
    }
    template <class F>
    void for_each(F&& f) const {
        const_cast<BranchParams*>(this)->for_each([&](Parameter<Real>& p) { f(p); });
    }
    template <class F>
    void for_each_head(F&& f) {
        for (auto& l : head) {
            f(l.w);
            f(l.b);
        }
    }
    void zero_grad() {
        for_each([](Parameter<Real>& p) { p.zero_grad(); });
    }
};

// Student/teacher pair sharing one architecture. The teacher is never
// touched by gradient updates; it tracks the student through EMA and is
// bitwise equal to the student right after init.
template <class Real>
struct ModelPair {
    ModelConfig cfg;
    BranchParams<Real> student;
    BranchParams<Real> teacher;
    Rng model_rng{0};  // drives init and head-reset draws; checkpointed

    BranchParams<Real>& branch(Branch b) { return b == Branch::student ? student : teacher; }
    const BranchParams<Real>& branch(Branch b) const {
        return b == Branch::student ? student : teacher;
    }
};

namespace detail {

template <class Real>
Tensor<Real> draw_trunc_normal(Rng& rng, Shape shape, double stdev) {
    Tensor<Real> t(std::move(shape));
    for (int64_t i = 0; i < t.size(); ++i) t[i] = Real(rng.trunc_normal(stdev));
    return t;
}

// Head initialization distribution D: truncated normal (std 0.02, +-2std),
// zero biases, final-layer weights scaled by 0.1 so initial logits sit near
// the threshold.
template <class Real>
void draw_head(Rng& rng, const ModelConfig& cfg, std::vector<AffineLayer<Real>>& head,
               bool fresh_layers) {
    const int dims[4] = {cfg.backbone_dim, cfg.head_hidden, cfg.head_hidden, cfg.head_out};
    if (fresh_layers) head.clear();
    for (int l = 0; l < 3; ++l) {
        Tensor<Real> w = draw_trunc_normal<Real>(rng, Shape{dims[l], dims[l + 1]}, 0.02);
        if (l == 2)
            for (int64_t i = 0; i < w.size(); ++i) w[i] *= Real(0.1);
        Tensor<Real> b(Shape{dims[l + 1]});
        const std::string base = "head.fc" + std::to_string(l);
        if (fresh_layers) {
            head.push_back({Parameter<Real>(base + ".w", std::move(w)),
                            Parameter<Real>(base + ".b", std::move(b), true)});
        } else {
            head[size_t(l)].w.value = std::move(w);
            head[size_t(l)].b.value = std::move(b);
        }
    }
}

}  // namespace detail

template <class Real>
ModelPair<Real> init_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelPair<Real> pair;
    pair.cfg = cfg;
    pair.model_rng = Rng(cfg.init_seed);
    Rng& rng = pair.model_rng;
    BranchParams<Real>& s = pair.student;

    if (cfg.backbone == BackboneKind::small_conv) {
        int cin = cfg.in_c;
        const std::vector<int> plan = cfg.conv_channels();
        for (size_t l = 0; l < plan.size(); ++l) {
            const int cout = plan[l];
            const double fan_in = 9.0 * cin;
            Tensor<Real> w =
                detail::draw_trunc_normal<Real>(rng, Shape{3, 3, cin, cout}, std::sqrt(2.0 / fan_in));
            Tensor<Real> b(Shape{cout});
            const std::string base = "backbone.conv" + std::to_string(l);
            s.convs.push_back({Parameter<Real>(base + ".w", std::move(w)),
                               Parameter<Real>(base + ".b", std::move(b), true)});
            cin = cout;
        }
    } else {
        const int in_dim = cfg.in_h * cfg.in_w * cfg.in_c;
        const int dims[4] = {in_dim, cfg.mlp_hidden, cfg.mlp_hidden, cfg.backbone_dim};
        for (int l = 0; l < 3; ++l) {
            Tensor<Real> w = detail::draw_trunc_normal<Real>(rng, Shape{dims[l], dims[l + 1]},
                                                             std::sqrt(2.0 / double(dims[l])));
            Tensor<Real> b(Shape{dims[l + 1]});
            const std::string base = "backbone.fc" + std::to_string(l);
            s.mlp.push_back({Parameter<Real>(base + ".w", std::move(w)),
                             Parameter<Real>(base + ".b", std::move(b), true)});
        }
    }
    detail::draw_head(rng, cfg, s.head, true);

    pair.teacher = pair.student;  // exact clone, including grad buffers
    return pair;
}

// theta_t <- m * theta_t + (1 - m) * theta_s for every parameter.
template <class Real>
void ema_update(ModelPair<Real>& pair, double m) {
    if (m < 0.0 || m > 1.0) raise(ErrCode::invalid, "ema momentum must lie in [0,1]");
    if (m == 1.0) return;  // teacher bitwise frozen
    std::vector<Parameter<Real>*> sp, tp;
    pair.student.for_each([&](Parameter<Real>& p) { sp.push_back(&p); });
    pair.teacher.for_each([&](Parameter<Real>& p) { tp.push_back(&p); });
    for (size_t i = 0; i < sp.size(); ++i) {
        Tensor<Real>& t = tp[i]->value;
        const Tensor<Real>& snew = sp[i]->value;
        if (m == 0.0) {
            t = snew;
            continue;
        }
        const Real rm = Real(m), rs = Real(1.0 - m);
        for (int64_t j = 0; j < t.size(); ++j) t[j] = rm * t[j] + rs * snew[j];
    }
}

// One fresh head draw from D, installed in the student head (and the teacher
// head unless reset_both is off). Backbones are untouched.
template <class Real>
void force_head_reset(ModelPair<Real>& pair, bool reset_both = true) {
    detail::draw_head(pair.model_rng, pair.cfg, pair.student.head, false);
    for (auto& l : pair.student.head) {
        l.w.zero_grad();
        l.b.zero_grad();
    }
    if (reset_both) {
        for (size_t l = 0; l < pair.student.head.size(); ++l) {
            pair.teacher.head[l].w.value = pair.student.head[l].w.value;
            pair.teacher.head[l].b.value = pair.student.head[l].b.value;
        }
    }
}

// Scheduled variant: fires at epochs n, 2n, ... Returns true when a reset
// fired.
template <class Real>
bool reset_heads(ModelPair<Real>& pair, int64_t epoch, int64_t period, bool reset_both = true) {
    if (period < 0) raise(ErrCode::invalid, "reset period must be >= 0");
    if (period == 0 || epoch <= 0 || epoch % period != 0) return false;
    force_head_reset(pair, reset_both);
    return true;
}

// Cosine ramp from m_start at step 0 to m_end at step == total_steps.
inline double momentum_schedule(int64_t step, int64_t total_steps, double m_start, double m_end) {
    if (total_steps <= 0) return m_end;
    if (step < 0 || step > total_steps)
        raise(ErrCode::invalid, "momentum_schedule: step outside [0, total_steps]");
    const double x = double(step) / double(total_steps);
    return m_end - (m_end - m_start) * (std::cos(3.14159265358979323846 * x) + 1.0) * 0.5;
}

// ---------------------------------------------------------------------------
// forward
// ---------------------------------------------------------------------------

template <class Real>
struct BoundBranch {
    std::vector<std::pair<Value<Real>, Value<Real>>> convs;
    std::vector<std::pair<Value<Real>, Value<Real>>> mlp;
    std::vector<std::pair<Value<Real>, Value<Real>>> head;
};

// Creates tape nodes for all branch parameters once; trainable branches get
// leaf nodes that accumulate gradients, the teacher gets constants and
// therefore allocates no gradient state.
template <class Real>
BoundBranch<Real> bind_branch(Tape<Real>& tape, BranchParams<Real>& params, bool trainable) {
    BoundBranch<Real> out;
    auto bind = [&](Parameter<Real>& p) {
        return trainable ? tape.leaf(p) : tape.constant(p.value);
    };
    for (auto& l : params.convs) out.convs.push_back({bind(l.w), bind(l.b)});
    for (auto& l : params.mlp) out.mlp.push_back({bind(l.w), bind(l.b)});
    for (auto& l : params.head) out.head.push_back({bind(l.w), bind(l.b)});
    return out;
}

namespace detail {

template <class Real>
void check_layer_finite(const Value<Real>& v, const char* stage, size_t layer) {
    if (!all_finite(v.val()))
        raise(ErrCode::numeric, std::string("non-finite activation at ") + stage + " layer " +
                                    std::to_string(layer));
}

template <class Real>
Value<Real> activate(Value<Real> v, Activation a) {
    return a == Activation::gelu ? gelu(v) : relu(v);
}

}  // namespace detail

template <class Real>
struct ForwardOut {
    Value<Real> features;  // h, [N x d]
    Value<Real> logits;    // a, [N x B]
};

// x is [N,H,W,C]; the conv backbone accepts any spatial size (global average
// pooling at the end), the mlp backbone requires the configured input shape.
template <class Real>
ForwardOut<Real> forward_branch(Tape<Real>& tape, const ModelConfig& cfg,
                                const BoundBranch<Real>& bb, Value<Real> x) {
    if (x.val().rank() != 4 || x.val().dim(3) != cfg.in_c)
        raise(ErrCode::invalid, "forward: expected [N,H,W," + std::to_string(cfg.in_c) +
                                    "], got " + shape_str(x.shape()));
    Value<Real> h;
    if (cfg.backbone == BackboneKind::small_conv) {
        Value<Real> cur = x;
        for (size_t l = 0; l < bb.convs.size(); ++l) {
            cur = conv2d(cur, bb.convs[l].first, bb.convs[l].second, 2, 1);
            cur = detail::activate(cur, cfg.activation);
            detail::check_layer_finite(cur, "backbone", l);
        }
        h = global_avg_pool(cur);
    } else {
        if (x.val().dim(1) != cfg.in_h || x.val().dim(2) != cfg.in_w)
            raise(ErrCode::invalid,
                  "forward: mlp backbone requires " + std::to_string(cfg.in_h) + "x" +
                      std::to_string(cfg.in_w) + " input, got " + shape_str(x.shape()));
        Value<Real> cur = flatten(x);
        for (size_t l = 0; l < bb.mlp.size(); ++l) {
            cur = add_bias(matmul(cur, bb.mlp[l].first), bb.mlp[l].second);
            if (l + 1 < bb.mlp.size()) cur = detail::activate(cur, cfg.activation);
            detail::check_layer_finite(cur, "backbone", l);
        }
        h = cur;
    }

    Value<Real> a = h;
    for (size_t l = 0; l < bb.head.size(); ++l) {
        a = add_bias(matmul(a, bb.head[l].first), bb.head[l].second);
        if (l + 1 < bb.head.size()) a = detail::activate(a, cfg.activation);
        detail::check_layer_finite(a, "head", l);
    }
    return {h, a};
}

}  // namespace bits
