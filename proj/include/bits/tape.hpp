#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "bits/tensor.hpp"

namespace bits {

template <class Real>
class Tape;

// Trainable array with a persistent gradient buffer. Gradients accumulate
// across backward calls until zero_grad().
template <class Real>
struct Parameter {
    std::string name;
    Tensor<Real> value;
    Tensor<Real> grad;
    bool no_decay = false;

    Parameter() = default;
    Parameter(std::string n, Tensor<Real> v, bool nd = false)
        : name(std::move(n)), value(std::move(v)), grad(value.shape()), no_decay(nd) {}

    void zero_grad() { grad.fill(Real(0)); }
};

// Handle to a node on a tape.
template <class Real>
struct Value {
    Tape<Real>* tape = nullptr;
    int id = -1;

    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor<Real>& val() const;
    const Shape& shape() const { return val().shape(); }
    bool requires_grad() const;
};

// Record of one forward pass. Nodes are appended in evaluation order, so the
// reverse of the creation order is a topological order and backward visits
// each producing operation exactly once.
template <class Real>
class Tape {
public:
    // backward receives (tape, own node id) so it can read its output grad.
    struct Node {
        Tensor<Real> value;
        Tensor<Real> grad;  // allocated only when requires_grad
        std::function<void(Tape&, int)> backward;
        bool requires_grad = false;
        Parameter<Real>* bound = nullptr;
    };

    Value<Real> leaf(Parameter<Real>& p) {
        Node n;
        n.value = p.value;
        n.grad = Tensor<Real>(p.value.shape());
        n.requires_grad = true;
        n.bound = &p;
        nodes_.push_back(std::move(n));
        return {this, int(nodes_.size()) - 1};
    }

    Value<Real> constant(Tensor<Real> t) {
        Node n;
        n.value = std::move(t);
        nodes_.push_back(std::move(n));
        return {this, int(nodes_.size()) - 1};
    }

    Value<Real> make(Tensor<Real> v, bool requires_grad, std::function<void(Tape&, int)> bw) {
        Node n;
        n.value = std::move(v);
        if (requires_grad) {
            n.grad = Tensor<Real>(n.value.shape());
            n.backward = std::move(bw);
        }
        n.requires_grad = requires_grad;
        nodes_.push_back(std::move(n));
        return {this, int(nodes_.size()) - 1};
    }

    Node& node(int id) { return nodes_[size_t(id)]; }
    const Node& node(int id) const { return nodes_[size_t(id)]; }
    const Tensor<Real>& value(int id) const { return nodes_[size_t(id)].value; }
    Tensor<Real>& grad(int id) { return nodes_[size_t(id)].grad; }
    size_t size() const { return nodes_.size(); }

    void backward(Value<Real> root) {
        if (root.tape != this) raise(ErrCode::invalid, "backward: value from another tape");
        if (backward_done_)
            raise(ErrCode::invalid, "backward called twice on the same tape without re-forward");
        Node& r = node(root.id);
        if (r.value.size() != 1)
            raise(ErrCode::invalid, "backward: root must be scalar, got " + shape_str(r.value.shape()));
        backward_done_ = true;
        if (!r.requires_grad) return;
        r.grad.fill(Real(0));
        r.grad[0] = Real(1);
        for (int id = root.id; id >= 0; --id) {
            Node& n = node(id);
            if (!n.requires_grad) continue;
            if (n.backward) n.backward(*this, id);
            if (n.bound) {
                Tensor<Real>& g = n.bound->grad;
                const Tensor<Real>& src = n.grad;
                for (int64_t i = 0; i < g.size(); ++i) g[i] += src[i];
            }
        }
    }

    bool backward_done() const { return backward_done_; }

private:
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

template <class Real>
const Tensor<Real>& Value<Real>::val() const {
    return tape->value(id);
}

template <class Real>
bool Value<Real>::requires_grad() const {
    return tape->node(id).requires_grad;
}

}  // namespace bits
