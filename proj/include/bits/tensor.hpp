#pragma once

#include <cstdint>
#include <initializer_list>
#include <sstream>
#include <string>
#include <vector>

#include "bits/common.hpp"

namespace bits {

// Dense row-major array. Rank 0 (empty shape) is a scalar with one element.
using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

template <class Real>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape) : shape_(std::move(shape)), v_(shape_numel(shape_), Real(0)) {}
    Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), v_(std::move(data)) {
        if (int64_t(v_.size()) != shape_numel(shape_))
            raise(ErrCode::invalid, "tensor data length does not match shape " + shape_str(shape_));
    }

    static Tensor scalar(Real x) {
        Tensor t{Shape{}};
        t.v_[0] = x;
        return t;
    }

    const Shape& shape() const { return shape_; }
    int rank() const { return int(shape_.size()); }
    int dim(int i) const { return shape_[size_t(i)]; }
    int64_t size() const { return int64_t(v_.size()); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    Real* data() { return v_.data(); }
    const Real* data() const { return v_.data(); }
    std::vector<Real>& vec() { return v_; }
    const std::vector<Real>& vec() const { return v_; }

    Real& operator[](int64_t i) { return v_[size_t(i)]; }
    Real operator[](int64_t i) const { return v_[size_t(i)]; }

    // rank-2 accessor
    Real& at(int r, int c) { return v_[size_t(r) * shape_[1] + c]; }
    Real at(int r, int c) const { return v_[size_t(r) * shape_[1] + c]; }

    void fill(Real x) { std::fill(v_.begin(), v_.end(), x); }

    template <class R2>
    Tensor<R2> cast() const {
        Tensor<R2> out(shape_);
        for (int64_t i = 0; i < size(); ++i) out[i] = R2(v_[size_t(i)]);
        return out;
    }

private:
    Shape shape_;
    std::vector<Real> v_;
};

template <class Real>
inline bool all_finite(const Tensor<Real>& t) {
    for (int64_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(double(t[i]))) return false;
    return true;
}

template <class Real>
inline void check_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
    if (!a.same_shape(b))
        raise(ErrCode::invalid, std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

}  // namespace bits
