#pragma once

// Dense row-major tensors. Rank 0 (scalar) through rank 3; everything the
// policy and losses need is rank <= 2 plus rank-1 vectors. Precision is a
// template parameter: double for tests and oracle comparisons, float for
// speed runs.

#include <cmath>
#include <cstddef>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace rest {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += "]";
    return out;
}

struct TensorError : std::runtime_error {
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename Real>
struct Tensor {
    Shape shape;
    std::vector<Real> data;

    Tensor() = default;

    explicit Tensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), Real(0)) {}

    Tensor(Shape s, std::vector<Real> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_numel(shape)) {
            throw TensorError("tensor: data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        }
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }

    static Tensor full(Shape s, Real v) {
        Tensor t(std::move(s));
        for (Real& x : t.data) x = v;
        return t;
    }

    static Tensor scalar(Real v) { return Tensor(Shape{}, {v}); }

    static Tensor row(std::vector<Real> v) {
        Shape s{v.size()};
        return Tensor(std::move(s), std::move(v));
    }

    static Tensor matrix(std::size_t r, std::size_t c, std::vector<Real> v) {
        return Tensor(Shape{r, c}, std::move(v));
    }

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return numel() == 1 && rank() <= 1; }

    std::size_t rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? 1 : 0); }
    std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 0); }

    Real& at(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
    Real at(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

    Real& operator[](std::size_t i) { return data[i]; }
    Real operator[](std::size_t i) const { return data[i]; }

    Real item() const {
        if (numel() != 1) {
            throw TensorError("tensor: item() on non-scalar " + shape_str(shape));
        }
        return data[0];
    }

    bool finite() const {
        for (Real x : data) {
            if (!std::isfinite(static_cast<double>(x))) return false;
        }
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

}  // namespace rest
