#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "ipn/errors.hpp"

namespace ipn {

// Dense rank-0/1/2 tensor. Rank 0 (empty shape) holds exactly one value and
// represents a scalar; rank 2 is row-major.
template <typename Real>
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<Real> values;

    Tensor() = default;

    static Tensor scalar(Real v) {
        Tensor t;
        t.values.assign(1, v);
        return t;
    }

    static Tensor zeros(std::vector<std::size_t> shape) {
        Tensor t;
        t.shape = std::move(shape);
        t.values.assign(count(t.shape), Real(0));
        return t;
    }

    static Tensor vector(std::vector<Real> vals) {
        Tensor t;
        t.shape = {vals.size()};
        t.values = std::move(vals);
        return t;
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<Real> vals) {
        if (vals.size() != rows * cols) {
            throw DimensionError("matrix payload size " + std::to_string(vals.size()) +
                                 " does not match " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
        }
        Tensor t;
        t.shape = {rows, cols};
        t.values = std::move(vals);
        return t;
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                               std::multiplies<>());
    }

    std::size_t size() const { return values.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return shape.empty(); }

    std::size_t rows() const { return rank() >= 1 ? shape[0] : 1; }
    std::size_t cols() const { return rank() == 2 ? shape[1] : (rank() == 1 ? shape[0] : 1); }

    Real& at(std::size_t i) { return values[i]; }
    Real at(std::size_t i) const { return values[i]; }
    Real& at(std::size_t r, std::size_t c) { return values[r * shape[1] + c]; }
    Real at(std::size_t r, std::size_t c) const { return values[r * shape[1] + c]; }

    Real item() const {
        if (size() != 1) throw ContractError("item() on tensor with size != 1");
        return values[0];
    }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (Real v : values) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    void fill(Real v) { values.assign(values.size(), v); }

    std::string shape_string() const {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) os << "x";
            os << shape[i];
        }
        os << "]";
        return os.str();
    }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> out;
        out.shape = shape;
        out.values.reserve(values.size());
        for (Real v : values) out.values.push_back(static_cast<Other>(v));
        return out;
    }
};

template <typename Real>
inline void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b,
                               const char* what) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(what) + ": shape mismatch " + a.shape_string() +
                             " vs " + b.shape_string());
    }
}

}  // namespace ipn
