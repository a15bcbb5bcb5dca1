#ifndef TPG_CORE_TENSOR_HPP
#define TPG_CORE_TENSOR_HPP

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "tpg/core/error.hpp"
#include "tpg/core/rng.hpp"

namespace tpg {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Dense row-major tensor of doubles. Images are (H,W,3) in [0,1]; latents are
// (C,H,W); token maps are (L,D); vectors are (D).
struct Tensor {
    Shape shape;
    std::vector<double> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(size_t(shape_numel(shape)), 0.0) {}
    Tensor(Shape s, double fill) : shape(std::move(s)), v(size_t(shape_numel(shape)), fill) {}
    Tensor(Shape s, std::vector<double> data) : shape(std::move(s)), v(std::move(data)) {
        TPG_REQUIRE(int64_t(v.size()) == shape_numel(shape), errc::shape,
                    "tensor data size does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return int64_t(v.size()); }
    int dim(int i) const { return shape[size_t(i)]; }
    int ndim() const { return int(shape.size()); }

    double& operator[](size_t i) { return v[i]; }
    double operator[](size_t i) const { return v[i]; }

    // 2D (rows, cols)
    double& at(int i, int j) { return v[size_t(i) * shape[1] + j]; }
    double at(int i, int j) const { return v[size_t(i) * shape[1] + j]; }
    // 3D (a, b, c)
    double& at(int i, int j, int k) { return v[(size_t(i) * shape[1] + j) * shape[2] + k]; }
    double at(int i, int j, int k) const { return v[(size_t(i) * shape[1] + j) * shape[2] + k]; }
    // 4D (a, b, c, d)
    double& at(int i, int j, int k, int l) {
        return v[((size_t(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }
    double at(int i, int j, int k, int l) const {
        return v[((size_t(i) * shape[1] + j) * shape[2] + k) * shape[3] + l];
    }

    static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
    static Tensor full(Shape s, double x) { return Tensor(std::move(s), x); }

    static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = rng.normal() * stddev;
        return t;
    }

    static Tensor rand_uniform(Shape s, Rng& rng, double lo = 0.0, double hi = 1.0) {
        Tensor t(std::move(s));
        for (auto& x : t.v) x = rng.uniform(lo, hi);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    Tensor reshaped(Shape s) const {
        TPG_REQUIRE(shape_numel(s) == numel(), errc::shape,
                    "reshape " + shape_str(shape) + " -> " + shape_str(s));
        Tensor t = *this;
        t.shape = std::move(s);
        return t;
    }

    void fill(double x) { std::fill(v.begin(), v.end(), x); }

    double sum() const { return std::accumulate(v.begin(), v.end(), 0.0); }
    double mean() const { return numel() ? sum() / double(numel()) : 0.0; }

    double min() const {
        double m = v.empty() ? 0.0 : v[0];
        for (double x : v) m = std::min(m, x);
        return m;
    }
    double max() const {
        double m = v.empty() ? 0.0 : v[0];
        for (double x : v) m = std::max(m, x);
        return m;
    }

    double norm2() const {
        double s = 0.0;
        for (double x : v) s += x * x;
        return std::sqrt(s);
    }

    bool equals(const Tensor& o) const { return shape == o.shape && v == o.v; }

    double max_abs_diff(const Tensor& o) const {
        TPG_REQUIRE(same_shape(o), errc::shape, "max_abs_diff shape mismatch");
        double m = 0.0;
        for (size_t i = 0; i < v.size(); ++i) m = std::max(m, std::fabs(v[i] - o.v[i]));
        return m;
    }
};

inline void require_shape(const Tensor& t, const Shape& s, const char* what) {
    TPG_REQUIRE(t.shape == s, errc::shape,
                std::string(what) + ": expected " + shape_str(s) + ", got " + shape_str(t.shape));
}

}  // namespace tpg

#endif
