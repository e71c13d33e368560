#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "ssmlm/rng.hpp"
#include "ssmlm/util.hpp"

namespace ssmlm {

// Dense row-major tensor. Shapes are small (1-3 dims); all kernels take raw
// pointers plus dims, this is just the owning container.
template <class T>
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<T> v;

    Tensor() = default;
    explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        v.assign(size_t(n), T(0));
    }

    int64_t size() const { return int64_t(v.size()); }
    int64_t dim(size_t i) const { return shape[i]; }
    T* data() { return v.data(); }
    const T* data() const { return v.data(); }
    T& operator[](int64_t i) { return v[size_t(i)]; }
    const T& operator[](int64_t i) const { return v[size_t(i)]; }
    void zero() { std::fill(v.begin(), v.end(), T(0)); }

    void fill_normal(Rng& rng, double std_dev) {
        for (auto& x : v) x = T(rng.normal() * std_dev);
    }
    void fill_uniform(Rng& rng, double lo, double hi) {
        for (auto& x : v) x = T(rng.uniform(lo, hi));
    }
};

// A learnable tensor with its gradient buffer. `wd` marks whether decoupled
// weight decay applies (skipped for norm scales and biases).
template <class T>
struct Param {
    std::string name;
    Tensor<T> w;
    Tensor<T> g;
    bool wd = true;

    void init(std::string n, std::vector<int64_t> shape, bool weight_decay) {
        name = std::move(n);
        w = Tensor<T>(shape);
        g = Tensor<T>(std::move(shape));
        wd = weight_decay;
    }
};

} // namespace ssmlm
