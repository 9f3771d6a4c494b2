#pragma once

#include <cassert>
#include <cstdint>
#include <numeric>
#include <vector>

namespace canas {

// Training and tests both run in double precision; checkpoints carry a
// per-tensor dtype tag so the format does not pin the scalar type.
using Scalar = double;

// Dense row-major tensor. Supernet shapes are small enough that plain
// vectors and explicit index arithmetic beat any abstraction here.
struct Tensor {
    std::vector<int> shape;
    std::vector<Scalar> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(static_cast<std::size_t>(count(shape)), 0.0);
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    Scalar* ptr() { return data.data(); }
    const Scalar* ptr() const { return data.data(); }

    Scalar& at2(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    Scalar at2(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
};

}  // namespace canas
