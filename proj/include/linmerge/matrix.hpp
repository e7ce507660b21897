// Copyright (c) 2026, The linmerge Authors
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace linmerge {

/// Dense row-major matrix of doubles. All activations and feature sets live in
/// this type; checkpoints stay f32 and are widened on bind.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double & operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool operator==(const Matrix &) const = default;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    assert(a.size() == b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Elementwise a - b; shapes must match.
inline Matrix subtract(const Matrix & a, const Matrix & b) {
    assert(a.rows == b.rows && a.cols == b.cols);
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.data.size(); ++i) {
        out.data[i] = a.data[i] - b.data[i];
    }
    return out;
}

/// Stacks matrices with equal column counts on top of each other.
inline Matrix vstack(std::span<const Matrix> parts) {
    if (parts.empty()) {
        return {};
    }
    std::size_t rows = 0;
    for (const auto & p : parts) {
        assert(p.cols == parts.front().cols);
        rows += p.rows;
    }
    Matrix out(rows, parts.front().cols);
    std::size_t at = 0;
    for (const auto & p : parts) {
        std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at));
        at += p.data.size();
    }
    return out;
}

inline bool all_finite(std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            return false;
        }
    }
    return true;
}

} // namespace linmerge
