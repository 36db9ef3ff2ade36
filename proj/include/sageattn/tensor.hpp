#pragma once

// Dense row-major containers for the attention carriers. A Tensor4 holds
// (batch, heads, tokens, head_dim); each (batch, head) slice is a
// contiguous tokens x head_dim matrix.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace sageattn {

template <typename T>
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(int r, int c, T fill = T{}) : rows(r), cols(c), data(size_t(r) * size_t(c), fill) {
        if (r < 0 || c < 0) throw std::invalid_argument("matrix dimensions must be non-negative");
    }

    T& operator()(int r, int c) { return data[size_t(r) * cols + c]; }
    const T& operator()(int r, int c) const { return data[size_t(r) * cols + c]; }

    std::span<T> row(int r) { return {data.data() + size_t(r) * cols, size_t(cols)}; }
    std::span<const T> row(int r) const { return {data.data() + size_t(r) * cols, size_t(cols)}; }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
    }
};

// Non-owning view of a row-major matrix block (possibly strided rows).
template <typename T>
struct MatView {
    const T* ptr = nullptr;
    int rows = 0;
    int cols = 0;
    int stride = 0; // elements between row starts

    MatView() = default;
    MatView(const T* p, int r, int c, int s) : ptr(p), rows(r), cols(c), stride(s) {}
    MatView(const Matrix<T>& m) : ptr(m.data.data()), rows(m.rows), cols(m.cols), stride(m.cols) {}

    const T& operator()(int r, int c) const { return ptr[size_t(r) * stride + c]; }
    std::span<const T> row(int r) const { return {ptr + size_t(r) * stride, size_t(cols)}; }

    MatView block(int r0, int nrows) const {
        return MatView(ptr + size_t(r0) * stride, nrows, cols, stride);
    }
};

template <typename T>
struct Tensor4 {
    int batch = 0;
    int heads = 0;
    int tokens = 0;
    int head_dim = 0;
    std::vector<T> data;

    Tensor4() = default;
    Tensor4(int b, int h, int n, int d, T fill = T{})
        : batch(b), heads(h), tokens(n), head_dim(d),
          data(size_t(b) * size_t(h) * size_t(n) * size_t(d), fill) {
        if (b < 1 || h < 1 || n < 1 || d < 1)
            throw std::invalid_argument("tensor dimensions must be positive");
    }

    size_t size() const { return data.size(); }

    T& at(int b, int h, int t, int c) {
        return data[((size_t(b) * heads + h) * tokens + t) * head_dim + c];
    }
    const T& at(int b, int h, int t, int c) const {
        return data[((size_t(b) * heads + h) * tokens + t) * head_dim + c];
    }

    T* slice_ptr(int b, int h) {
        return data.data() + (size_t(b) * heads + h) * tokens * head_dim;
    }
    const T* slice_ptr(int b, int h) const {
        return data.data() + (size_t(b) * heads + h) * tokens * head_dim;
    }

    // (tokens x head_dim) view of one attention head.
    MatView<T> slice(int b, int h) const {
        return MatView<T>(slice_ptr(b, h), tokens, head_dim, head_dim);
    }

    bool same_shape(const Tensor4& o) const {
        return batch == o.batch && heads == o.heads && tokens == o.tokens && head_dim == o.head_dim;
    }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }
};

using Tensor4f = Tensor4<float>;
using Tensor4d = Tensor4<double>;

} // namespace sageattn
