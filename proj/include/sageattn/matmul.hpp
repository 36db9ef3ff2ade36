#pragma once

// Emulated accumulated matrix multiplies. Accumulation order is strictly
// ascending inner index everywhere, so results are bit-reproducible.

#include <cstdint>
#include <stdexcept>
#include <string>

#include "sageattn/half.hpp"
#include "sageattn/tensor.hpp"

namespace sageattn {

// Largest inner dimension for which 127*127*k cannot overflow int32.
inline constexpr int kInt8MatmulMaxK = 1 << 16;

namespace detail {

inline void check_matmul_dims(int a_cols, int b_rows, const char* what) {
    if (a_cols != b_rows)
        throw std::invalid_argument(std::string(what) + ": inner dimensions differ (" +
                                    std::to_string(a_cols) + " vs " + std::to_string(b_rows) + ")");
}

} // namespace detail

// Exact INT8 x INT8 -> INT32 matmul (emulates mma.u8/s8 with s32 accumulator).
// Entries must lie in [-127, 127]; k is capped so the accumulator cannot
// wrap.
inline Matrix<int32_t> int8_matmul_i32acc(MatView<int8_t> a, MatView<int8_t> b) {
    detail::check_matmul_dims(a.cols, b.rows, "int8_matmul_i32acc");
    if (a.cols > kInt8MatmulMaxK)
        throw std::invalid_argument("int8_matmul_i32acc: inner dimension exceeds overflow guard");
    Matrix<int32_t> out(a.rows, b.cols, 0);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const int32_t av = a(i, k);
            if (av == 0) continue;
            const int8_t* brow = &b(k, 0);
            int32_t* orow = &out(i, 0);
            for (int j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

inline Matrix<int32_t> int8_matmul_i32acc(const Matrix<int8_t>& a, const Matrix<int8_t>& b) {
    return int8_matmul_i32acc(MatView<int8_t>(a), MatView<int8_t>(b));
}

// FP16 x FP16 matmul with an FP16 accumulator (emulates mma.f16.f16.f16).
// Each product of two binary16 values is formed exactly (it always fits in
// binary32), then added into a binary16 accumulator that is rounded to
// nearest-even after every addition, in ascending k order.
//
// Operands and accumulator are carried as doubles already snapped to the
// binary16 grid. The double add of a snapped accumulator and an exact
// product followed by snap_to_half is equivalent to a single correctly
// rounded binary16 addition: whenever the double add is inexact, the
// operands' exponents are too far apart for the sum to sit within one
// binary64 ulp of a binary16 rounding boundary.
inline void fp16_accumulate_row(const double* a_row, MatView<double> b, int k_count,
                                double* acc_row, int cols) {
    for (int k = 0; k < k_count; ++k) {
        const double av = a_row[k];
        if (av == 0.0) continue;
        const double* brow = &b(k, 0);
        for (int j = 0; j < cols; ++j) {
            acc_row[j] = snap_to_half(acc_row[j] + av * brow[j]);
        }
    }
}

// Standalone op: C = A * B with zero-initialized FP16 accumulator, or
// accumulating on top of `init` when provided (flash-style partial sums).
// Overflow to infinity raises, matching the kernel contract that the
// emulation reports rather than saturates.
inline Matrix<double> fp16_matmul_fp16acc(MatView<double> a, MatView<double> b,
                                          const Matrix<double>* init = nullptr) {
    detail::check_matmul_dims(a.cols, b.rows, "fp16_matmul_fp16acc");
    Matrix<double> out(a.rows, b.cols, 0.0);
    if (init) {
        if (init->rows != a.rows || init->cols != b.cols)
            throw std::invalid_argument("fp16_matmul_fp16acc: init block shape mismatch");
        out = *init;
    }
    for (int i = 0; i < a.rows; ++i)
        fp16_accumulate_row(&a(i, 0), b, a.cols, &out(i, 0), b.cols);
    for (const double& v : out.data)
        if (!std::isfinite(v))
            throw std::overflow_error("fp16_matmul_fp16acc: accumulator overflowed binary16 range");
    return out;
}

inline Matrix<double> fp16_matmul_fp16acc(const Matrix<double>& a, const Matrix<double>& b,
                                          const Matrix<double>* init = nullptr) {
    return fp16_matmul_fp16acc(MatView<double>(a), MatView<double>(b), init);
}

// Reference accumulated matmul: binary32 inputs, binary32 accumulation.
// The comparison arm for accumulator ablations.
inline Matrix<float> matmul_fp32acc(MatView<float> a, MatView<float> b) {
    detail::check_matmul_dims(a.cols, b.rows, "matmul_fp32acc");
    Matrix<float> out(a.rows, b.cols, 0.0f);
    for (int i = 0; i < a.rows; ++i) {
        for (int k = 0; k < a.cols; ++k) {
            const float av = a(i, k);
            if (av == 0.0f) continue;
            const float* brow = &b(k, 0);
            float* orow = &out(i, 0);
            for (int j = 0; j < b.cols; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

inline Matrix<float> matmul_fp32acc(const Matrix<float>& a, const Matrix<float>& b) {
    return matmul_fp32acc(MatView<float>(a), MatView<float>(b));
}

} // namespace sageattn
