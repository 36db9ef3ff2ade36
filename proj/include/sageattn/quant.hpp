#pragma once

// Dynamic quantizers and dequantizers for the attention tensors, the
// K-smoothing transform, and the static-scale quantizer for the softmax
// numerator block.
//
// INT8 uses the symmetric range [-127, 127]: scales are max|group|/127 and
// values are clamped after rounding so the max element maps to +-127 even
// under binary32 division slack. Groups whose max is zero take scale 1 and
// all-zero codes, which dequantize to exact zeros.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "sageattn/fp8.hpp"
#include "sageattn/tensor.hpp"

namespace sageattn {

enum class QuantDtype : uint8_t { Int8, FpE4M3, FpE5M2 };

inline float quant_dtype_max(QuantDtype d) {
    switch (d) {
        case QuantDtype::Int8: return 127.0f;
        case QuantDtype::FpE4M3: return 448.0f;
        case QuantDtype::FpE5M2: return 57344.0f;
    }
    return 127.0f;
}

struct Granularity {
    enum class Kind : uint8_t { PerTensor, PerToken, PerChannel, PerBlock };
    Kind kind = Kind::PerTensor;
    int block_size = 0; // tokens per group, PerBlock only

    static Granularity per_tensor() { return {Kind::PerTensor, 0}; }
    static Granularity per_token() { return {Kind::PerToken, 0}; }
    static Granularity per_channel() { return {Kind::PerChannel, 0}; }
    static Granularity per_block(int tokens) {
        if (tokens < 1) throw std::invalid_argument("per-block granularity needs block_size >= 1");
        return {Kind::PerBlock, tokens};
    }

    int group_count(int rows, int cols) const {
        switch (kind) {
            case Kind::PerTensor: return 1;
            case Kind::PerToken: return rows;
            case Kind::PerChannel: return cols;
            case Kind::PerBlock: return (rows + block_size - 1) / block_size;
        }
        return 1;
    }

    int group_of(int r, int c) const {
        switch (kind) {
            case Kind::PerTensor: return 0;
            case Kind::PerToken: return r;
            case Kind::PerChannel: return c;
            case Kind::PerBlock: return r / block_size;
        }
        return 0;
    }
};

// Low-precision matrix plus its granularity-tagged scale vector. Codes are
// raw bytes: two's-complement INT8 or FP8 bit patterns depending on dtype.
struct QuantizedMatrix {
    int rows = 0;
    int cols = 0;
    QuantDtype dtype = QuantDtype::Int8;
    Granularity granularity;
    std::vector<uint8_t> codes;
    std::vector<float> scales; // one strictly positive scale per group

    const int8_t* int8_data() const { return reinterpret_cast<const int8_t*>(codes.data()); }
    int8_t* int8_data() { return reinterpret_cast<int8_t*>(codes.data()); }

    MatView<int8_t> int8_view() const {
        return MatView<int8_t>(int8_data(), rows, cols, cols);
    }

    float dequant_at(int r, int c) const {
        const float s = scales[granularity.group_of(r, c)];
        if (dtype == QuantDtype::Int8)
            return s * static_cast<float>(int8_data()[size_t(r) * cols + c]);
        const Fp8Format f = dtype == QuantDtype::FpE4M3 ? Fp8Format::E4M3 : Fp8Format::E5M2;
        return s * decode_fp8_f32(Fp8{codes[size_t(r) * cols + c]}, f);
    }
};

namespace detail {

inline int8_t quantize_int8_value(float x, float inv_scale) {
    const float scaled = x * inv_scale;
    float r = std::nearbyintf(scaled); // RNE under the default rounding mode
    if (r > 127.0f) r = 127.0f;
    if (r < -127.0f) r = -127.0f;
    return static_cast<int8_t>(r);
}

inline void group_max_abs(MatView<float> a, const Granularity& g, std::vector<float>& out) {
    out.assign(g.group_count(a.rows, a.cols), 0.0f);
    for (int r = 0; r < a.rows; ++r) {
        const float* row = &a(r, 0);
        if (g.kind == Granularity::Kind::PerChannel) {
            for (int c = 0; c < a.cols; ++c) {
                const float v = std::fabs(row[c]);
                if (v > out[c]) out[c] = v;
            }
        } else {
            const int gi = g.group_of(r, 0);
            float m = out[gi];
            for (int c = 0; c < a.cols; ++c) {
                const float v = std::fabs(row[c]);
                if (v > m) m = v;
            }
            out[gi] = m;
        }
    }
}

} // namespace detail

// (delta_A, A_hat) = psi(A): scale each group to the target format's full
// range and round to nearest-even. Throws on non-finite input.
inline QuantizedMatrix quantize(MatView<float> a, Granularity granularity, QuantDtype dtype) {
    QuantizedMatrix q;
    q.rows = a.rows;
    q.cols = a.cols;
    q.dtype = dtype;
    q.granularity = granularity;
    q.codes.resize(size_t(a.rows) * size_t(a.cols));

    for (int r = 0; r < a.rows; ++r)
        for (int c = 0; c < a.cols; ++c)
            if (!std::isfinite(a(r, c)))
                throw std::invalid_argument("quantize: non-finite input");

    detail::group_max_abs(a, granularity, q.scales);
    const float fmax = quant_dtype_max(dtype);
    std::vector<float> inv_scales(q.scales.size());
    for (size_t g = 0; g < q.scales.size(); ++g) {
        if (q.scales[g] == 0.0f) {
            q.scales[g] = 1.0f; // zero-max fallback: codes stay 0
            inv_scales[g] = 0.0f;
        } else {
            q.scales[g] /= fmax;
            inv_scales[g] = 1.0f / q.scales[g];
        }
    }

    if (dtype == QuantDtype::Int8) {
        int8_t* out = q.int8_data();
        for (int r = 0; r < a.rows; ++r) {
            const float* row = &a(r, 0);
            for (int c = 0; c < a.cols; ++c)
                out[size_t(r) * a.cols + c] =
                    detail::quantize_int8_value(row[c], inv_scales[granularity.group_of(r, c)]);
        }
    } else {
        const Fp8Format f = dtype == QuantDtype::FpE4M3 ? Fp8Format::E4M3 : Fp8Format::E5M2;
        for (int r = 0; r < a.rows; ++r) {
            const float* row = &a(r, 0);
            for (int c = 0; c < a.cols; ++c) {
                const float scaled = row[c] * inv_scales[granularity.group_of(r, c)];
                q.codes[size_t(r) * a.cols + c] = encode_fp8(scaled, f).bits;
            }
        }
    }
    return q;
}

inline QuantizedMatrix quantize(const Matrix<float>& a, Granularity g, QuantDtype dtype) {
    return quantize(MatView<float>(a), g, dtype);
}

// psi^{-1}: element-wise product of codes with the broadcast group scale.
inline Matrix<float> dequantize(const QuantizedMatrix& q) {
    Matrix<float> out(q.rows, q.cols);
    for (int r = 0; r < q.rows; ++r)
        for (int c = 0; c < q.cols; ++c) out(r, c) = q.dequant_at(r, c);
    return out;
}

// Channel-wise token mean of K per (batch, head), computed in binary32
// with pairwise summation so long token axes keep the shared-bias signal.
struct SmoothState {
    int batch = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<float> mean_k; // batch x heads x head_dim

    std::span<const float> mean(int b, int h) const {
        return {mean_k.data() + (size_t(b) * heads + h) * head_dim, size_t(head_dim)};
    }
};

namespace detail {

// Pairwise sum of column c over rows [t0, t1) of a token-major slice.
inline float pairwise_column_sum(const float* base, int stride, int c, int t0, int t1) {
    const int n = t1 - t0;
    if (n <= 8) {
        float s = 0.0f;
        for (int t = t0; t < t1; ++t) s += base[size_t(t) * stride + c];
        return s;
    }
    const int mid = t0 + n / 2;
    return pairwise_column_sum(base, stride, c, t0, mid) +
           pairwise_column_sum(base, stride, c, mid, t1);
}

} // namespace detail

// gamma(K) = K - mean(K): subtracts the per-(batch, head) channel-wise
// token mean. Softmax attention is invariant to this shift because each
// score row moves by the row constant q . mean(K).
inline std::pair<Tensor4f, SmoothState> smooth_k(const Tensor4f& k) {
    SmoothState st;
    st.batch = k.batch;
    st.heads = k.heads;
    st.head_dim = k.head_dim;
    st.mean_k.resize(size_t(k.batch) * k.heads * k.head_dim);

    Tensor4f out(k.batch, k.heads, k.tokens, k.head_dim);
    const float inv_n = 1.0f / static_cast<float>(k.tokens);
    for (int b = 0; b < k.batch; ++b) {
        for (int h = 0; h < k.heads; ++h) {
            const float* src = k.slice_ptr(b, h);
            float* dst = out.slice_ptr(b, h);
            float* mean = st.mean_k.data() + (size_t(b) * k.heads + h) * k.head_dim;
            for (int c = 0; c < k.head_dim; ++c)
                mean[c] = detail::pairwise_column_sum(src, k.head_dim, c, 0, k.tokens) * inv_n;
            for (int t = 0; t < k.tokens; ++t)
                for (int c = 0; c < k.head_dim; ++c)
                    dst[size_t(t) * k.head_dim + c] = src[size_t(t) * k.head_dim + c] - mean[c];
        }
    }
    return {std::move(out), std::move(st)};
}

// Folds the 1/sqrt(d) softmax coefficient into Q before quantization, so
// kernels never rescale scores afterwards.
inline Tensor4f fold_scale_into_q(const Tensor4f& q, int head_dim) {
    if (head_dim < 1) throw std::invalid_argument("fold_scale_into_q: head_dim must be >= 1");
    Tensor4f out = q;
    const float s = static_cast<float>(1.0 / std::sqrt(static_cast<double>(head_dim)));
    for (float& v : out.data) v *= s;
    return out;
}

// Static-scale quantizer for a softmax-numerator block: every entry lies in
// [0, 1] by construction (the online softmax subtracts the running max), so
// a single scale 1/fmax covers the block. Entries outside [0, 1 + eps]
// indicate an upstream invariant violation and throw.
inline QuantizedMatrix quantize_p_static(MatView<float> p, QuantDtype dtype = QuantDtype::Int8) {
    constexpr float kSlack = 1e-6f;
    QuantizedMatrix q;
    q.rows = p.rows;
    q.cols = p.cols;
    q.dtype = dtype;
    q.granularity = Granularity::per_block(p.rows > 0 ? p.rows : 1);
    const float fmax = quant_dtype_max(dtype);
    q.scales.assign(1, 1.0f / fmax);
    q.codes.resize(size_t(p.rows) * size_t(p.cols));

    if (dtype == QuantDtype::Int8) {
        int8_t* out = q.int8_data();
        for (int r = 0; r < p.rows; ++r) {
            const float* row = &p(r, 0);
            for (int c = 0; c < p.cols; ++c) {
                const float v = row[c];
                if (!(v >= 0.0f && v <= 1.0f + kSlack))
                    throw std::invalid_argument("quantize_p_static: entry outside [0, 1]");
                out[size_t(r) * p.cols + c] = detail::quantize_int8_value(v, fmax);
            }
        }
    } else {
        const Fp8Format f = dtype == QuantDtype::FpE4M3 ? Fp8Format::E4M3 : Fp8Format::E5M2;
        for (int r = 0; r < p.rows; ++r) {
            const float* row = &p(r, 0);
            for (int c = 0; c < p.cols; ++c) {
                const float v = row[c];
                if (!(v >= 0.0f && v <= 1.0f + kSlack))
                    throw std::invalid_argument("quantize_p_static: entry outside [0, 1]");
                q.codes[size_t(r) * p.cols + c] = encode_fp8(v * fmax, f).bits;
            }
        }
    }
    return q;
}

inline QuantizedMatrix quantize_p_static(const Matrix<float>& p,
                                         QuantDtype dtype = QuantDtype::Int8) {
    return quantize_p_static(MatView<float>(p), dtype);
}

} // namespace sageattn
