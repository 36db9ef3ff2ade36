#pragma once

// Attention kernels sharing one tiling engine:
//   naive_attention      -- binary64 reference oracle
//   flash_attention_fp   -- binary32 tiled baseline with online softmax
//   sage_attention       -- INT8/FP8-quantized tiled kernels (four presets
//                           plus dtype/accumulator ablation arms)
//
// All kernels are pure functions of their inputs with a fixed accumulation
// order, so identical inputs produce bit-identical outputs. The query-block
// loop has no shared mutable state; key blocks within a query block are
// strictly sequential because online softmax is order-dependent.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

#include "sageattn/matmul.hpp"
#include "sageattn/quant.hpp"
#include "sageattn/tensor.hpp"

namespace sageattn {

struct AttentionInput {
    Tensor4f q;
    Tensor4f k;
    Tensor4f v;
    bool causal = false;
};

enum class QkGranularity : uint8_t { PerToken, PerBlock, PerTensor };
enum class PvPath : uint8_t { Int8, Fp16Acc };
enum class SageVariant : uint8_t { T, B, VT, VB };

// One row of the kernel matrix: granularity for psi_Q/psi_K plus the
// choice of P~V path (fully INT8 vs binary16 data with binary16
// accumulator).
struct KernelConfig {
    QkGranularity qk_granularity = QkGranularity::PerBlock;
    PvPath pv_path = PvPath::Fp16Acc;
    int block_q = 128;
    int block_kv = 64;
};

inline KernelConfig kernel_config_for(SageVariant v) {
    switch (v) {
        case SageVariant::T: return {QkGranularity::PerToken, PvPath::Fp16Acc, 128, 64};
        case SageVariant::B: return {QkGranularity::PerBlock, PvPath::Fp16Acc, 128, 64};
        case SageVariant::VT: return {QkGranularity::PerToken, PvPath::Int8, 128, 64};
        case SageVariant::VB: return {QkGranularity::PerBlock, PvPath::Int8, 128, 64};
    }
    return {};
}

struct SageDiagnostics {
    // Multiply-accumulate counts actually executed per stage.
    uint64_t s_stage_macs = 0;
    uint64_t pv_stage_macs = 0;
    // Static-scale vs per-token quantization of P~ (INT8 P~V path only).
    // The first key block of each query row always matches exactly; later
    // blocks may differ when the running max exceeds the block row max.
    bool measure_static_scale = false;
    uint64_t static_scale_elements = 0;
    uint64_t static_scale_first_block_mismatches = 0;
    uint64_t static_scale_later_block_mismatches = 0;
};

struct SageOptions {
    bool smooth_k = true;
    QuantDtype qk_dtype = QuantDtype::Int8;   // data type of psi_Q / psi_K
    QuantDtype pv_dtype = QuantDtype::Int8;   // data type of psi_P / psi_V (PvPath::Int8)
    bool pv_fp32_accumulator = false;         // PvPath::Fp16Acc comparison arm
    SageDiagnostics* diagnostics = nullptr;
};

enum class TileKind : uint8_t { Full, Diagonal, Skip };

// Classifies tile (i, j) of the causal mask: Skip if every element is above
// the diagonal, Diagonal if the mask cuts through the tile, Full otherwise.
inline TileKind apply_causal_tiling(int i, int j, int block_q, int block_kv, int n_tokens) {
    if (block_q < 1 || block_kv < 1) throw std::invalid_argument("block sizes must be >= 1");
    const int r0 = i * block_q;
    const int r1 = std::min(r0 + block_q, n_tokens) - 1;
    const int c0 = j * block_kv;
    const int c1 = std::min(c0 + block_kv, n_tokens) - 1;
    if (r0 < 0 || r0 > r1 || c0 < 0 || c0 > c1 || r1 >= n_tokens || c1 >= n_tokens)
        throw std::invalid_argument("tile indices out of range");
    if (c0 > r1) return TileKind::Skip;
    if (c1 <= r0) return TileKind::Full;
    return TileKind::Diagonal;
}

namespace detail {

inline void validate_input(const AttentionInput& in, const char* what) {
    if (!in.q.same_shape(in.k) || !in.q.same_shape(in.v))
        throw std::invalid_argument(std::string(what) + ": Q, K, V shapes differ");
    if (!in.q.all_finite() || !in.k.all_finite() || !in.v.all_finite())
        throw std::invalid_argument(std::string(what) + ": non-finite input");
}

} // namespace detail

// Reference attention: S = QK^T/sqrt(d), P = softmax(S) row-wise, O = PV,
// everything accumulated in binary64. The causal flag masks S[i,j] for
// j > i before the softmax.
inline Tensor4d naive_attention(const AttentionInput& in) {
    detail::validate_input(in, "naive_attention");
    const int n = in.q.tokens, d = in.q.head_dim;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    Tensor4d out(in.q.batch, in.q.heads, n, d);
    std::vector<double> s(n);
    for (int b = 0; b < in.q.batch; ++b) {
        for (int h = 0; h < in.q.heads; ++h) {
            const float* Q = in.q.slice_ptr(b, h);
            const float* K = in.k.slice_ptr(b, h);
            const float* V = in.v.slice_ptr(b, h);
            double* O = out.slice_ptr(b, h);
            for (int t = 0; t < n; ++t) {
                const int limit = in.causal ? t + 1 : n;
                double row_max = -std::numeric_limits<double>::infinity();
                for (int j = 0; j < limit; ++j) {
                    double acc = 0.0;
                    for (int c = 0; c < d; ++c)
                        acc += static_cast<double>(Q[size_t(t) * d + c]) * K[size_t(j) * d + c];
                    s[j] = acc * inv_sqrt_d;
                    row_max = std::max(row_max, s[j]);
                }
                double denom = 0.0;
                for (int j = 0; j < limit; ++j) {
                    s[j] = std::exp(s[j] - row_max);
                    denom += s[j];
                }
                double* orow = O + size_t(t) * d;
                for (int c = 0; c < d; ++c) orow[c] = 0.0;
                for (int j = 0; j < limit; ++j) {
                    const double p = s[j];
                    const float* vrow = V + size_t(j) * d;
                    for (int c = 0; c < d; ++c) orow[c] += p * vrow[c];
                }
                for (int c = 0; c < d; ++c) orow[c] /= denom;
            }
        }
    }
    return out;
}

namespace detail {

inline constexpr float kNegInf = -std::numeric_limits<float>::infinity();

// S[r][c] = sum_k A[r][k] * B[c][k], binary32 accumulation in ascending k.
inline void fp32_matmul_nt(MatView<float> a, MatView<float> b, Matrix<float>& out) {
    for (int r = 0; r < a.rows; ++r) {
        const float* arow = &a(r, 0);
        for (int c = 0; c < b.rows; ++c) {
            const float* brow = &b(c, 0);
            float acc = 0.0f;
            for (int k = 0; k < a.cols; ++k) acc += arow[k] * brow[k];
            out(r, c) = acc;
        }
    }
}

} // namespace detail

// Tiled binary32 attention with online softmax; equal to naive_attention up
// to binary32 rounding, for any block sizes >= 1.
inline Tensor4f flash_attention_fp(const AttentionInput& in, int block_q = 128, int block_kv = 64) {
    if (block_q < 1 || block_kv < 1)
        throw std::invalid_argument("flash_attention_fp: block sizes must be >= 1");
    detail::validate_input(in, "flash_attention_fp");

    const int n = in.q.tokens, d = in.q.head_dim;
    const float inv_sqrt_d = static_cast<float>(1.0 / std::sqrt(static_cast<double>(d)));
    const int n_qblocks = (n + block_q - 1) / block_q;
    const int n_kvblocks = (n + block_kv - 1) / block_kv;

    Tensor4f out(in.q.batch, in.q.heads, n, d);
    Matrix<float> s(block_q, block_kv);
    Matrix<float> o_acc(block_q, d);
    std::vector<float> m(block_q), l(block_q);

    for (int b = 0; b < in.q.batch; ++b) {
        for (int h = 0; h < in.q.heads; ++h) {
            const MatView<float> Q = in.q.slice(b, h);
            const MatView<float> K = in.k.slice(b, h);
            const MatView<float> V = in.v.slice(b, h);
            float* O = out.slice_ptr(b, h);

            for (int i = 0; i < n_qblocks; ++i) {
                const int r0 = i * block_q;
                const int bq = std::min(block_q, n - r0);
                std::fill(m.begin(), m.begin() + bq, detail::kNegInf);
                std::fill(l.begin(), l.begin() + bq, 0.0f);
                for (int r = 0; r < bq; ++r)
                    std::fill(&o_acc(r, 0), &o_acc(r, 0) + d, 0.0f);

                for (int j = 0; j < n_kvblocks; ++j) {
                    const int c0 = j * block_kv;
                    const int bkv = std::min(block_kv, n - c0);
                    TileKind kind = TileKind::Full;
                    if (in.causal) {
                        kind = apply_causal_tiling(i, j, block_q, block_kv, n);
                        if (kind == TileKind::Skip) continue;
                    }

                    detail::fp32_matmul_nt(Q.block(r0, bq), K.block(c0, bkv), s);
                    for (int r = 0; r < bq; ++r)
                        for (int c = 0; c < bkv; ++c) s(r, c) *= inv_sqrt_d;
                    if (kind == TileKind::Diagonal)
                        for (int r = 0; r < bq; ++r)
                            for (int c = 0; c < bkv; ++c)
                                if (c0 + c > r0 + r) s(r, c) = detail::kNegInf;

                    for (int r = 0; r < bq; ++r) {
                        float row_max = m[r];
                        for (int c = 0; c < bkv; ++c) row_max = std::max(row_max, s(r, c));
                        const float rescale = std::exp(m[r] - row_max);
                        float row_sum = 0.0f;
                        for (int c = 0; c < bkv; ++c) {
                            const float p = s(r, c) == detail::kNegInf ? 0.0f : std::exp(s(r, c) - row_max);
                            s(r, c) = p;
                            row_sum += p;
                        }
                        m[r] = row_max;
                        l[r] = rescale * l[r] + row_sum;
                        float* orow = &o_acc(r, 0);
                        for (int c = 0; c < d; ++c) orow[c] *= rescale;
                        for (int c = 0; c < bkv; ++c) {
                            const float p = s(r, c);
                            if (p == 0.0f) continue;
                            const float* vrow = &V(c0 + c, 0);
                            for (int x = 0; x < d; ++x) orow[x] += p * vrow[x];
                        }
                    }
                }

                for (int r = 0; r < bq; ++r) {
                    const float inv_l = 1.0f / l[r];
                    float* orow = O + size_t(r0 + r) * d;
                    for (int c = 0; c < d; ++c) orow[c] = o_acc(r, c) * inv_l;
                }
            }
        }
    }
    return out;
}

namespace detail {

inline Granularity qk_quant_granularity(QkGranularity g, int kernel_block) {
    switch (g) {
        case QkGranularity::PerToken: return Granularity::per_token();
        case QkGranularity::PerBlock: return Granularity::per_block(kernel_block);
        case QkGranularity::PerTensor: return Granularity::per_tensor();
    }
    return Granularity::per_tensor();
}

// INT8 S-stage tile: acc[r][c] = sum_k qhat[r0+r][k] * khat[c0+c][k].
inline void int8_tile_nt(const QuantizedMatrix& qhat, const QuantizedMatrix& khat, int r0, int bq,
                         int c0, int bkv, Matrix<int32_t>& acc) {
    const int d = qhat.cols;
    const int8_t* qbase = qhat.int8_data() + size_t(r0) * d;
    const int8_t* kbase = khat.int8_data() + size_t(c0) * d;
    for (int r = 0; r < bq; ++r) {
        const int8_t* qrow = qbase + size_t(r) * d;
        for (int c = 0; c < bkv; ++c) {
            const int8_t* krow = kbase + size_t(c) * d;
            int32_t s = 0;
            for (int k = 0; k < d; ++k) s += int32_t(qrow[k]) * int32_t(krow[k]);
            acc(r, c) = s;
        }
    }
}

// FP8 S-stage tile on pre-decoded values, binary32 accumulation (emulates
// mma.f8f8.f32).
inline void fp32_tile_nt(const Matrix<float>& qdec, const Matrix<float>& kdec, int r0, int bq,
                         int c0, int bkv, Matrix<float>& acc) {
    const int d = qdec.cols;
    for (int r = 0; r < bq; ++r) {
        const float* qrow = &qdec(r0 + r, 0);
        for (int c = 0; c < bkv; ++c) {
            const float* krow = &kdec(c0 + c, 0);
            float s = 0.0f;
            for (int k = 0; k < d; ++k) s += qrow[k] * krow[k];
            acc(r, c) = s;
        }
    }
}

inline Matrix<float> decode_to_f32(const QuantizedMatrix& q) {
    Matrix<float> out(q.rows, q.cols);
    const Fp8Format f = q.dtype == QuantDtype::FpE4M3 ? Fp8Format::E4M3 : Fp8Format::E5M2;
    for (int r = 0; r < q.rows; ++r)
        for (int c = 0; c < q.cols; ++c)
            out(r, c) = decode_fp8_f32(Fp8{q.codes[size_t(r) * q.cols + c]}, f);
    return out;
}

} // namespace detail

// Quantized tiled attention. Pipeline per Table-3 style configs:
//   1. smooth K (optional ablation switch),
//   2. fold 1/sqrt(d) into Q, quantize Q and K at the configured
//      granularity/dtype,
//   3. per key block, S = dequant(Q_hat K_hat^T) in binary32,
//   4. online softmax update (m, l, P~) in binary32,
//   5. P~V via INT8/FP8 quantization or binary16 data with a binary16 (or
//      binary32 ablation) accumulator,
//   6. exp(m_prev - m_new) rescale of the output block each iteration,
//   7. final O = diag(l)^{-1} O.
inline Tensor4f sage_attention(const AttentionInput& in, const KernelConfig& config,
                               const SageOptions& options = {}) {
    if (config.block_q < 1 || config.block_kv < 1)
        throw std::invalid_argument("sage_attention: block sizes must be >= 1");
    detail::validate_input(in, "sage_attention");

    const int n = in.q.tokens, d = in.q.head_dim;
    const int block_q = config.block_q, block_kv = config.block_kv;
    const int n_qblocks = (n + block_q - 1) / block_q;
    const int n_kvblocks = (n + block_kv - 1) / block_kv;
    const bool pv_fp16 = config.pv_path == PvPath::Fp16Acc;
    const bool qk_int8 = options.qk_dtype == QuantDtype::Int8;
    const bool pv_int8 = options.pv_dtype == QuantDtype::Int8;
    SageDiagnostics* diag = options.diagnostics;

    // Preprocessing: K = K - mean(K); quantize folded Q and smoothed K.
    Tensor4f k_work;
    const Tensor4f* k_src = &in.k;
    if (options.smooth_k) {
        auto [smoothed, state] = smooth_k(in.k);
        k_work = std::move(smoothed);
        k_src = &k_work;
        (void)state;
    }
    const Tensor4f q_folded = fold_scale_into_q(in.q, d);

    const Granularity gq = detail::qk_quant_granularity(config.qk_granularity, block_q);
    const Granularity gk = detail::qk_quant_granularity(config.qk_granularity, block_kv);

    Tensor4f out(in.q.batch, in.q.heads, n, d);

    Matrix<int32_t> s_acc(block_q, block_kv);
    Matrix<float> s_f(block_q, block_kv);
    Matrix<float> p_tile(block_q, block_kv);
    Matrix<float> o32(block_q, d);
    Matrix<double> o16(block_q, d);
    Matrix<double> p16(block_q, block_kv);
    std::vector<float> m(block_q), l(block_q), rescale(block_q);

    for (int b = 0; b < in.q.batch; ++b) {
        for (int h = 0; h < in.q.heads; ++h) {
            const QuantizedMatrix qhat = quantize(q_folded.slice(b, h), gq, options.qk_dtype);
            const QuantizedMatrix khat = quantize(k_src->slice(b, h), gk, options.qk_dtype);
            Matrix<float> qdec, kdec;
            if (!qk_int8) {
                qdec = detail::decode_to_f32(qhat);
                kdec = detail::decode_to_f32(khat);
            }

            // P~V operand prep for the whole head.
            QuantizedMatrix vhat;
            Matrix<float> vdec;
            Matrix<double> v16;
            if (pv_fp16) {
                const MatView<float> V = in.v.slice(b, h);
                v16 = Matrix<double>(n, d);
                for (int t = 0; t < n; ++t)
                    for (int c = 0; c < d; ++c) v16(t, c) = snap_to_half(double(V(t, c)));
            } else {
                vhat = quantize(in.v.slice(b, h), Granularity::per_channel(), options.pv_dtype);
                if (!pv_int8) vdec = detail::decode_to_f32(vhat);
            }

            float* O = out.slice_ptr(b, h);

            for (int i = 0; i < n_qblocks; ++i) {
                const int r0 = i * block_q;
                const int bq = std::min(block_q, n - r0);
                std::fill(m.begin(), m.begin() + bq, detail::kNegInf);
                std::fill(l.begin(), l.begin() + bq, 0.0f);
                if (pv_fp16)
                    for (int r = 0; r < bq; ++r)
                        std::fill(&o16(r, 0), &o16(r, 0) + d, 0.0);
                else
                    for (int r = 0; r < bq; ++r)
                        std::fill(&o32(r, 0), &o32(r, 0) + d, 0.0f);
                bool first_tile = true;

                for (int j = 0; j < n_kvblocks; ++j) {
                    const int c0 = j * block_kv;
                    const int bkv = std::min(block_kv, n - c0);
                    TileKind kind = TileKind::Full;
                    if (in.causal) {
                        kind = apply_causal_tiling(i, j, block_q, block_kv, n);
                        if (kind == TileKind::Skip) continue;
                    }
                    if (diag) diag->s_stage_macs += uint64_t(bq) * bkv * d;

                    // S = Matmul(Q_hat, K_hat^T) * delta_Q * delta_K.
                    if (qk_int8) {
                        detail::int8_tile_nt(qhat, khat, r0, bq, c0, bkv, s_acc);
                        for (int r = 0; r < bq; ++r) {
                            const float dq = qhat.scales[gq.group_of(r0 + r, 0)];
                            for (int c = 0; c < bkv; ++c)
                                s_f(r, c) = (float(s_acc(r, c)) * dq) *
                                            khat.scales[gk.group_of(c0 + c, 0)];
                        }
                    } else {
                        detail::fp32_tile_nt(qdec, kdec, r0, bq, c0, bkv, s_f);
                        for (int r = 0; r < bq; ++r) {
                            const float dq = qhat.scales[gq.group_of(r0 + r, 0)];
                            for (int c = 0; c < bkv; ++c)
                                s_f(r, c) = (s_f(r, c) * dq) * khat.scales[gk.group_of(c0 + c, 0)];
                        }
                    }

                    if (kind == TileKind::Diagonal)
                        for (int r = 0; r < bq; ++r)
                            for (int c = 0; c < bkv; ++c)
                                if (c0 + c > r0 + r) s_f(r, c) = detail::kNegInf;

                    // Online softmax update in binary32.
                    for (int r = 0; r < bq; ++r) {
                        float row_max = m[r];
                        for (int c = 0; c < bkv; ++c) row_max = std::max(row_max, s_f(r, c));
                        rescale[r] = std::exp(m[r] - row_max);
                        float row_sum = 0.0f;
                        for (int c = 0; c < bkv; ++c) {
                            const float p =
                                s_f(r, c) == detail::kNegInf ? 0.0f : std::exp(s_f(r, c) - row_max);
                            p_tile(r, c) = p;
                            row_sum += p;
                        }
                        m[r] = row_max;
                        l[r] = rescale[r] * l[r] + row_sum;
                    }

                    if (diag) diag->pv_stage_macs += uint64_t(bq) * bkv * d;

                    if (pv_fp16) {
                        // Rescale the binary16 output block in binary32, then
                        // run the binary16-accumulator matmul on top of it.
                        for (int r = 0; r < bq; ++r) {
                            double* orow = &o16(r, 0);
                            const float rs = rescale[r];
                            for (int c = 0; c < d; ++c)
                                orow[c] = options.pv_fp32_accumulator
                                              ? double(rs * float(orow[c]))
                                              : snap_to_half(double(rs * float(orow[c])));
                            for (int c = 0; c < bkv; ++c)
                                p16(r, c) = snap_to_half(double(p_tile(r, c)));
                        }
                        const MatView<double> vblock(&v16(c0, 0), bkv, d, d);
                        if (options.pv_fp32_accumulator) {
                            for (int r = 0; r < bq; ++r) {
                                double* orow = &o16(r, 0);
                                for (int k = 0; k < bkv; ++k) {
                                    const float pv = float(p16(r, k));
                                    if (pv == 0.0f) continue;
                                    const double* vrow = &vblock(k, 0);
                                    for (int c = 0; c < d; ++c)
                                        orow[c] = double(float(orow[c]) + pv * float(vrow[c]));
                                }
                            }
                        } else {
                            for (int r = 0; r < bq; ++r)
                                fp16_accumulate_row(&p16(r, 0), vblock, bkv, &o16(r, 0), d);
                        }
                    } else {
                        const MatView<float> ptile_view(&p_tile(0, 0), bq, bkv, block_kv);
                        const QuantizedMatrix phat = quantize_p_static(ptile_view, options.pv_dtype);
                        if (diag && diag->measure_static_scale && pv_int8) {
                            const QuantizedMatrix ptok =
                                quantize(ptile_view, Granularity::per_token(), QuantDtype::Int8);
                            uint64_t mism = 0;
                            for (size_t x = 0; x < phat.codes.size(); ++x)
                                if (phat.codes[x] != ptok.codes[x]) ++mism;
                            diag->static_scale_elements += phat.codes.size();
                            (first_tile ? diag->static_scale_first_block_mismatches
                                        : diag->static_scale_later_block_mismatches) += mism;
                        }

                        const float dp = phat.scales[0];
                        if (pv_int8) {
                            const int8_t* vbase = vhat.int8_data() + size_t(c0) * d;
                            for (int r = 0; r < bq; ++r) {
                                const int8_t* prow = phat.int8_data() + size_t(r) * bkv;
                                float* orow = &o32(r, 0);
                                const float rs = rescale[r];
                                for (int c = 0; c < d; ++c) orow[c] *= rs;
                                // acc in i32, dequantize by delta_P * delta_V.
                                for (int c = 0; c < d; ++c) {
                                    int32_t acc = 0;
                                    for (int k = 0; k < bkv; ++k)
                                        acc += int32_t(prow[k]) * int32_t(vbase[size_t(k) * d + c]);
                                    orow[c] += (float(acc) * dp) * vhat.scales[c];
                                }
                            }
                        } else {
                            const Matrix<float> pdec = detail::decode_to_f32(phat);
                            for (int r = 0; r < bq; ++r) {
                                float* orow = &o32(r, 0);
                                const float rs = rescale[r];
                                for (int c = 0; c < d; ++c) orow[c] *= rs;
                                for (int c = 0; c < d; ++c) {
                                    float acc = 0.0f;
                                    for (int k = 0; k < bkv; ++k)
                                        acc += pdec(r, k) * vdec(c0 + k, c);
                                    orow[c] += (acc * dp) * vhat.scales[c];
                                }
                            }
                        }
                    }
                    first_tile = false;
                }

                // O = diag(l)^{-1} O in binary32.
                for (int r = 0; r < bq; ++r) {
                    const float inv_l = 1.0f / l[r];
                    float* orow = O + size_t(r0 + r) * d;
                    if (pv_fp16) {
                        const double* src = &o16(r, 0);
                        for (int c = 0; c < d; ++c) {
                            if (!std::isfinite(src[c]))
                                throw std::overflow_error(
                                    "sage_attention: binary16 P~V accumulator overflowed");
                            orow[c] = float(src[c]) * inv_l;
                        }
                    } else {
                        const float* src = &o32(r, 0);
                        for (int c = 0; c < d; ++c) orow[c] = src[c] * inv_l;
                    }
                }
            }
        }
    }
    return out;
}

inline Tensor4f sage_attention(const AttentionInput& in, SageVariant variant,
                               const SageOptions& options = {}) {
    return sage_attention(in, kernel_config_for(variant), options);
}

} // namespace sageattn
