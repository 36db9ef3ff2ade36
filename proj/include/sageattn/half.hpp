#pragma once

// Software emulation of IEEE binary16 (1 sign, 5 exponent, 10 mantissa).
// All rounding is round-to-nearest, ties-to-even, matching GPU convert
// instructions. Conversions from binary64 round once (no intermediate
// binary32 step), so results are correctly rounded for any double input.

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>

namespace sageattn {

struct Half {
    uint16_t bits = 0;

    friend bool operator==(Half a, Half b) { return a.bits == b.bits; }
    friend bool operator!=(Half a, Half b) { return a.bits != b.bits; }
};

namespace detail {

// Round a positive integer significand right by `shift` bits, RNE.
inline uint64_t shift_right_rne(uint64_t mant, int shift) {
    if (shift <= 0) return mant << -shift;
    if (shift > 63) return 0;
    uint64_t keep = mant >> shift;
    uint64_t rem = mant & ((uint64_t{1} << shift) - 1);
    uint64_t half = uint64_t{1} << (shift - 1);
    if (rem > half || (rem == half && (keep & 1))) ++keep;
    return keep;
}

} // namespace detail

// Nearest binary16 to x, ties to even. Values at or beyond 65520 overflow
// to infinity per IEEE; NaN propagates as a quiet NaN.
inline Half round_to_half(double x) {
    const uint64_t u = std::bit_cast<uint64_t>(x);
    const uint16_t sign = static_cast<uint16_t>((u >> 48) & 0x8000u);
    const uint64_t abs = u & 0x7FFF'FFFF'FFFF'FFFFull;

    if (abs == 0) return Half{sign};

    const int exp_field = static_cast<int>(abs >> 52);
    if (exp_field == 0x7FF) {
        const bool is_nan = (abs & 0xF'FFFF'FFFF'FFFFull) != 0;
        return Half{static_cast<uint16_t>(sign | (is_nan ? 0x7E00u : 0x7C00u))};
    }

    // Binary64 subnormals are below 2^-1022, far under half's 2^-25
    // round-to-zero threshold.
    if (exp_field == 0) return Half{sign};

    const int exp = exp_field - 1023;
    const uint64_t mant54 = (uint64_t{1} << 52) | (abs & 0xF'FFFF'FFFF'FFFFull);

    uint32_t encoded;
    if (exp >= -14) {
        // Normal target: 11-bit significand in [1024, 2047]; a carry to
        // 2048 spills into the exponent field, which is the correct
        // encoding for the next binade.
        const uint64_t sig = detail::shift_right_rne(mant54, 52 - 10);
        encoded = static_cast<uint32_t>(((uint32_t(exp + 15) << 10) - 1024) + sig);
    } else {
        // Subnormal target: fixed scale 2^-24. A round up to 1024 lands on
        // the smallest normal encoding by construction.
        const int shift = (52 - 10) + (-14 - exp);
        if (shift > 53) return Half{sign}; // |x| < 2^-25: underflows to zero
        encoded = static_cast<uint32_t>(detail::shift_right_rne(mant54, shift));
    }
    if (encoded >= 0x7C00u) encoded = 0x7C00u; // overflow saturates to infinity
    return Half{static_cast<uint16_t>(sign | encoded)};
}

inline Half round_to_half(float x) { return round_to_half(static_cast<double>(x)); }

inline double half_to_double(Half h) {
    const uint64_t sign = uint64_t(h.bits & 0x8000u) << 48;
    const int exp = (h.bits >> 10) & 0x1F;
    const uint64_t mant = h.bits & 0x3FFu;
    uint64_t u;
    if (exp == 0) {
        if (mant == 0) {
            u = sign;
        } else {
            // subnormal: mant * 2^-24
            u = std::bit_cast<uint64_t>(static_cast<double>(mant) * 0x1p-24);
            u |= sign;
        }
    } else if (exp == 31) {
        u = sign | (uint64_t{0x7FF} << 52) | (mant << 42);
    } else {
        u = sign | (uint64_t(exp - 15 + 1023) << 52) | (mant << 42);
    }
    return std::bit_cast<double>(u);
}

inline float half_to_float(Half h) { return static_cast<float>(half_to_double(h)); }

inline bool half_is_finite(Half h) { return ((h.bits >> 10) & 0x1F) != 31; }
inline bool half_is_inf(Half h) {
    return ((h.bits >> 10) & 0x1F) == 31 && (h.bits & 0x3FFu) == 0;
}

// Value-level rounding: the nearest binary16 value, kept in binary64.
// Used on hot paths to avoid an encode/decode pair per accumulation step.
inline double snap_to_half(double x) { return half_to_double(round_to_half(x)); }

inline constexpr double kHalfMaxFinite = 65504.0;

} // namespace sageattn
