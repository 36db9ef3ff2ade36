#pragma once

// 8-bit float emulation following the OCP FP8 convention:
//   E4M3: bias 7, max finite 448, no infinities (S.1111.111 is NaN).
//   E5M2: bias 15, max finite 57344, IEEE-like specials.
// Encoding of finite values rounds to nearest (ties to even) and saturates
// at the max finite magnitude, so quantization never emits non-finite
// codes. Non-finite inputs pass through (NaN keeps its top mantissa bits,
// E5M2 infinity maps to the infinity code) so that every one of the 256
// code points survives a decode/encode round trip.

#include <bit>
#include <cmath>
#include <cstdint>

#include "sageattn/half.hpp"

namespace sageattn {

enum class Fp8Format : uint8_t { E4M3, E5M2 };

struct Fp8 {
    uint8_t bits = 0;

    friend bool operator==(Fp8 a, Fp8 b) { return a.bits == b.bits; }
    friend bool operator!=(Fp8 a, Fp8 b) { return a.bits != b.bits; }
};

namespace detail {

struct Fp8Params {
    int mant_bits;
    int bias;
    uint32_t max_code;    // largest finite code (sign bit clear)
    double max_finite;
    bool has_inf;
};

inline constexpr Fp8Params fp8_params(Fp8Format f) {
    if (f == Fp8Format::E4M3)
        return {3, 7, 0x7E, 448.0, false};
    return {2, 15, 0x7B, 57344.0, true};
}

} // namespace detail

inline double fp8_max_finite(Fp8Format f) { return detail::fp8_params(f).max_finite; }

inline Fp8 encode_fp8(double x, Fp8Format format) {
    const auto p = detail::fp8_params(format);
    const uint64_t u = std::bit_cast<uint64_t>(x);
    const uint8_t sign = static_cast<uint8_t>((u >> 56) & 0x80u);
    const uint64_t abs = u & 0x7FFF'FFFF'FFFF'FFFFull;

    if (abs == 0) return Fp8{sign};

    const int exp_field = static_cast<int>(abs >> 52);
    if (exp_field == 0x7FF) {
        const uint64_t payload = abs & 0xF'FFFF'FFFF'FFFFull;
        const uint32_t exp_ones = ((1u << (7 - p.mant_bits)) - 1) << p.mant_bits;
        if (payload == 0) { // infinity
            if (p.has_inf) return Fp8{static_cast<uint8_t>(sign | exp_ones)};
            return Fp8{static_cast<uint8_t>(sign | p.max_code)}; // E4M3: saturate
        }
        // NaN: keep the top mantissa bits, never emitting all-zeros (which
        // would alias the E5M2 infinity code).
        uint32_t mant = static_cast<uint32_t>(payload >> (52 - p.mant_bits));
        if (mant == 0) mant = 1;
        if (format == Fp8Format::E4M3) mant = (1u << p.mant_bits) - 1; // single NaN pattern
        return Fp8{static_cast<uint8_t>(sign | exp_ones | mant)};
    }

    if (exp_field == 0) return Fp8{sign}; // double subnormals underflow to zero

    const double mag = std::bit_cast<double>(abs);
    if (mag > p.max_finite) return Fp8{static_cast<uint8_t>(sign | p.max_code)};

    const int exp = exp_field - 1023;
    const uint64_t mant54 = (uint64_t{1} << 52) | (abs & 0xF'FFFF'FFFF'FFFFull);
    const int min_exp = 1 - p.bias;

    uint32_t encoded;
    if (exp >= min_exp) {
        const uint64_t sig = detail::shift_right_rne(mant54, 52 - p.mant_bits);
        const uint32_t one = 1u << p.mant_bits;
        encoded = ((uint32_t(exp + p.bias) << p.mant_bits) - one) + static_cast<uint32_t>(sig);
    } else {
        const int shift = (52 - p.mant_bits) + (min_exp - exp);
        encoded = shift > 53 ? 0u : static_cast<uint32_t>(detail::shift_right_rne(mant54, shift));
    }
    if (encoded > p.max_code) encoded = p.max_code;
    return Fp8{static_cast<uint8_t>(sign | encoded)};
}

inline Fp8 encode_fp8(float x, Fp8Format format) {
    return encode_fp8(static_cast<double>(x), format);
}

inline double decode_fp8(Fp8 v, Fp8Format format) {
    const auto p = detail::fp8_params(format);
    const bool neg = (v.bits & 0x80u) != 0;
    const uint32_t exp = (v.bits >> p.mant_bits) & ((1u << (7 - p.mant_bits)) - 1);
    const uint32_t mant = v.bits & ((1u << p.mant_bits) - 1);
    const uint32_t exp_all_ones = (1u << (7 - p.mant_bits)) - 1;

    double mag;
    if (exp == 0) {
        mag = std::ldexp(static_cast<double>(mant), 1 - p.bias - p.mant_bits);
    } else if (format == Fp8Format::E5M2 && exp == exp_all_ones) {
        if (mant == 0) {
            mag = std::numeric_limits<double>::infinity();
        } else {
            uint64_t bits = (uint64_t{0x7FF} << 52) | (uint64_t(mant) << (52 - p.mant_bits));
            if (neg) bits |= uint64_t{1} << 63;
            return std::bit_cast<double>(bits);
        }
    } else if (format == Fp8Format::E4M3 && exp == exp_all_ones && mant == (1u << p.mant_bits) - 1) {
        uint64_t bits = (uint64_t{0x7FF} << 52) | (uint64_t(mant) << (52 - p.mant_bits));
        if (neg) bits |= uint64_t{1} << 63;
        return std::bit_cast<double>(bits);
    } else {
        mag = std::ldexp(1.0 + static_cast<double>(mant) / (1 << p.mant_bits),
                         static_cast<int>(exp) - p.bias);
    }
    return neg ? -mag : mag;
}

inline float decode_fp8_f32(Fp8 v, Fp8Format format) {
    return static_cast<float>(decode_fp8(v, format));
}

} // namespace sageattn
