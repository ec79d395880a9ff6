#pragma once

#include <bit>
#include <cmath>
#include <cstdint>

namespace qmoe {

// 16-bit brain-float stored as its raw bit pattern.
struct Bf16 {
  std::uint16_t bits = 0;

  static Bf16 from_float(float f) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(f);
    if (std::isnan(f)) return Bf16{static_cast<std::uint16_t>((u >> 16) | 0x0040u)};
    // round to nearest, ties to even
    u += 0x7FFFu + ((u >> 16) & 1u);
    return Bf16{static_cast<std::uint16_t>(u >> 16)};
  }

  float to_float() const { return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16); }

  friend bool operator==(Bf16, Bf16) = default;
};

inline float round_bf16(float f) { return Bf16::from_float(f).to_float(); }

// Per-row dequantization pair (w_min, w_max).
struct MinMax {
  Bf16 lo;
  Bf16 hi;
  friend bool operator==(const MinMax&, const MinMax&) = default;
};

}  // namespace qmoe
