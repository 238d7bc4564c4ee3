#pragma once

// Exact fixed-point codes and the symmetric uniform quantizer with a
// power-of-two step. A grid value is (-1)^sign * mantissa * 2^(-exponent);
// the quantizer maps x onto the 2^N - 1 symmetric levels
// {k * 2^-f : |k| <= 2^(N-1) - 1}. Because the step is a power of two, the
// scale in and out of index space is exact in binary floating point, so
// quantized values round-trip through their integer codes bit-exactly.

#include <cmath>
#include <cstdint>
#include <stdexcept>

#include "sgm/tensor.hpp"

namespace sgm {

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 24;
inline constexpr int kMinExponent = -60;
inline constexpr int kMaxExponent = 60;

struct QuantizerSpec {
  int bits = 2;      // N
  int exponent = 0;  // f; step size is 2^-f

  long max_mantissa() const { return (1L << (bits - 1)) - 1; }

  void validate() const {
    if (bits < kMinBits || bits > kMaxBits) {
      throw std::invalid_argument("quantizer: bits must be in [" + std::to_string(kMinBits) +
                                  ", " + std::to_string(kMaxBits) + "], got " +
                                  std::to_string(bits));
    }
    if (exponent < kMinExponent || exponent > kMaxExponent) {
      throw std::invalid_argument("quantizer: exponent must be in [" +
                                  std::to_string(kMinExponent) + ", " +
                                  std::to_string(kMaxExponent) + "], got " +
                                  std::to_string(exponent));
    }
  }

  bool operator==(const QuantizerSpec&) const = default;
};

namespace detail {

// Core of the quantizer, shared by the scalar entry points and the
// regularizer's hot loops. All three scalings (by inv_step = 2^f, by
// step = 2^-f) are exact; std::round gives round-half-away-from-zero,
// which keeps the map odd.
inline double quantize_with(double x, double step, double inv_step, double max_index) {
  double k = std::round(x * inv_step);
  if (k > max_index) k = max_index;
  if (k < -max_index) k = -max_index;
  return k * step;
}

inline long index_with(double x, double inv_step, double max_index) {
  double k = std::round(x * inv_step);
  if (k > max_index) k = max_index;
  if (k < -max_index) k = -max_index;
  return static_cast<long>(k);
}

}  // namespace detail

// Step size 2^-f.
double step_size(const QuantizerSpec& spec);

// Nearest-level index clip(round(x * 2^f), -(2^(N-1)-1), 2^(N-1)-1).
long mode_index(double x, const QuantizerSpec& spec);

// Nearest level itself; quantize_value(x) == mode_index(x) * step.
double quantize_value(double x, const QuantizerSpec& spec);

// Elementwise quantize_value; shape preserved.
Tensor quantize_tensor(const Tensor& w, const QuantizerSpec& spec);

struct FixedPointCode {
  std::uint8_t sign = 0;       // 0 positive, 1 negative; always 0 when mantissa is 0
  std::uint32_t mantissa = 0;  // magnitude of the level index
  int exponent = 0;            // f

  bool operator==(const FixedPointCode&) const = default;
};

// Exact level -> code. Throws if the value is off the grid or its index
// overflows the mantissa range for spec.bits.
FixedPointCode encode(double grid_value, const QuantizerSpec& spec);

// (-1)^sign * mantissa * 2^(-exponent), exactly.
double decode(const FixedPointCode& code);

}  // namespace sgm
