#include "sgm/fixed_point.hpp"

#include <cmath>
#include <string>

namespace sgm {

double step_size(const QuantizerSpec& spec) {
  spec.validate();
  return std::ldexp(1.0, -spec.exponent);
}

long mode_index(double x, const QuantizerSpec& spec) {
  spec.validate();
  if (!std::isfinite(x)) {
    throw std::invalid_argument("quantize: non-finite input");
  }
  const double inv_step = std::ldexp(1.0, spec.exponent);
  return detail::index_with(x, inv_step, static_cast<double>(spec.max_mantissa()));
}

double quantize_value(double x, const QuantizerSpec& spec) {
  spec.validate();
  if (!std::isfinite(x)) {
    throw std::invalid_argument("quantize: non-finite input");
  }
  const double step = std::ldexp(1.0, -spec.exponent);
  const double inv_step = std::ldexp(1.0, spec.exponent);
  return detail::quantize_with(x, step, inv_step, static_cast<double>(spec.max_mantissa()));
}

Tensor quantize_tensor(const Tensor& w, const QuantizerSpec& spec) {
  spec.validate();
  const double step = std::ldexp(1.0, -spec.exponent);
  const double inv_step = std::ldexp(1.0, spec.exponent);
  const double max_index = static_cast<double>(spec.max_mantissa());
  Tensor out(w.shape);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(w[i])) {
      throw std::invalid_argument("quantize: non-finite input at flat index " + std::to_string(i));
    }
    out[i] = detail::quantize_with(w[i], step, inv_step, max_index);
  }
  return out;
}

FixedPointCode encode(double grid_value, const QuantizerSpec& spec) {
  spec.validate();
  if (!std::isfinite(grid_value)) {
    throw std::invalid_argument("encode: non-finite input");
  }
  const double scaled = std::ldexp(grid_value, spec.exponent);
  const double k = std::nearbyint(scaled);
  if (k != scaled) {
    throw std::invalid_argument("encode: value " + std::to_string(grid_value) +
                                " is not on the 2^-" + std::to_string(spec.exponent) + " grid");
  }
  if (std::abs(k) > static_cast<double>(spec.max_mantissa())) {
    throw std::invalid_argument("encode: level index " + std::to_string(static_cast<long>(k)) +
                                " overflows " + std::to_string(spec.bits) + "-bit mantissa");
  }
  FixedPointCode code;
  code.sign = k < 0 ? 1 : 0;  // k == 0 keeps sign 0 (canonical zero)
  code.mantissa = static_cast<std::uint32_t>(std::abs(k));
  code.exponent = spec.exponent;
  return code;
}

double decode(const FixedPointCode& code) {
  if (code.exponent < kMinExponent || code.exponent > kMaxExponent) {
    throw std::invalid_argument("decode: exponent out of supported range");
  }
  if (code.mantissa == 0 && code.sign != 0) {
    throw std::invalid_argument("decode: negative zero code is not canonical");
  }
  const double magnitude = std::ldexp(static_cast<double>(code.mantissa), -code.exponent);
  return code.sign ? -magnitude : magnitude;
}

}  // namespace sgm
