#include "sgm/fixed_point.hpp"

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>

#include "doctest.h"

using namespace sgm;

namespace {

// Independent scalar reference for Eq.-style quantization, deliberately
// implemented differently from the library (extended precision, explicit
// floor-based half-away-from-zero rounding).
double ref_quantize(double x, int bits, int f) {
  const long double scaled = static_cast<long double>(x) * std::pow(2.0L, f);
  long double k = std::floor(std::fabs(scaled) + 0.5L);
  if (scaled < 0) k = -k;
  const auto bound = static_cast<long double>((1L << (bits - 1)) - 1);
  if (k > bound) k = bound;
  if (k < -bound) k = -bound;
  return static_cast<double>(k * std::pow(2.0L, -f));
}

}  // namespace

TEST_SUITE("fixed_point") {

TEST_CASE("step size formula") {
  CHECK(step_size({2, 0}) == 1.0);
  CHECK(step_size({2, 2}) == 0.25);
  CHECK(step_size({2, -1}) == 2.0);
  CHECK(step_size({8, 10}) == 1.0 / 1024.0);
}

TEST_CASE("spec validation") {
  CHECK_THROWS_AS(step_size({1, 0}), std::invalid_argument);
  CHECK_THROWS_AS(step_size({25, 0}), std::invalid_argument);
  CHECK_THROWS_AS(step_size({2, 61}), std::invalid_argument);
  CHECK_THROWS_AS(step_size({2, -61}), std::invalid_argument);
  CHECK_NOTHROW(step_size({24, 60}));
}

TEST_CASE("quantize examples") {
  CHECK(quantize_value(0.0, {2, 2}) == 0.0);
  // 3-bit quantizer with unit step clips at 2^2 - 1 = 3.
  CHECK(quantize_value(3.7, {3, 0}) == 3.0);
  CHECK(quantize_value(0.30, {2, 2}) == 0.25);
  CHECK(quantize_value(0.70, {2, 2}) == 0.25);  // clipped: max index 1
  CHECK(quantize_value(-0.05, {2, 2}) == 0.0);
}

TEST_CASE("quantize rejects non-finite input") {
  CHECK_THROWS_AS(quantize_value(std::numeric_limits<double>::quiet_NaN(), {2, 0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(quantize_value(std::numeric_limits<double>::infinity(), {2, 0}),
                  std::invalid_argument);
  Tensor t({3}, {0.0, std::numeric_limits<double>::infinity(), 1.0});
  CHECK_THROWS_AS(quantize_tensor(t, {2, 0}), std::invalid_argument);
}

TEST_CASE("quantize_tensor elementwise and idempotent") {
  Tensor zeros({3});
  Tensor qz = quantize_tensor(zeros, {2, 2});
  for (double v : qz.v) CHECK(v == 0.0);

  Tensor t({3}, {0.30, -0.05, 0.70});
  Tensor q = quantize_tensor(t, {2, 2});
  CHECK(q.v == std::vector<double>{0.25, 0.0, 0.25});
  CHECK(q.shape == t.shape);

  Tensor q2 = quantize_tensor(q, {2, 2});
  CHECK(q2.v == q.v);
}

TEST_CASE("scalar oracle agreement on random inputs") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> dist(-8.0, 8.0);
  for (int bits : {2, 3, 4, 8}) {
    for (int f : {-3, -1, 0, 1, 2, 5}) {
      const QuantizerSpec spec{bits, f};
      for (int i = 0; i < 20000; ++i) {
        const double x = dist(rng);
        CHECK(quantize_value(x, spec) == ref_quantize(x, bits, f));
      }
    }
  }
}

TEST_CASE("half-step ties round away from zero") {
  // With f = 1 the level spacing is 0.5 and half-steps sit at 0.25, 0.75, ...
  const QuantizerSpec spec{3, 1};
  CHECK(quantize_value(0.25, spec) == 0.5);
  CHECK(quantize_value(-0.25, spec) == -0.5);
  CHECK(quantize_value(0.75, spec) == 1.0);
  CHECK(quantize_value(-0.75, spec) == -1.0);
}

TEST_CASE("invariants: idempotence, odd symmetry, membership, bounded error") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> dist(-20.0, 20.0);
  for (int bits : {2, 3, 8}) {
    for (int f : {-2, 0, 3}) {
      const QuantizerSpec spec{bits, f};
      const double step = step_size(spec);
      const auto max_index = static_cast<double>(spec.max_mantissa());
      for (int i = 0; i < 5000; ++i) {
        const double x = dist(rng);
        const double q = quantize_value(x, spec);
        CHECK(quantize_value(q, spec) == q);
        CHECK(quantize_value(-x, spec) == -q);
        const double k = std::ldexp(q, spec.exponent);
        CHECK(k == std::nearbyint(k));
        CHECK(std::fabs(k) <= max_index);
        if (std::fabs(x) <= (max_index + 0.5) * step) {
          CHECK(std::fabs(q - x) <= step / 2.0);
        } else {
          CHECK(std::fabs(k) == max_index);
        }
      }
    }
  }
}

TEST_CASE("mode_index matches quantize_value") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-4.0, 4.0);
  const QuantizerSpec spec{2, 2};
  for (int i = 0; i < 1000; ++i) {
    const double x = dist(rng);
    CHECK(static_cast<double>(mode_index(x, spec)) * step_size(spec) ==
          quantize_value(x, spec));
  }
}

TEST_CASE("encode examples") {
  CHECK(encode(-0.75, {3, 2}) == FixedPointCode{1, 3, 2});
  CHECK(encode(0.0, {2, 5}) == FixedPointCode{0, 0, 5});
  CHECK(encode(0.5, {2, 1}) == FixedPointCode{0, 1, 1});
}

TEST_CASE("encode refuses off-grid and overflow") {
  CHECK_THROWS_AS(encode(0.30, {2, 2}), std::invalid_argument);
  // 0.75 = 3 * 2^-2 needs mantissa 3; N = 2 only allows 1.
  CHECK_THROWS_AS(encode(0.75, {2, 2}), std::invalid_argument);
  CHECK_THROWS_AS(encode(std::numeric_limits<double>::quiet_NaN(), {2, 2}),
                  std::invalid_argument);
}

TEST_CASE("decode examples and validation") {
  CHECK(decode({0, 0, 5}) == 0.0);
  CHECK(decode({1, 3, 2}) == -0.75);
  CHECK(decode({0, 1, -1}) == 2.0);
  CHECK_THROWS_AS(decode({1, 0, 0}), std::invalid_argument);   // negative zero
  CHECK_THROWS_AS(decode({0, 1, 61}), std::invalid_argument);  // exponent range
}

TEST_CASE("codec exactness over every level and exponent") {
  for (int bits : {2, 3, 4, 8}) {
    const QuantizerSpec probe{bits, 0};
    const long max_m = probe.max_mantissa();
    for (int f = -60; f <= 60; ++f) {
      const QuantizerSpec spec{bits, f};
      for (long k = -max_m; k <= max_m; ++k) {
        const double level = std::ldexp(static_cast<double>(k), -f);
        const FixedPointCode code = encode(level, spec);
        CHECK(decode(code) == level);
        CHECK(code.exponent == f);
        CHECK(static_cast<long>(code.mantissa) == std::labs(k));
        CHECK(code.sign == (k < 0 ? 1 : 0));
      }
    }
  }
}

TEST_CASE("quantized values are always encodable") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> dist(-100.0, 100.0);
  for (int bits : {2, 4}) {
    for (int f : {-8, 0, 8}) {
      const QuantizerSpec spec{bits, f};
      for (int i = 0; i < 2000; ++i) {
        const double q = quantize_value(dist(rng), spec);
        CHECK(decode(encode(q, spec)) == q);
      }
    }
  }
}

}  // TEST_SUITE
