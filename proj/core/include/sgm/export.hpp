#pragma once

// Quantized-model serialization (SGMQ) and the integer-mantissa forward pass.
//
// SGMQ v1 layout (integers little-endian): magic "SGMQ"; version u16 = 1;
// layer count u16; per layer: kind tag u8, name length u16 + UTF-8 name,
// rank u8 + dims u32 each, bits u8, exponent i16, mantissas as signed bytes
// in row-major order, bias count u32 + biases f32; CRC32 trailer over all
// preceding bytes.
//
// Kind-specific dims and payload sizes:
//   conv2d   rank 6 [F, C, kh, kw, stride, pad]; F*C*kh*kw mantissas; F biases
//   linear   rank 2 [out, in]; out*in mantissas; out biases
//   maxpool  rank 2 [window, stride]; bits 0; no mantissas or biases
//   center   rank 0; bits 0; 1 bias (the input offset)
//   relu, flatten  rank 0; bits 0; no payload
//
// Biases are stored as f32, so a network must have f32-representable biases
// before export (narrow_biases). Mantissas in one signed byte bound the
// format to bits <= 8.
//
// The integer forward pass accumulates (mantissa x activation) per layer and
// applies one 2^(-f) scale before the bias add. Because that scale is an
// exact power of two applied at a fixed point in the computation, the result
// is bit-identical to the float forward pass over the decoded weights.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sgm/data.hpp"
#include "sgm/nn.hpp"
#include "sgm/regularizer.hpp"

namespace sgm {

struct QuantizedLayer {
  LayerKind kind = LayerKind::kRelu;
  std::string name;
  int stride = 1;
  int pad = 0;
  int window = 0;
  int bits = 0;      // 0 for layers without weights
  int exponent = 0;  // f; weight = mantissa * 2^(-f)
  std::vector<std::size_t> weight_shape;  // empty for layers without weights
  std::vector<std::int8_t> mantissas;     // row-major, one per weight
  std::vector<float> biases;

  bool operator==(const QuantizedLayer&) const = default;
};

struct QuantizedModel {
  std::vector<QuantizedLayer> layers;

  bool operator==(const QuantizedModel&) const = default;
};

// Rounds every bias (and the centering offset) to the nearest f32, stored
// back as a double, making the network exportable without precision loss.
void narrow_biases(Network& net);

// Network -> QuantizedModel. Refuses off-grid weights (run hard_quantize
// first), biases that do not round-trip through f32 (run narrow_biases), and
// bit widths above 8.
QuantizedModel quantize_model(const Network& net, std::span<const LayerQuantState> states);

std::vector<std::uint8_t> sgmq_bytes(const QuantizedModel& model);
QuantizedModel parse_sgmq(std::span<const std::uint8_t> bytes);

void export_model(const Network& net, std::span<const LayerQuantState> states,
                  const std::string& path);
QuantizedModel import_model(const std::string& path);

// Float network with weights mantissa * 2^(-f); inverse of quantize_model.
Network decode_network(const QuantizedModel& model);

// Materialized integer inference state: weights hold the raw mantissas as
// doubles, and scales[i] = 2^(-f) is applied post-accumulation in layer i.
struct IntegerNetwork {
  Network net;
  std::vector<double> scales;
};

IntegerNetwork integer_network(const QuantizedModel& model);

// One batch through the integer path.
Tensor integer_forward(const QuantizedModel& model, const Tensor& input);

struct EquivalenceReport {
  double max_abs_logit_deviation = 0.0;
  double agreement = 0.0;  // fraction of samples with matching argmax
  std::size_t samples = 0;

  bool exact() const { return max_abs_logit_deviation == 0.0 && agreement == 1.0; }
};

// Runs the integer path and the reference float network over the sample and
// compares logits elementwise. Throws on architecture mismatch.
EquivalenceReport verify_equivalence(const QuantizedModel& model, const Network& reference,
                                     const Dataset& sample, std::size_t eval_batch = 256);

// Test error of the integer path over a dataset.
double evaluate_quantized(const QuantizedModel& model, const Dataset& ds,
                          std::size_t eval_batch = 256);

}  // namespace sgm
