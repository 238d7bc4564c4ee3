#include "sgm/export.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "binary_io.hpp"
#include "sgm/errors.hpp"
#include "sgm/fixed_point.hpp"
#include "sgm/trainer.hpp"

namespace sgm {
namespace {

constexpr char kMagic[4] = {'S', 'G', 'M', 'Q'};
constexpr std::uint16_t kVersion = 1;

const LayerQuantState& state_for(std::span<const LayerQuantState> states, const Layer& layer) {
  for (const LayerQuantState& st : states) {
    if (st.layer_id == layer.layer_id) return st;
  }
  throw std::invalid_argument("no quantizer spec for layer " + layer.name);
}

float narrow_or_throw(double v, const std::string& where) {
  const auto f = static_cast<float>(v);
  if (static_cast<double>(f) != v) {
    throw std::invalid_argument(where + " is not f32-representable; run narrow_biases first");
  }
  return f;
}

LayerKind to_layer_kind(std::uint8_t tag) {
  switch (tag) {
    case 1: return LayerKind::kCenter;
    case 2: return LayerKind::kConv2d;
    case 3: return LayerKind::kMaxPool;
    case 4: return LayerKind::kRelu;
    case 5: return LayerKind::kFlatten;
    case 6: return LayerKind::kLinear;
    default: throw DataError("model: unknown layer kind tag " + std::to_string(tag));
  }
}

std::size_t shape_product(const std::vector<std::size_t>& dims, std::size_t count) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < count; ++i) n *= dims[i];
  return n;
}

void validate_quantized_layer(const QuantizedLayer& l) {
  switch (l.kind) {
    case LayerKind::kConv2d:
    case LayerKind::kLinear: {
      const std::size_t rank = l.kind == LayerKind::kConv2d ? 4u : 2u;
      if (l.weight_shape.size() != rank) {
        throw DataError("model: layer " + l.name + " has rank " +
                        std::to_string(l.weight_shape.size()) + ", want " + std::to_string(rank));
      }
      if (l.bits < kMinBits || l.bits > 8) {
        throw DataError("model: layer " + l.name + " has bits " + std::to_string(l.bits) +
                        " outside [2, 8]");
      }
      if (l.exponent < kMinExponent || l.exponent > kMaxExponent) {
        throw DataError("model: layer " + l.name + " exponent out of range");
      }
      const std::size_t want = shape_product(l.weight_shape, l.weight_shape.size());
      if (l.mantissas.size() != want) {
        throw DataError("model: layer " + l.name + " has " + std::to_string(l.mantissas.size()) +
                        " mantissas, shape wants " + std::to_string(want));
      }
      const long bound = (1L << (l.bits - 1)) - 1;
      for (std::size_t i = 0; i < l.mantissas.size(); ++i) {
        if (l.mantissas[i] > bound || l.mantissas[i] < -bound) {
          throw DataError("model: layer " + l.name + " mantissa " +
                          std::to_string(int(l.mantissas[i])) + " at index " + std::to_string(i) +
                          " exceeds bound " + std::to_string(bound));
        }
      }
      const std::size_t out = l.weight_shape[0];
      if (l.biases.size() != out) {
        throw DataError("model: layer " + l.name + " has " + std::to_string(l.biases.size()) +
                        " biases, want " + std::to_string(out));
      }
      if (l.kind == LayerKind::kConv2d && (l.stride < 1 || l.pad < 0)) {
        throw DataError("model: layer " + l.name + " has invalid stride/pad");
      }
      break;
    }
    case LayerKind::kMaxPool:
      if (l.window < 1 || l.stride < 1) {
        throw DataError("model: maxpool layer " + l.name + " has invalid window/stride");
      }
      if (!l.mantissas.empty() || !l.biases.empty() || l.bits != 0) {
        throw DataError("model: maxpool layer " + l.name + " carries unexpected payload");
      }
      break;
    case LayerKind::kCenter:
      if (l.biases.size() != 1) {
        throw DataError("model: center layer " + l.name + " must have exactly 1 bias");
      }
      if (!l.mantissas.empty() || l.bits != 0) {
        throw DataError("model: center layer " + l.name + " carries unexpected payload");
      }
      break;
    case LayerKind::kRelu:
    case LayerKind::kFlatten:
      if (!l.mantissas.empty() || !l.biases.empty() || l.bits != 0) {
        throw DataError("model: layer " + l.name + " carries unexpected payload");
      }
      break;
  }
  for (float b : l.biases) {
    if (!std::isfinite(b)) throw DataError("model: non-finite bias in layer " + l.name);
  }
}

}  // namespace

void narrow_biases(Network& net) {
  for (Layer& layer : net.layers) {
    for (double& b : layer.bias.v) {
      b = static_cast<double>(static_cast<float>(b));
    }
  }
}

QuantizedModel quantize_model(const Network& net, std::span<const LayerQuantState> states) {
  QuantizedModel model;
  for (const Layer& layer : net.layers) {
    QuantizedLayer out;
    out.kind = layer.kind;
    out.name = layer.name;
    out.stride = layer.stride;
    out.pad = layer.pad;
    out.window = layer.window;
    if (layer.trainable()) {
      const LayerQuantState& st = state_for(states, layer);
      st.spec.validate();
      if (st.spec.bits > 8) {
        throw std::invalid_argument("SGMQ v1 stores one mantissa per signed byte; bits " +
                                    std::to_string(st.spec.bits) + " in layer " + layer.name +
                                    " exceeds 8");
      }
      out.bits = st.spec.bits;
      out.exponent = st.spec.exponent;
      out.weight_shape = layer.weight.shape;
      out.mantissas.reserve(layer.weight.size());
      for (std::size_t i = 0; i < layer.weight.size(); ++i) {
        FixedPointCode code;
        try {
          code = encode(layer.weight.v[i], st.spec);
        } catch (const std::invalid_argument& e) {
          throw std::invalid_argument("layer " + layer.name + " weight at index " +
                                      std::to_string(i) + ": " + e.what() +
                                      " (run hard_quantize first)");
        }
        const long m = code.sign ? -static_cast<long>(code.mantissa)
                                 : static_cast<long>(code.mantissa);
        out.mantissas.push_back(static_cast<std::int8_t>(m));
      }
    }
    out.biases.reserve(layer.bias.size());
    for (std::size_t i = 0; i < layer.bias.size(); ++i) {
      out.biases.push_back(
          narrow_or_throw(layer.bias.v[i], "layer " + layer.name + " bias " + std::to_string(i)));
    }
    validate_quantized_layer(out);
    model.layers.push_back(std::move(out));
  }
  return model;
}

std::vector<std::uint8_t> sgmq_bytes(const QuantizedModel& model) {
  io::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kVersion);
  if (model.layers.size() > 0xffff) throw std::invalid_argument("too many layers for SGMQ");
  w.u16(static_cast<std::uint16_t>(model.layers.size()));
  for (const QuantizedLayer& l : model.layers) {
    try {
      validate_quantized_layer(l);
    } catch (const DataError& e) {
      // In-memory models come from callers, not files: report a contract
      // violation rather than a data error.
      throw std::invalid_argument(e.what());
    }
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.str16(l.name);
    std::vector<std::uint32_t> dims;
    switch (l.kind) {
      case LayerKind::kConv2d:
        for (std::size_t d : l.weight_shape) dims.push_back(static_cast<std::uint32_t>(d));
        dims.push_back(static_cast<std::uint32_t>(l.stride));
        dims.push_back(static_cast<std::uint32_t>(l.pad));
        break;
      case LayerKind::kLinear:
        for (std::size_t d : l.weight_shape) dims.push_back(static_cast<std::uint32_t>(d));
        break;
      case LayerKind::kMaxPool:
        dims.push_back(static_cast<std::uint32_t>(l.window));
        dims.push_back(static_cast<std::uint32_t>(l.stride));
        break;
      default:
        break;
    }
    w.u8(static_cast<std::uint8_t>(dims.size()));
    for (std::uint32_t d : dims) w.u32(d);
    w.u8(static_cast<std::uint8_t>(l.bits));
    w.i16(static_cast<std::int16_t>(l.exponent));
    for (std::int8_t m : l.mantissas) w.i8(m);
    w.u32(static_cast<std::uint32_t>(l.biases.size()));
    for (float b : l.biases) w.f32(b);
  }
  w.crc_trailer();
  return std::move(w.buf);
}

QuantizedModel parse_sgmq(std::span<const std::uint8_t> bytes) {
  const auto payload = io::checked_payload(bytes, "model");
  io::ByteReader r(payload, "model");

  const std::uint8_t* magic = r.take(4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("model: bad magic");
  const std::uint16_t version = r.u16();
  if (version != kVersion) {
    throw DataError("model: unsupported version " + std::to_string(version));
  }

  QuantizedModel model;
  const std::uint16_t n_layers = r.u16();
  model.layers.reserve(n_layers);
  for (std::uint16_t i = 0; i < n_layers; ++i) {
    QuantizedLayer l;
    l.kind = to_layer_kind(r.u8());
    l.name = r.str16();
    const std::uint8_t rank = r.u8();
    std::vector<std::uint32_t> dims(rank);
    for (auto& d : dims) d = r.u32();
    switch (l.kind) {
      case LayerKind::kConv2d:
        if (rank != 6) throw DataError("model: conv2d layer " + l.name + " needs rank 6 dims");
        l.weight_shape = {dims[0], dims[1], dims[2], dims[3]};
        l.stride = static_cast<int>(dims[4]);
        l.pad = static_cast<int>(dims[5]);
        break;
      case LayerKind::kLinear:
        if (rank != 2) throw DataError("model: linear layer " + l.name + " needs rank 2 dims");
        l.weight_shape = {dims[0], dims[1]};
        break;
      case LayerKind::kMaxPool:
        if (rank != 2) throw DataError("model: maxpool layer " + l.name + " needs rank 2 dims");
        l.window = static_cast<int>(dims[0]);
        l.stride = static_cast<int>(dims[1]);
        break;
      default:
        if (rank != 0) {
          throw DataError("model: layer " + l.name + " of kind " + layer_kind_name(l.kind) +
                          " must have rank 0");
        }
        break;
    }
    l.bits = r.u8();
    l.exponent = r.i16();
    std::size_t n_mantissas = 0;
    if (l.kind == LayerKind::kConv2d || l.kind == LayerKind::kLinear) {
      n_mantissas = shape_product(l.weight_shape, l.weight_shape.size());
    }
    l.mantissas.resize(n_mantissas);
    for (auto& m : l.mantissas) m = r.i8();
    const std::uint32_t n_biases = r.u32();
    l.biases.resize(n_biases);
    for (auto& b : l.biases) b = r.f32();
    validate_quantized_layer(l);
    model.layers.push_back(std::move(l));
  }
  r.expect_exhausted();
  return model;
}

void export_model(const Network& net, std::span<const LayerQuantState> states,
                  const std::string& path) {
  io::write_file(path, sgmq_bytes(quantize_model(net, states)));
}

QuantizedModel import_model(const std::string& path) {
  return parse_sgmq(read_file_bytes(path));
}

namespace {

Layer layer_skeleton(const QuantizedLayer& src) {
  Layer l;
  l.kind = src.kind;
  l.name = src.name;
  l.stride = src.stride;
  l.pad = src.pad;
  l.window = src.window;
  if (!src.biases.empty()) {
    l.bias = Tensor({src.biases.size()});
    for (std::size_t i = 0; i < src.biases.size(); ++i) {
      l.bias.v[i] = static_cast<double>(src.biases[i]);
    }
  }
  return l;
}

}  // namespace

Network decode_network(const QuantizedModel& model) {
  Network net;
  int next_id = 0;
  for (const QuantizedLayer& src : model.layers) {
    Layer l = layer_skeleton(src);
    if (src.kind == LayerKind::kConv2d || src.kind == LayerKind::kLinear) {
      l.layer_id = ++next_id;
      l.weight = Tensor(src.weight_shape);
      for (std::size_t i = 0; i < src.mantissas.size(); ++i) {
        l.weight.v[i] = std::ldexp(static_cast<double>(src.mantissas[i]), -src.exponent);
      }
    }
    net.layers.push_back(std::move(l));
  }
  return net;
}

IntegerNetwork integer_network(const QuantizedModel& model) {
  IntegerNetwork out;
  int next_id = 0;
  for (const QuantizedLayer& src : model.layers) {
    Layer l = layer_skeleton(src);
    double scale = 1.0;
    if (src.kind == LayerKind::kConv2d || src.kind == LayerKind::kLinear) {
      l.layer_id = ++next_id;
      l.weight = Tensor(src.weight_shape);
      for (std::size_t i = 0; i < src.mantissas.size(); ++i) {
        l.weight.v[i] = static_cast<double>(src.mantissas[i]);
      }
      scale = std::ldexp(1.0, -src.exponent);  // 2^(-f), exact
    }
    out.net.layers.push_back(std::move(l));
    out.scales.push_back(scale);
  }
  return out;
}

Tensor integer_forward(const QuantizedModel& model, const Tensor& input) {
  const IntegerNetwork in = integer_network(model);
  return forward(in.net, input, nullptr, in.scales);
}

EquivalenceReport verify_equivalence(const QuantizedModel& model, const Network& reference,
                                     const Dataset& sample, std::size_t eval_batch) {
  if (model.layers.size() != reference.layers.size()) {
    throw std::invalid_argument("architecture mismatch: " + std::to_string(model.layers.size()) +
                                " model layers vs " + std::to_string(reference.layers.size()) +
                                " reference layers");
  }
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const QuantizedLayer& m = model.layers[i];
    const Layer& ref = reference.layers[i];
    if (m.kind != ref.kind || m.weight_shape != ref.weight.shape ||
        m.biases.size() != ref.bias.size()) {
      throw std::invalid_argument("architecture mismatch at layer " + std::to_string(i) + " (" +
                                  m.name + " vs " + ref.name + ")");
    }
  }
  if (sample.size() == 0) throw std::invalid_argument("verify_equivalence: empty sample");

  const IntegerNetwork in = integer_network(model);
  const std::size_t rows = sample.images.shape[2], cols = sample.images.shape[3];
  const std::size_t px = rows * cols;
  EquivalenceReport report;
  report.samples = sample.size();
  std::size_t agree = 0;
  Tensor chunk;
  for (std::size_t start = 0; start < sample.size(); start += eval_batch) {
    const std::size_t k = std::min(eval_batch, sample.size() - start);
    chunk.shape = {k, 1, rows, cols};
    chunk.v.resize(k * px);
    std::memcpy(chunk.data(), sample.images.data() + start * px, k * px * sizeof(double));
    const Tensor li = forward(in.net, chunk, nullptr, in.scales);
    const Tensor lr = forward(reference, chunk);
    const std::size_t classes = li.shape[1];
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t best_i = 0, best_r = 0;
      for (std::size_t c = 0; c < classes; ++c) {
        const double d = std::fabs(li.v[i * classes + c] - lr.v[i * classes + c]);
        if (d > report.max_abs_logit_deviation) report.max_abs_logit_deviation = d;
        if (li.v[i * classes + c] > li.v[i * classes + best_i]) best_i = c;
        if (lr.v[i * classes + c] > lr.v[i * classes + best_r]) best_r = c;
      }
      if (best_i == best_r) ++agree;
    }
  }
  report.agreement = static_cast<double>(agree) / static_cast<double>(report.samples);
  return report;
}

double evaluate_quantized(const QuantizedModel& model, const Dataset& ds,
                          std::size_t eval_batch) {
  const IntegerNetwork in = integer_network(model);
  return evaluate(in.net, ds, eval_batch, in.scales);
}

}  // namespace sgm
