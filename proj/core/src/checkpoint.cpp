#include "sgm/checkpoint.hpp"

#include <cmath>
#include <cstring>

#include "binary_io.hpp"
#include "sgm/data.hpp"
#include "sgm/errors.hpp"
#include "sgm/fixed_point.hpp"

namespace sgm {
namespace {

constexpr char kMagic[4] = {'S', 'G', 'M', 'C'};
constexpr std::uint16_t kVersion = 1;

void write_tensor(io::ByteWriter& w, const Tensor& t) {
  if (t.shape.size() > 0xff) throw std::invalid_argument("tensor rank too large for checkpoint");
  w.u8(static_cast<std::uint8_t>(t.shape.size()));
  for (std::size_t d : t.shape) w.u32(static_cast<std::uint32_t>(d));
  for (double v : t.v) w.f64(v);
}

Tensor read_tensor(io::ByteReader& r) {
  const std::uint8_t rank = r.u8();
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = r.u32();
  const std::size_t count = Tensor::element_count(shape);
  std::vector<double> values(count);
  for (auto& v : values) v = r.f64();
  return Tensor(std::move(shape), std::move(values));
}

LayerKind to_layer_kind(std::uint8_t tag) {
  switch (tag) {
    case 1: return LayerKind::kCenter;
    case 2: return LayerKind::kConv2d;
    case 3: return LayerKind::kMaxPool;
    case 4: return LayerKind::kRelu;
    case 5: return LayerKind::kFlatten;
    case 6: return LayerKind::kLinear;
    default: throw DataError("checkpoint: unknown layer kind tag " + std::to_string(tag));
  }
}

}  // namespace

const char* train_phase_name(TrainPhase phase) {
  switch (phase) {
    case TrainPhase::kFloat: return "float";
    case TrainPhase::kSgm: return "sgm";
    case TrainPhase::kQuantized: return "quantized";
  }
  return "unknown";
}

Checkpoint make_checkpoint(TrainPhase phase, const TrainConfig& config,
                           const TrainResult& result) {
  Checkpoint ckpt;
  ckpt.phase = phase;
  ckpt.config = config;
  ckpt.epochs_completed = result.epochs_completed;
  ckpt.lambda_now = result.lambda_now;
  ckpt.eta_now = result.eta_now;
  ckpt.train_loss = result.train_loss;
  ckpt.initial_loss = result.initial_loss;
  ckpt.high_streak = result.high_streak;
  ckpt.test_error = result.test_error;
  ckpt.net = result.net;
  ckpt.states = result.states;
  return ckpt;
}

std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ckpt) {
  io::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u16(kVersion);
  w.u8(static_cast<std::uint8_t>(ckpt.phase));

  const TrainConfig& c = ckpt.config;
  w.u8(static_cast<std::uint8_t>(c.bits));
  w.u32(static_cast<std::uint32_t>(c.epochs));
  w.u32(static_cast<std::uint32_t>(c.batch_size));
  w.f64(c.lr_start);
  w.f64(c.lr_end);
  w.f64(c.lambda_start);
  w.f64(c.lambda_end);
  w.u64(c.seed);
  w.i16(static_cast<std::int16_t>(c.f_min));
  w.i16(static_cast<std::int16_t>(c.f_max));

  w.u32(static_cast<std::uint32_t>(ckpt.epochs_completed));
  w.f64(ckpt.lambda_now);
  w.f64(ckpt.eta_now);
  w.f64(ckpt.train_loss);
  w.f64(ckpt.initial_loss);
  w.u8(static_cast<std::uint8_t>(ckpt.high_streak));
  w.f64(ckpt.test_error);

  if (ckpt.net.layers.size() > 0xffff) throw std::invalid_argument("too many layers");
  w.u16(static_cast<std::uint16_t>(ckpt.net.layers.size()));
  for (const Layer& l : ckpt.net.layers) {
    w.u8(static_cast<std::uint8_t>(l.kind));
    w.str16(l.name);
    w.i32(l.layer_id);
    w.i32(l.stride);
    w.i32(l.pad);
    w.i32(l.window);
    write_tensor(w, l.weight);
    write_tensor(w, l.bias);
  }

  if (ckpt.states.size() > 0xffff) throw std::invalid_argument("too many quantizer states");
  w.u16(static_cast<std::uint16_t>(ckpt.states.size()));
  for (const LayerQuantState& st : ckpt.states) {
    w.i32(st.layer_id);
    w.u8(static_cast<std::uint8_t>(st.spec.bits));
    w.i16(static_cast<std::int16_t>(st.spec.exponent));
    w.u64(st.weight_count);
  }

  w.crc_trailer();
  return std::move(w.buf);
}

Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes) {
  const auto payload = io::checked_payload(bytes, "checkpoint");
  io::ByteReader r(payload, "checkpoint");

  const std::uint8_t* magic = r.take(4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw DataError("checkpoint: bad magic");
  const std::uint16_t version = r.u16();
  if (version != kVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }

  Checkpoint ckpt;
  const std::uint8_t phase = r.u8();
  if (phase > 2) throw DataError("checkpoint: unknown phase " + std::to_string(phase));
  ckpt.phase = static_cast<TrainPhase>(phase);

  TrainConfig& c = ckpt.config;
  c.bits = r.u8();
  c.epochs = static_cast<int>(r.u32());
  c.batch_size = static_cast<int>(r.u32());
  c.lr_start = r.f64();
  c.lr_end = r.f64();
  c.lambda_start = r.f64();
  c.lambda_end = r.f64();
  c.seed = r.u64();
  c.f_min = r.i16();
  c.f_max = r.i16();
  try {
    c.validate(/*allow_zero_epochs=*/true);
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("checkpoint: invalid config: ") + e.what());
  }

  ckpt.epochs_completed = static_cast<int>(r.u32());
  ckpt.lambda_now = r.f64();
  ckpt.eta_now = r.f64();
  ckpt.train_loss = r.f64();
  ckpt.initial_loss = r.f64();
  ckpt.high_streak = r.u8();
  ckpt.test_error = r.f64();

  const std::uint16_t n_layers = r.u16();
  ckpt.net.layers.reserve(n_layers);
  for (std::uint16_t i = 0; i < n_layers; ++i) {
    Layer l;
    l.kind = to_layer_kind(r.u8());
    l.name = r.str16();
    l.layer_id = r.i32();
    l.stride = r.i32();
    l.pad = r.i32();
    l.window = r.i32();
    try {
      l.weight = read_tensor(r);
      l.bias = read_tensor(r);
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("checkpoint: bad tensor in layer ") + l.name + ": " + e.what());
    }
    for (double v : l.weight.v) {
      if (!std::isfinite(v)) throw DataError("checkpoint: non-finite weight in " + l.name);
    }
    for (double v : l.bias.v) {
      if (!std::isfinite(v)) throw DataError("checkpoint: non-finite bias in " + l.name);
    }
    ckpt.net.layers.push_back(std::move(l));
  }

  const std::uint16_t n_states = r.u16();
  for (std::uint16_t i = 0; i < n_states; ++i) {
    LayerQuantState st;
    st.layer_id = r.i32();
    st.spec.bits = r.u8();
    st.spec.exponent = r.i16();
    st.weight_count = r.u64();
    try {
      st.spec.validate();
    } catch (const std::invalid_argument& e) {
      throw DataError(std::string("checkpoint: invalid quantizer spec: ") + e.what());
    }
    const Layer* owner = nullptr;
    for (const Layer& l : ckpt.net.layers) {
      if (l.trainable() && l.layer_id == st.layer_id) owner = &l;
    }
    if (!owner) {
      throw DataError("checkpoint: quantizer spec for unknown layer id " +
                      std::to_string(st.layer_id));
    }
    if (owner->weight.size() != st.weight_count) {
      throw DataError("checkpoint: stale weight count for layer " + owner->name + " (" +
                      std::to_string(st.weight_count) + " recorded, " +
                      std::to_string(owner->weight.size()) + " actual)");
    }
    ckpt.states.push_back(st);
  }
  if (ckpt.phase != TrainPhase::kFloat && ckpt.states.empty()) {
    throw DataError("checkpoint: phase " + std::string(train_phase_name(ckpt.phase)) +
                    " requires quantizer states");
  }
  if (ckpt.phase == TrainPhase::kFloat && !ckpt.states.empty()) {
    throw DataError("checkpoint: float phase carries quantizer states");
  }

  r.expect_exhausted();
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  io::write_file(path, checkpoint_bytes(ckpt));
}

Checkpoint load_checkpoint(const std::string& path) {
  return parse_checkpoint(read_file_bytes(path));
}

}  // namespace sgm
