#pragma once

// SGMC checkpoint files: full-precision network snapshots plus run state,
// CRC-protected and free of timestamps, so identical runs produce identical
// bytes. Binary layout (all integers little-endian):
//
//   "SGMC"  magic
//   u16     version (1)
//   u8      phase (0 float, 1 sgm, 2 quantized)
//   config  bits u8, epochs u32, batch u32, lr_start/lr_end f64,
//           lambda_start/lambda_end f64, seed u64, f_min/f_max i16
//   state   epochs_completed u32, lambda_now/eta_now/train_loss/
//           initial_loss f64, high_streak u8, test_error f64
//   net     layer count u16; per layer: kind u8, name u16+bytes,
//           layer_id i32, stride/pad/window i32, weight rank u8 + dims u32
//           + values f64, bias likewise
//   specs   count u16; per spec: layer_id i32, bits u8, exponent i16,
//           weight_count u64
//   u32     CRC32 of everything above

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sgm/nn.hpp"
#include "sgm/regularizer.hpp"
#include "sgm/trainer.hpp"

namespace sgm {

enum class TrainPhase : std::uint8_t {
  kFloat = 0,      // float baseline, no quantizer state
  kSgm = 1,        // soft-quantized weights plus frozen step exponents
  kQuantized = 2,  // hard-quantized weights, biases narrowed to f32
};

const char* train_phase_name(TrainPhase phase);

struct Checkpoint {
  TrainPhase phase = TrainPhase::kFloat;
  TrainConfig config;
  int epochs_completed = 0;
  double lambda_now = 0.0;
  double eta_now = 0.0;
  double train_loss = 0.0;
  double initial_loss = 0.0;
  int high_streak = 0;
  double test_error = 0.0;
  Network net;
  std::vector<LayerQuantState> states;  // empty in float phase
};

Checkpoint make_checkpoint(TrainPhase phase, const TrainConfig& config,
                           const TrainResult& result);

std::vector<std::uint8_t> checkpoint_bytes(const Checkpoint& ckpt);
Checkpoint parse_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sgm
