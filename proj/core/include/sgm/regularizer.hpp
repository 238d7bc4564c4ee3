#pragma once

// Quantization-residual regularizer. Each layer contributes
// sum_i lambda/(2 M) * (w_i - q(w_i))^2 with M the layer's weight count, so
// the gradient per weight is lambda/M * (w_i - q(w_i)): layers are rated
// equally regardless of size, and large layers get a gentler per-weight pull.
// The quantizer's derivative is taken as zero everywhere, including at the
// half-step boundaries where the true derivative spikes.

#include <cstddef>
#include <span>
#include <vector>

#include "sgm/fixed_point.hpp"
#include "sgm/tensor.hpp"

namespace sgm {

struct LayerQuantState {
  int layer_id = 0;              // 1-based position among parameterized layers
  QuantizerSpec spec;
  std::size_t weight_count = 0;  // M, always taken from the live tensor
};

struct LambdaSchedule {
  double lambda_start = 0.0;
  double lambda_end = 0.0;
  int total_epochs = 1;

  void validate() const;
};

// Linear per-epoch ramp; hits both endpoints exactly.
double lambda_at(const LambdaSchedule& schedule, int epoch);

double reg_loss(std::span<const Tensor> weights_by_layer,
                std::span<const LayerQuantState> states, double lambda);

std::vector<Tensor> reg_grad(std::span<const Tensor> weights_by_layer,
                             std::span<const LayerQuantState> states, double lambda);

struct StepSearchResult {
  QuantizerSpec spec;
  double residual = 0.0;   // sum of squared quantization residuals at spec
  bool degenerate = false; // all-zero layer: every exponent attains zero
};

// Picks the step exponent in [f_min, f_max] minimizing the layer's squared
// quantization residual; ties go to the larger exponent (finer grid).
StepSearchResult search_step_exponent(const Tensor& layer_weights, int bits,
                                      int f_min, int f_max);

}  // namespace sgm
