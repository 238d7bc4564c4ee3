#include "sgm/regularizer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace sgm {
namespace {

void check_layers(std::span<const Tensor> weights, std::span<const LayerQuantState> states,
                  double lambda) {
  if (weights.size() != states.size()) {
    throw std::invalid_argument("regularizer: " + std::to_string(weights.size()) +
                                " weight tensors vs " + std::to_string(states.size()) +
                                " layer states");
  }
  if (!(lambda >= 0.0)) {
    throw std::invalid_argument("regularizer: lambda must be non-negative");
  }
  for (std::size_t l = 0; l < weights.size(); ++l) {
    states[l].spec.validate();
    if (states[l].weight_count != weights[l].size()) {
      throw std::invalid_argument("regularizer: layer " + std::to_string(states[l].layer_id) +
                                  " weight count is stale");
    }
  }
}

void check_finite(double w, int layer_id) {
  if (!std::isfinite(w)) {
    throw std::invalid_argument("regularizer: non-finite weight in layer " +
                                std::to_string(layer_id));
  }
}

}  // namespace

void LambdaSchedule::validate() const {
  if (!(lambda_start >= 0.0) || !(lambda_end >= 0.0)) {
    throw std::invalid_argument("lambda schedule: endpoints must be non-negative");
  }
  if (total_epochs < 1) {
    throw std::invalid_argument("lambda schedule: total_epochs must be positive");
  }
}

double lambda_at(const LambdaSchedule& schedule, int epoch) {
  schedule.validate();
  if (epoch < 0 || epoch >= schedule.total_epochs) {
    throw std::invalid_argument("lambda schedule: epoch " + std::to_string(epoch) +
                                " outside [0, " + std::to_string(schedule.total_epochs) + ")");
  }
  if (epoch == 0) return schedule.lambda_start;
  if (epoch == schedule.total_epochs - 1) return schedule.lambda_end;
  const double t = static_cast<double>(epoch) / static_cast<double>(schedule.total_epochs - 1);
  return schedule.lambda_start + (schedule.lambda_end - schedule.lambda_start) * t;
}

double reg_loss(std::span<const Tensor> weights_by_layer,
                std::span<const LayerQuantState> states, double lambda) {
  check_layers(weights_by_layer, states, lambda);
  double total = 0.0;
  for (std::size_t l = 0; l < weights_by_layer.size(); ++l) {
    const Tensor& w = weights_by_layer[l];
    const QuantizerSpec& spec = states[l].spec;
    const double step = std::ldexp(1.0, -spec.exponent);
    const double inv_step = std::ldexp(1.0, spec.exponent);
    const double max_index = static_cast<double>(spec.max_mantissa());
    double layer_sum = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      check_finite(w[i], states[l].layer_id);
      const double r = w[i] - detail::quantize_with(w[i], step, inv_step, max_index);
      layer_sum += r * r;
    }
    const double scale = lambda / (2.0 * static_cast<double>(states[l].weight_count));
    total += scale * layer_sum;
  }
  return total;
}

std::vector<Tensor> reg_grad(std::span<const Tensor> weights_by_layer,
                             std::span<const LayerQuantState> states, double lambda) {
  check_layers(weights_by_layer, states, lambda);
  std::vector<Tensor> grads;
  grads.reserve(weights_by_layer.size());
  for (std::size_t l = 0; l < weights_by_layer.size(); ++l) {
    const Tensor& w = weights_by_layer[l];
    const QuantizerSpec& spec = states[l].spec;
    const double step = std::ldexp(1.0, -spec.exponent);
    const double inv_step = std::ldexp(1.0, spec.exponent);
    const double max_index = static_cast<double>(spec.max_mantissa());
    const double scale = lambda / static_cast<double>(states[l].weight_count);
    Tensor g(w.shape);
    for (std::size_t i = 0; i < w.size(); ++i) {
      check_finite(w[i], states[l].layer_id);
      g[i] = scale * (w[i] - detail::quantize_with(w[i], step, inv_step, max_index));
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

StepSearchResult search_step_exponent(const Tensor& layer_weights, int bits,
                                      int f_min, int f_max) {
  QuantizerSpec{bits, f_min}.validate();
  QuantizerSpec{bits, f_max}.validate();
  if (f_min > f_max) {
    throw std::invalid_argument("step search: empty exponent range");
  }
  if (layer_weights.empty()) {
    throw std::invalid_argument("step search: empty layer");
  }

  bool all_zero = true;
  for (std::size_t i = 0; i < layer_weights.size(); ++i) {
    if (!std::isfinite(layer_weights[i])) {
      throw std::invalid_argument("step search: non-finite weight");
    }
    if (layer_weights[i] != 0.0) all_zero = false;
  }
  if (all_zero) {
    return StepSearchResult{QuantizerSpec{bits, f_max}, 0.0, true};
  }

  const double max_index = static_cast<double>(QuantizerSpec{bits, 0}.max_mantissa());
  bool have_best = false;
  StepSearchResult best;
  for (int f = f_min; f <= f_max; ++f) {
    const double step = std::ldexp(1.0, -f);
    const double inv_step = std::ldexp(1.0, f);
    double residual = 0.0;
    for (std::size_t i = 0; i < layer_weights.size(); ++i) {
      const double r =
          layer_weights[i] - detail::quantize_with(layer_weights[i], step, inv_step, max_index);
      residual += r * r;
    }
    // <= keeps the later (larger) exponent on exact ties.
    if (!have_best || residual <= best.residual) {
      best = StepSearchResult{QuantizerSpec{bits, f}, residual, false};
      have_best = true;
    }
  }
  return best;
}

}  // namespace sgm
