#pragma once

// Training orchestration: float pretraining, step-exponent search, SGM
// fine-tuning with per-epoch lambda and learning-rate ramps, hard
// post-quantization, and evaluation. Runs are single-threaded and
// deterministic: a (seed, config, data) triple fixes every parameter bit.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sgm/data.hpp"
#include "sgm/nn.hpp"
#include "sgm/regularizer.hpp"
#include "sgm/telemetry.hpp"

namespace sgm {

inline constexpr int kHistogramBins = 80;
inline constexpr std::size_t kEvalBatch = 256;

struct TrainConfig {
  int bits = 2;
  int epochs = 1;
  int batch_size = 64;
  double lr_start = 0.01;
  double lr_end = 0.001;   // lr_start >= lr_end > 0
  double lambda_start = 0.0;
  double lambda_end = 0.0;
  std::uint64_t seed = 1;
  int f_min = -8;
  int f_max = 8;

  // Baseline runs may use zero epochs (evaluate the initialization as-is).
  void validate(bool allow_zero_epochs = false) const;

  LambdaSchedule lambda_schedule() const { return {lambda_start, lambda_end, epochs}; }
};

// Linear per-epoch learning-rate ramp; exact at both endpoints.
double lr_at(const TrainConfig& config, int epoch);

struct EpochMetrics {
  int epoch = 0;
  double eta = 0.0;
  double lambda = 0.0;
  double train_loss = 0.0;  // sample-weighted mean batch loss over the epoch
  double test_error = 0.0;
  std::vector<double> layer_residuals;  // sum (w - q(w))^2 per trainable layer;
                                        // empty for baseline runs
};

// In-memory checkpoint record: the trained network plus everything needed to
// resume, diagnose, or export the run.
struct TrainResult {
  Network net;
  std::vector<LayerQuantState> states;      // empty for float baselines
  std::vector<EpochMetrics> metrics;        // this run's epochs only
  std::vector<ModeSnapshot> snapshots;      // one per epoch (SGM runs)
  std::vector<HistogramRecord> histograms;  // per epoch x trainable layer (SGM runs)
  int epochs_completed = 0;
  double lambda_now = 0.0;
  double eta_now = 0.0;
  double train_loss = 0.0;    // final epoch's mean
  double initial_loss = 0.0;  // first epoch's mean; divergence-guard baseline
  int high_streak = 0;        // consecutive epochs with loss > 10x initial
  double test_error = 0.0;
};

// Fraction of argmax-misclassified samples, evaluated in dataset order with
// fixed-size chunks. layer_scales is the integer-inference hook (see
// export.hpp); leave it empty for ordinary float evaluation.
double evaluate(const Network& net, const Dataset& ds, std::size_t eval_batch = kEvalBatch,
                std::span<const double> layer_scales = {});

// One step-exponent search per trainable layer, on the current weights.
// Throws on a degenerate (all-zero) layer.
std::vector<LayerQuantState> search_layer_specs(const Network& net, int bits, int f_min,
                                                int f_max);

// Plain SGD with the regularizer disabled; config.lambda_* must be zero.
// Per epoch: shuffled batches, forward/backward, sgd_step, test evaluation.
// Throws DivergenceError if the loss turns non-finite or stays above 10x the
// first epoch's loss for 3 consecutive epochs.
TrainResult train_float_baseline(const TrainConfig& config, const Dataset& train,
                                 const Dataset& test, Network init);

// Continuation point for an interrupted SGM run; epochs [0, start_epoch) are
// assumed done. Resume at an epoch boundary reproduces the uninterrupted run
// bit-for-bit because batch order derives from (seed, epoch) alone.
struct SgmResume {
  int start_epoch = 0;
  std::vector<LayerQuantState> states;
  double initial_loss = 0.0;
  int high_streak = 0;
};

// The paper protocol: resolve step exponents on the initial weights, then per
// step combine task gradients with the regularizer pull (skipped entirely
// while lambda is exactly 0, so a zero schedule is bit-identical to plain
// SGD). Records per-epoch metrics, mode snapshots, and weight histograms.
//
// stop_epoch (default: config.epochs) ends the run early after that many
// total epochs, yielding a resumable partial result; running [0,k) and then
// resuming [k,E) reproduces the uninterrupted run bit-for-bit.
TrainResult train_sgm(const TrainConfig& config, const Dataset& train, const Dataset& test,
                      Network init, const SgmResume* resume = nullptr, int stop_epoch = -1);

// Replaces every trainable weight by its nearest quantization level; biases
// are untouched. specs must cover every trainable layer.
void hard_quantize(Network& net, std::span<const LayerQuantState> states);

// Fixed-schema metrics CSV: epoch,eta,lambda,train_loss,test_error, then one
// resid_<layer> column per entry of residual_names (none for baselines).
void write_metrics_csv(const std::string& path, std::span<const EpochMetrics> metrics,
                       std::span<const std::string> residual_names);

}  // namespace sgm
