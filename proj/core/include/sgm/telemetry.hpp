#pragma once

// Mode-assignment tracking: which quantization level each weight currently
// rounds to, how often weights switch levels between epochs, and weight
// histograms around the level grid. Everything is observational; weights are
// never modified.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sgm/nn.hpp"
#include "sgm/regularizer.hpp"

namespace sgm {

struct ModeSnapshot {
  int epoch = 0;
  // Parallel per-trainable-layer arrays, in layer_id order.
  std::vector<int> layer_ids;
  std::vector<std::string> layer_names;
  std::vector<QuantizerSpec> specs;
  std::vector<std::vector<std::int8_t>> modes;  // per layer: level index per weight
};

// Records clip(round(w / step), -(2^(N-1)-1), 2^(N-1)-1) per weight.
// Requires bits <= 8 so indices fit the 8-bit storage.
ModeSnapshot snapshot_modes(const Network& net, std::span<const LayerQuantState> states,
                            int epoch);

// Fraction of weights of the given layer whose mode index differs between the
// two snapshots. Throws if the layer is missing from either snapshot or its
// spec/size disagree.
double switch_ratio(const ModeSnapshot& a, const ModeSnapshot& b, int layer_id);

struct HistogramRecord {
  int epoch = 0;
  int layer_id = 0;
  std::string layer_name;
  std::vector<double> edges;        // bins + 1 uniform edges
  std::vector<std::size_t> counts;  // one per bin; sums to the weight count
};

// Uniform-bin histogram of the layer's weights over
// [-2^(N-1) * step, +2^(N-1) * step]; out-of-range weights land in the
// extreme bins. bins must be >= 3 and the layer non-empty.
HistogramRecord weight_histogram(const Network& net, int layer_id, const QuantizerSpec& spec,
                                 int bins);

// Fraction of weights within tol of their nearest quantization level
// (|w - q(w)| <= tol). The mode-collapse check uses tol = step / 10.
double level_proximity_fraction(const Tensor& weights, const QuantizerSpec& spec, double tol);

// CSV emitters. Layers are named by their layer name in the file name and a
// `layer` column where applicable. Values use %.17g so reruns are
// byte-identical.
//
//   modes_<layer>.csv   epoch, mode_m<k>.. (count of weights per level index)
//   switches.csv        epoch_from, epoch_to, layer, ratio
//                       (all consecutive pairs plus all 10-epoch offsets)
//   hist_<layer>_<epoch>.csv  bin_left, bin_right, count
void write_modes_csv(const std::string& dir, std::span<const ModeSnapshot> history);
void write_switches_csv(const std::string& path, std::span<const ModeSnapshot> history);
void write_histogram_csv(const std::string& path, const HistogramRecord& hist);

}  // namespace sgm
