#include "sgm/telemetry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "sgm/fixed_point.hpp"

namespace sgm {
namespace {

const Layer& find_trainable(const Network& net, int layer_id) {
  for (const Layer& l : net.layers) {
    if (l.trainable() && l.layer_id == layer_id) return l;
  }
  throw std::invalid_argument("no trainable layer with id " + std::to_string(layer_id));
}

std::size_t find_snapshot_layer(const ModeSnapshot& s, int layer_id) {
  for (std::size_t i = 0; i < s.layer_ids.size(); ++i) {
    if (s.layer_ids[i] == layer_id) return i;
  }
  throw std::invalid_argument("snapshot at epoch " + std::to_string(s.epoch) +
                              " has no layer with id " + std::to_string(layer_id));
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::ofstream open_csv(const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  return out;
}

}  // namespace

ModeSnapshot snapshot_modes(const Network& net, std::span<const LayerQuantState> states,
                            int epoch) {
  ModeSnapshot snap;
  snap.epoch = epoch;
  for (const LayerQuantState& st : states) {
    st.spec.validate();
    if (st.spec.bits > 8) {
      throw std::invalid_argument("snapshot_modes: bits " + std::to_string(st.spec.bits) +
                                  " exceeds the 8-bit mode storage");
    }
    const Layer& layer = find_trainable(net, st.layer_id);
    if (layer.weight.size() != st.weight_count) {
      throw std::invalid_argument("snapshot_modes: stale weight count for layer " + layer.name);
    }
    const double inv_step = std::ldexp(1.0, st.spec.exponent);
    const auto max_index = static_cast<double>(st.spec.max_mantissa());
    std::vector<std::int8_t> modes(layer.weight.size());
    for (std::size_t i = 0; i < layer.weight.size(); ++i) {
      modes[i] =
          static_cast<std::int8_t>(detail::index_with(layer.weight.v[i], inv_step, max_index));
    }
    snap.layer_ids.push_back(st.layer_id);
    snap.layer_names.push_back(layer.name);
    snap.specs.push_back(st.spec);
    snap.modes.push_back(std::move(modes));
  }
  return snap;
}

double switch_ratio(const ModeSnapshot& a, const ModeSnapshot& b, int layer_id) {
  const std::size_t ia = find_snapshot_layer(a, layer_id);
  const std::size_t ib = find_snapshot_layer(b, layer_id);
  if (a.specs[ia] != b.specs[ib]) {
    throw std::invalid_argument("switch_ratio: quantizer specs differ for layer " +
                                std::to_string(layer_id));
  }
  const std::vector<std::int8_t>& ma = a.modes[ia];
  const std::vector<std::int8_t>& mb = b.modes[ib];
  if (ma.size() != mb.size()) {
    throw std::invalid_argument("switch_ratio: weight counts differ for layer " +
                                std::to_string(layer_id));
  }
  if (ma.empty()) throw std::invalid_argument("switch_ratio: empty layer");
  std::size_t diff = 0;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    if (ma[i] != mb[i]) ++diff;
  }
  return static_cast<double>(diff) / static_cast<double>(ma.size());
}

HistogramRecord weight_histogram(const Network& net, int layer_id, const QuantizerSpec& spec,
                                 int bins) {
  spec.validate();
  if (bins < 3) throw std::invalid_argument("weight_histogram: bins must be >= 3");
  const Layer& layer = find_trainable(net, layer_id);
  if (layer.weight.empty()) throw std::invalid_argument("weight_histogram: empty layer");

  const double step = step_size(spec);
  const double half_range = std::ldexp(step, spec.bits - 1);  // 2^(N-1) * step
  const double lo = -half_range;
  const double width = 2.0 * half_range;

  HistogramRecord rec;
  rec.epoch = 0;
  rec.layer_id = layer_id;
  rec.layer_name = layer.name;
  rec.edges.resize(bins + 1);
  for (int i = 0; i <= bins; ++i) {
    rec.edges[i] = lo + width * static_cast<double>(i) / static_cast<double>(bins);
  }
  rec.counts.assign(bins, 0);
  for (double w : layer.weight.v) {
    long b = static_cast<long>(std::floor((w - lo) / width * static_cast<double>(bins)));
    b = std::clamp(b, 0L, static_cast<long>(bins) - 1);
    ++rec.counts[static_cast<std::size_t>(b)];
  }
  return rec;
}

double level_proximity_fraction(const Tensor& weights, const QuantizerSpec& spec, double tol) {
  spec.validate();
  if (weights.empty()) throw std::invalid_argument("level_proximity_fraction: empty tensor");
  const double step = step_size(spec);
  const double inv_step = std::ldexp(1.0, spec.exponent);
  const auto max_index = static_cast<double>(spec.max_mantissa());
  std::size_t close_count = 0;
  for (double w : weights.v) {
    const double q = detail::quantize_with(w, step, inv_step, max_index);
    if (std::fabs(w - q) <= tol) ++close_count;
  }
  return static_cast<double>(close_count) / static_cast<double>(weights.size());
}

void write_modes_csv(const std::string& dir, std::span<const ModeSnapshot> history) {
  if (history.empty()) return;
  const ModeSnapshot& first = history.front();
  for (std::size_t li = 0; li < first.layer_ids.size(); ++li) {
    const long max_m = first.specs[li].max_mantissa();
    std::ofstream out = open_csv(dir + "/modes_" + first.layer_names[li] + ".csv");
    out << "epoch";
    for (long k = -max_m; k <= max_m; ++k) out << ",mode_m" << k;
    out << "\n";
    for (const ModeSnapshot& snap : history) {
      const std::size_t si = find_snapshot_layer(snap, first.layer_ids[li]);
      std::vector<std::size_t> counts(static_cast<std::size_t>(2 * max_m + 1), 0);
      for (std::int8_t m : snap.modes[si]) {
        ++counts[static_cast<std::size_t>(m + max_m)];
      }
      out << snap.epoch;
      for (std::size_t c : counts) out << "," << c;
      out << "\n";
    }
  }
}

void write_switches_csv(const std::string& path, std::span<const ModeSnapshot> history) {
  std::ofstream out = open_csv(path);
  out << "epoch_from,epoch_to,layer,ratio\n";
  if (history.empty()) return;
  auto emit = [&](const ModeSnapshot& a, const ModeSnapshot& b) {
    for (std::size_t li = 0; li < a.layer_ids.size(); ++li) {
      out << a.epoch << "," << b.epoch << "," << a.layer_names[li] << ","
          << fmt_double(switch_ratio(a, b, a.layer_ids[li])) << "\n";
    }
  };
  for (std::size_t i = 0; i + 1 < history.size(); ++i) emit(history[i], history[i + 1]);
  for (std::size_t i = 0; i + 10 < history.size(); ++i) emit(history[i], history[i + 10]);
}

void write_histogram_csv(const std::string& path, const HistogramRecord& hist) {
  std::ofstream out = open_csv(path);
  out << "bin_left,bin_right,count\n";
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    out << fmt_double(hist.edges[i]) << "," << fmt_double(hist.edges[i + 1]) << ","
        << hist.counts[i] << "\n";
  }
}

}  // namespace sgm
