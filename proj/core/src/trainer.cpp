#include "sgm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "sgm/errors.hpp"
#include "sgm/fixed_point.hpp"

namespace sgm {
namespace {

void check_range(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

double linear_ramp(double start, double end, int epoch, int total) {
  if (epoch == 0) return start;
  if (epoch == total - 1) return end;
  return start + (end - start) * (static_cast<double>(epoch) / static_cast<double>(total - 1));
}

std::vector<std::size_t> trainable_positions(const Network& net) {
  std::vector<std::size_t> pos;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].trainable()) pos.push_back(i);
  }
  return pos;
}

double layer_residual(const Tensor& w, const QuantizerSpec& spec) {
  const double step = step_size(spec);
  const double inv_step = std::ldexp(1.0, spec.exponent);
  const auto max_index = static_cast<double>(spec.max_mantissa());
  double sum = 0.0;
  for (double x : w.v) {
    const double r = x - detail::quantize_with(x, step, inv_step, max_index);
    sum += r * r;
  }
  return sum;
}

struct EpochLoop {
  const TrainConfig& cfg;
  const Dataset& train;
  const Dataset& test;
  Network& net;
  std::vector<LayerQuantState>* states;  // null for baseline runs
  TrainResult& result;

  // Writes the regularizer pull (lambda/M^l)(w - Q(w)) for every trainable
  // layer into grads, reusing its buffers across batches. Value-for-value the
  // same arithmetic as reg_grad; fused here to avoid copying every weight
  // tensor on each step.
  void reg_grads_into(std::span<const std::size_t> positions, double lambda, ParamGrads& grads) {
    for (std::size_t t = 0; t < positions.size(); ++t) {
      const Tensor& w = net.layers[positions[t]].weight;
      const LayerQuantState& st = (*states)[t];
      const double step = std::ldexp(1.0, -st.spec.exponent);
      const double inv_step = std::ldexp(1.0, st.spec.exponent);
      const auto max_index = static_cast<double>(st.spec.max_mantissa());
      const double scale = lambda / static_cast<double>(st.weight_count);
      Tensor& g = grads.dweight[positions[t]];
      g.shape = w.shape;
      if (g.v.size() != w.size()) g.v.resize(w.size());
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (!std::isfinite(w[i])) {
          throw std::invalid_argument("regularizer: non-finite weight in layer " +
                                      std::to_string(st.layer_id));
        }
        g[i] = scale * (w[i] - detail::quantize_with(w[i], step, inv_step, max_index));
      }
    }
  }

  void run(int start_epoch, int stop_epoch) {
    const std::vector<std::size_t> positions = trainable_positions(net);
    if (states) {
      if (states->size() != positions.size()) {
        throw std::invalid_argument("regularizer: " + std::to_string(positions.size()) +
                                    " trainable layers vs " + std::to_string(states->size()) +
                                    " layer states");
      }
      for (std::size_t t = 0; t < positions.size(); ++t) {
        if ((*states)[t].weight_count != net.layers[positions[t]].weight.size()) {
          throw std::invalid_argument("regularizer: layer " +
                                      std::to_string((*states)[t].layer_id) +
                                      " weight count is stale");
        }
      }
    }
    Tensor batch_images;
    std::vector<int> batch_labels;
    ForwardTrace trace;
    ParamGrads reg_pg;
    reg_pg.dweight.resize(net.layers.size());
    reg_pg.dbias.resize(net.layers.size());
    const auto n_train = static_cast<double>(this->train.size());
    const LambdaSchedule schedule = cfg.lambda_schedule();

    for (int epoch = start_epoch; epoch < stop_epoch; ++epoch) {
      const double eta = lr_at(cfg, epoch);
      const double lambda = states ? lambda_at(schedule, epoch) : 0.0;
      double loss_sum = 0.0;

      const auto epoch_batches =
          batches(train, static_cast<std::size_t>(cfg.batch_size), cfg.seed, epoch);
      for (std::size_t bi = 0; bi < epoch_batches.size(); ++bi) {
        gather_batch(train, epoch_batches[bi], batch_images, batch_labels);
        const BatchResult br = batch_loss_and_grads(net, batch_images, batch_labels, &trace);
        if (!std::isfinite(br.loss)) {
          throw DivergenceError("loss became non-finite at epoch " + std::to_string(epoch) +
                                ", batch " + std::to_string(bi));
        }
        if (states && lambda > 0.0) {
          reg_grads_into(positions, lambda, reg_pg);
          sgd_step(net, br.grads, &reg_pg, eta);
        } else {
          sgd_step(net, br.grads, nullptr, eta);
        }
        loss_sum += br.loss * static_cast<double>(epoch_batches[bi].size());
      }

      const double epoch_loss = loss_sum / n_train;
      if (!std::isfinite(epoch_loss)) {
        throw DivergenceError("epoch " + std::to_string(epoch) + " mean loss is non-finite");
      }
      if (epoch == 0) result.initial_loss = epoch_loss;
      if (epoch_loss > 10.0 * result.initial_loss) {
        if (++result.high_streak >= 3) {
          throw DivergenceError("loss " + std::to_string(epoch_loss) + " stayed above 10x the " +
                                "initial " + std::to_string(result.initial_loss) +
                                " for 3 consecutive epochs (epoch " + std::to_string(epoch) + ")");
        }
      } else {
        result.high_streak = 0;
      }

      EpochMetrics m;
      m.epoch = epoch;
      m.eta = eta;
      m.lambda = lambda;
      m.train_loss = epoch_loss;
      m.test_error = evaluate(net, test);
      if (states) {
        for (const LayerQuantState& st : *states) {
          for (std::size_t p : positions) {
            if (net.layers[p].layer_id == st.layer_id) {
              m.layer_residuals.push_back(layer_residual(net.layers[p].weight, st.spec));
            }
          }
        }
        result.snapshots.push_back(snapshot_modes(net, *states, epoch));
        for (const LayerQuantState& st : *states) {
          HistogramRecord h = weight_histogram(net, st.layer_id, st.spec, kHistogramBins);
          h.epoch = epoch;
          result.histograms.push_back(std::move(h));
        }
      }
      result.epochs_completed = epoch + 1;
      result.eta_now = eta;
      result.lambda_now = lambda;
      result.train_loss = epoch_loss;
      result.test_error = m.test_error;
      result.metrics.push_back(std::move(m));
    }
  }
};

}  // namespace

void TrainConfig::validate(bool allow_zero_epochs) const {
  check_range(bits >= kMinBits && bits <= kMaxBits,
              "config: bits must be in [" + std::to_string(kMinBits) + ", " +
                  std::to_string(kMaxBits) + "]");
  check_range(epochs >= (allow_zero_epochs ? 0 : 1), "config: epochs must be >= 1");
  check_range(batch_size >= 1, "config: batch_size must be >= 1");
  check_range(std::isfinite(lr_start) && std::isfinite(lr_end) && lr_end > 0.0 &&
                  lr_start >= lr_end,
              "config: need lr_start >= lr_end > 0");
  check_range(std::isfinite(lambda_start) && std::isfinite(lambda_end) && lambda_start >= 0.0 &&
                  lambda_end >= 0.0,
              "config: lambda values must be non-negative");
  check_range(f_min <= f_max && f_min >= kMinExponent && f_max <= kMaxExponent,
              "config: invalid step-exponent range");
}

double lr_at(const TrainConfig& config, int epoch) {
  if (epoch < 0 || epoch >= config.epochs) {
    throw std::invalid_argument("lr_at: epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(config.epochs) + ")");
  }
  if (config.epochs == 1) return config.lr_start;
  return linear_ramp(config.lr_start, config.lr_end, epoch, config.epochs);
}

double evaluate(const Network& net, const Dataset& ds, std::size_t eval_batch,
                std::span<const double> layer_scales) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: empty dataset");
  if (eval_batch < 1) throw std::invalid_argument("evaluate: eval_batch must be >= 1");
  const std::size_t rows = ds.images.shape[2], cols = ds.images.shape[3];
  const std::size_t px = rows * cols;
  std::size_t wrong = 0;
  Tensor chunk;
  for (std::size_t start = 0; start < ds.size(); start += eval_batch) {
    const std::size_t k = std::min(eval_batch, ds.size() - start);
    chunk.shape = {k, 1, rows, cols};
    chunk.v.resize(k * px);
    std::memcpy(chunk.data(), ds.images.data() + start * px, k * px * sizeof(double));
    const Tensor logits = forward(net, chunk, nullptr, layer_scales);
    const std::size_t classes = logits.shape[1];
    for (std::size_t i = 0; i < k; ++i) {
      const double* row = logits.data() + i * classes;
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c) {
        if (row[c] > row[best]) best = c;  // ties keep the lowest class
      }
      if (static_cast<int>(best) != ds.labels[start + i]) ++wrong;
    }
  }
  return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

std::vector<LayerQuantState> search_layer_specs(const Network& net, int bits, int f_min,
                                                int f_max) {
  std::vector<LayerQuantState> states;
  for (const Layer* layer : net.trainable_layers()) {
    const StepSearchResult res = search_step_exponent(layer->weight, bits, f_min, f_max);
    if (res.degenerate) {
      throw std::invalid_argument("step search degenerate for layer " + layer->name +
                                  " (all weights zero)");
    }
    states.push_back({layer->layer_id, res.spec, layer->weight.size()});
  }
  return states;
}

TrainResult train_float_baseline(const TrainConfig& config, const Dataset& train,
                                 const Dataset& test, Network init) {
  config.validate(/*allow_zero_epochs=*/true);
  if (config.lambda_start != 0.0 || config.lambda_end != 0.0) {
    throw std::invalid_argument("baseline training requires a zero lambda schedule");
  }
  TrainResult result;
  result.net = std::move(init);
  if (config.epochs > 0) {
    EpochLoop loop{config, train, test, result.net, nullptr, result};
    loop.run(0, config.epochs);
  } else {
    result.test_error = evaluate(result.net, test);
  }
  return result;
}

TrainResult train_sgm(const TrainConfig& config, const Dataset& train, const Dataset& test,
                      Network init, const SgmResume* resume, int stop_epoch) {
  config.validate();
  if (stop_epoch < 0) stop_epoch = config.epochs;
  TrainResult result;
  result.net = std::move(init);
  int start_epoch = 0;
  if (resume) {
    if (resume->start_epoch < 0 || resume->start_epoch > config.epochs) {
      throw std::invalid_argument("resume epoch outside the configured run");
    }
    result.states = resume->states;
    result.initial_loss = resume->initial_loss;
    result.high_streak = resume->high_streak;
    start_epoch = resume->start_epoch;
  } else {
    result.states = search_layer_specs(result.net, config.bits, config.f_min, config.f_max);
  }
  if (stop_epoch < start_epoch || stop_epoch > config.epochs) {
    throw std::invalid_argument("stop epoch outside [resume epoch, configured epochs]");
  }
  for (LayerQuantState& st : result.states) {
    st.spec.validate();
  }
  EpochLoop loop{config, train, test, result.net, &result.states, result};
  loop.run(start_epoch, stop_epoch);
  if (result.metrics.empty()) {
    result.test_error = evaluate(result.net, test);
    result.epochs_completed = start_epoch;
  }
  return result;
}

void hard_quantize(Network& net, std::span<const LayerQuantState> states) {
  std::vector<Layer*> trainables = net.trainable_layers();
  for (Layer* layer : trainables) {
    const LayerQuantState* st = nullptr;
    for (const LayerQuantState& s : states) {
      if (s.layer_id == layer->layer_id) st = &s;
    }
    if (!st) {
      throw std::invalid_argument("hard_quantize: no quantizer spec for layer " + layer->name);
    }
    layer->weight = quantize_tensor(layer->weight, st->spec);
  }
}

void write_metrics_csv(const std::string& path, std::span<const EpochMetrics> metrics,
                       std::span<const std::string> residual_names) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out << "epoch,eta,lambda,train_loss,test_error";
  for (const std::string& name : residual_names) out << ",resid_" << name;
  out << "\n";
  char buf[40];
  auto put = [&](double v) {
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    out << "," << buf;
  };
  for (const EpochMetrics& m : metrics) {
    if (m.layer_residuals.size() != residual_names.size()) {
      throw std::invalid_argument("metrics row at epoch " + std::to_string(m.epoch) +
                                  " has " + std::to_string(m.layer_residuals.size()) +
                                  " residuals, header has " +
                                  std::to_string(residual_names.size()));
    }
    out << m.epoch;
    put(m.eta);
    put(m.lambda);
    put(m.train_loss);
    put(m.test_error);
    for (double r : m.layer_residuals) put(r);
    out << "\n";
  }
}

}  // namespace sgm
