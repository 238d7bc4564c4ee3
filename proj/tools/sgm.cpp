// Command-line front end: train / quantize / eval / export / inspect.
//
// Exit codes: 0 success, 2 usage error, 3 data error, 4 divergence,
// 5 verification failure.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sgm/checkpoint.hpp"
#include "sgm/data.hpp"
#include "sgm/errors.hpp"
#include "sgm/export.hpp"
#include "sgm/fixed_point.hpp"
#include "sgm/trainer.hpp"

namespace fs = std::filesystem;
using namespace sgm;

namespace {

struct RangeFlag {
  double start = 0.0;
  double end = 0.0;
};

RangeFlag parse_range(const std::string& text, const std::string& flag) {
  const auto colon = text.find(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
    throw std::invalid_argument(flag + " wants start:end, got '" + text + "'");
  }
  RangeFlag r;
  std::size_t used = 0;
  try {
    r.start = std::stod(text.substr(0, colon), &used);
    if (used != colon) throw std::invalid_argument("");
    const std::string tail = text.substr(colon + 1);
    r.end = std::stod(tail, &used);
    if (used != tail.size()) throw std::invalid_argument("");
  } catch (const std::exception&) {
    throw std::invalid_argument(flag + " wants numeric start:end, got '" + text + "'");
  }
  return r;
}

std::pair<int, int> parse_int_range(const std::string& text, const std::string& flag) {
  const RangeFlag r = parse_range(text, flag);
  const int lo = static_cast<int>(r.start);
  const int hi = static_cast<int>(r.end);
  if (lo != r.start || hi != r.end) {
    throw std::invalid_argument(flag + " wants integer start:end, got '" + text + "'");
  }
  return {lo, hi};
}

std::string resolve_data_dir(const std::string& flag_value) {
  if (!flag_value.empty()) return flag_value;
  if (const char* env = std::getenv("SGM_DATA_DIR")) return env;
  throw std::invalid_argument("no data directory: pass --data-dir or set SGM_DATA_DIR");
}

Dataset load_split(const std::string& dir, const std::string& split, std::size_t limit) {
  Dataset ds = load_mnist_split(dir, split);
  if (limit > 0 && limit < ds.size()) ds = take(ds, 0, limit);
  return ds;
}

std::string default_run_dir(std::uint64_t seed) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof(stamp), "%Y%m%d-%H%M%S", &tm);
  return (fs::path("runs") / (std::string(stamp) + "-" + std::to_string(seed))).string();
}

void save_checkpoint_atomic(const Checkpoint& ckpt, const fs::path& path) {
  const fs::path tmp = path.string() + ".tmp";
  save_checkpoint(ckpt, tmp.string());
  fs::rename(tmp, path);
}

std::vector<std::string> residual_names(const Network& net,
                                        std::span<const LayerQuantState> states) {
  std::vector<std::string> names;
  for (const LayerQuantState& st : states) {
    for (const Layer& l : net.layers) {
      if (l.trainable() && l.layer_id == st.layer_id) names.push_back(l.name);
    }
  }
  return names;
}

// ---------------------------------------------------------------------------
// train

struct TrainOptions {
  std::string arch = "lenet5";
  int bits = 2;
  int epochs = 40;
  int baseline_epochs = 12;
  int batch = 64;
  std::string lr = "0.01:0.001";
  std::string baseline_lr = "0.05:0.01";
  std::string lambda = "0:1000";
  std::string f_range = "-8:8";
  std::uint64_t seed = 1;
  std::size_t limit = 0;
  std::string init = "fresh";
  std::string resume;
  int stop_after = 0;  // 0 = run to completion
  std::string data_dir;
  std::string run_dir;
  bool deterministic = false;  // accepted for interface compatibility; runs
                               // are deterministic unconditionally
};

TrainConfig config_from(const TrainOptions& opt) {
  TrainConfig cfg;
  cfg.bits = opt.bits;
  cfg.epochs = opt.epochs;
  cfg.batch_size = opt.batch;
  const RangeFlag lr = parse_range(opt.lr, "--lr");
  cfg.lr_start = lr.start;
  cfg.lr_end = lr.end;
  const RangeFlag lambda = parse_range(opt.lambda, "--lambda");
  cfg.lambda_start = lambda.start;
  cfg.lambda_end = lambda.end;
  cfg.seed = opt.seed;
  const auto [f_min, f_max] = parse_int_range(opt.f_range, "--f-range");
  cfg.f_min = f_min;
  cfg.f_max = f_max;
  cfg.validate();
  return cfg;
}

void write_sgm_artifacts(const fs::path& dir, const TrainConfig& cfg, const Network& net,
                         std::span<const LayerQuantState> states,
                         std::span<const EpochMetrics> metrics,
                         std::span<const ModeSnapshot> snapshots,
                         std::span<const HistogramRecord> histograms) {
  const std::vector<std::string> names = residual_names(net, states);
  write_metrics_csv((dir / "metrics.csv").string(), metrics, names);
  write_modes_csv(dir.string(), snapshots);
  write_switches_csv((dir / "switches.csv").string(), snapshots);
  for (const HistogramRecord& h : histograms) {
    if (h.epoch % 10 != 0 && h.epoch != cfg.epochs - 1) continue;
    const std::string file = "hist_" + h.layer_name + "_" + std::to_string(h.epoch) + ".csv";
    write_histogram_csv((dir / file).string(), h);
  }
}

int cmd_train(const TrainOptions& opt) {
  if (opt.arch != "lenet5") {
    throw std::invalid_argument("unknown --arch '" + opt.arch + "' (supported: lenet5)");
  }
  const bool resuming = !opt.resume.empty();

  // Every flag is validated before any file or dataset is touched.
  TrainConfig flag_cfg;
  TrainConfig base_cfg;
  if (!resuming) {
    flag_cfg = config_from(opt);
    base_cfg = flag_cfg;
    base_cfg.epochs = opt.baseline_epochs;
    const RangeFlag blr = parse_range(opt.baseline_lr, "--baseline-lr");
    base_cfg.lr_start = blr.start;
    base_cfg.lr_end = blr.end;
    base_cfg.lambda_start = 0.0;
    base_cfg.lambda_end = 0.0;
    base_cfg.validate(/*allow_zero_epochs=*/true);
  }
  const std::string data_dir = resolve_data_dir(opt.data_dir);

  Checkpoint resumed;
  if (resuming) resumed = load_checkpoint(opt.resume);

  const TrainConfig cfg = resuming ? resumed.config : flag_cfg;
  if (resuming && resumed.phase != TrainPhase::kSgm) {
    throw std::invalid_argument("--resume wants an sgm-phase checkpoint, got phase '" +
                                std::string(train_phase_name(resumed.phase)) + "'");
  }

  const Dataset train = load_split(data_dir, "train", opt.limit);
  const Dataset test = load_split(data_dir, "test", opt.limit);
  std::printf("data: %zu train / %zu test samples from %s\n", train.size(), test.size(),
              data_dir.c_str());

  const fs::path run_dir =
      opt.run_dir.empty()
          ? (resuming ? fs::path(opt.resume).parent_path() : fs::path(default_run_dir(cfg.seed)))
          : fs::path(opt.run_dir);
  fs::create_directories(run_dir);
  std::printf("run directory: %s\n", run_dir.string().c_str());

  // Starting network and resume position.
  Network net;
  SgmResume resume_state;
  bool have_resume_state = false;
  if (resuming) {
    net = std::move(resumed.net);
    resume_state.start_epoch = resumed.epochs_completed;
    resume_state.states = std::move(resumed.states);
    resume_state.initial_loss = resumed.initial_loss;
    resume_state.high_streak = resumed.high_streak;
    have_resume_state = true;
    std::printf("resuming at epoch %d/%d\n", resume_state.start_epoch, cfg.epochs);
  } else if (opt.init == "fresh") {
    // Center the inputs; the offset is kept f32-representable so the network
    // survives export-grade bias narrowing untouched.
    const double offset = -static_cast<double>(static_cast<float>(mean_pixel(train)));
    net = make_lenet5(cfg.seed, offset);

    std::printf("float baseline: %d epochs\n", base_cfg.epochs);
    TrainResult base = train_float_baseline(base_cfg, train, test, std::move(net));
    for (const EpochMetrics& m : base.metrics) {
      std::printf("  epoch %3d  eta %.6g  loss %.6f  test error %.2f%%\n", m.epoch, m.eta,
                  m.train_loss, 100.0 * m.test_error);
    }
    std::printf("baseline test error: %.2f%%\n", 100.0 * base.test_error);
    write_metrics_csv((run_dir / "baseline_metrics.csv").string(), base.metrics, {});
    save_checkpoint_atomic(make_checkpoint(TrainPhase::kFloat, base_cfg, base),
                           run_dir / "baseline.sgmc");
    net = std::move(base.net);
  } else {
    const Checkpoint init = load_checkpoint(opt.init);
    std::printf("initialized from %s (phase %s, %d epochs trained)\n", opt.init.c_str(),
                train_phase_name(init.phase), init.epochs_completed);
    net = init.net;
  }

  // SGM fine-tune, one epoch per train_sgm call so a checkpoint lands after
  // every epoch; resuming from any of them reproduces the rest of the run
  // bit for bit.
  std::printf("sgm: %d epochs, %d-bit, lambda %g:%g\n", cfg.epochs, cfg.bits, cfg.lambda_start,
              cfg.lambda_end);
  std::vector<EpochMetrics> metrics;
  std::vector<ModeSnapshot> snapshots;
  std::vector<HistogramRecord> histograms;
  std::vector<LayerQuantState> states;
  TrainResult last;
  const int start = have_resume_state ? resume_state.start_epoch : 0;
  if (opt.stop_after < 0) throw std::invalid_argument("--stop-after must be >= 0");
  const int stop = opt.stop_after > 0 ? std::min(opt.stop_after, cfg.epochs) : cfg.epochs;
  if (stop < start) {
    throw std::invalid_argument("--stop-after " + std::to_string(opt.stop_after) +
                                " is behind the checkpoint (" + std::to_string(start) +
                                " epochs already trained)");
  }
  for (int epoch = start; epoch < stop; ++epoch) {
    const SgmResume* resume_ptr = (epoch == start && !have_resume_state) ? nullptr : &resume_state;
    last = train_sgm(cfg, train, test, std::move(net), resume_ptr, epoch + 1);
    net = std::move(last.net);
    states = last.states;

    metrics.insert(metrics.end(), last.metrics.begin(), last.metrics.end());
    snapshots.insert(snapshots.end(), last.snapshots.begin(), last.snapshots.end());
    histograms.insert(histograms.end(), last.histograms.begin(), last.histograms.end());

    resume_state.start_epoch = last.epochs_completed;
    resume_state.states = last.states;
    resume_state.initial_loss = last.initial_loss;
    resume_state.high_streak = last.high_streak;
    have_resume_state = true;

    last.net = net;  // make_checkpoint reads the result's network
    save_checkpoint_atomic(make_checkpoint(TrainPhase::kSgm, cfg, last),
                           run_dir / "checkpoint.sgmc");
    const EpochMetrics& m = metrics.back();
    std::printf("  epoch %3d  eta %.6g  lambda %8.6g  loss %.6f  test error %.2f%%\n", m.epoch,
                m.eta, m.lambda, m.train_loss, 100.0 * m.test_error);
  }
  if (start >= cfg.epochs) {
    // Nothing left to train; recreate the final checkpoint artifacts.
    last = train_sgm(cfg, train, test, std::move(net), &resume_state);
    net = std::move(last.net);
    states = last.states;
    last.net = net;
    save_checkpoint_atomic(make_checkpoint(TrainPhase::kSgm, cfg, last),
                           run_dir / "checkpoint.sgmc");
  }

  if (!metrics.empty()) {
    write_sgm_artifacts(run_dir, cfg, net, states, metrics, snapshots, histograms);
  }
  if (stop < cfg.epochs) {
    std::printf("stopped after %d/%d epochs; resume with --resume %s\n", stop, cfg.epochs,
                (run_dir / "checkpoint.sgmc").string().c_str());
  }
  std::printf("final test error: %.2f%%\n", 100.0 * last.test_error);
  std::printf("checkpoint: %s\n", (run_dir / "checkpoint.sgmc").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// quantize

struct QuantizeOptions {
  std::string checkpoint;
  std::string out;
  std::string data_dir;
  std::size_t limit = 0;
  int bits = 2;
  std::string f_range = "-8:8";
};

int cmd_quantize(const QuantizeOptions& opt) {
  Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  const std::string data_dir = resolve_data_dir(opt.data_dir);
  const Dataset test = load_split(data_dir, "test", opt.limit);

  if (ckpt.states.empty()) {
    // Float checkpoint: resolve step exponents now.
    const auto [f_min, f_max] = parse_int_range(opt.f_range, "--f-range");
    ckpt.states = search_layer_specs(ckpt.net, opt.bits, f_min, f_max);
    std::printf("resolved step exponents on %s-phase checkpoint\n",
                train_phase_name(ckpt.phase));
  }
  for (const LayerQuantState& st : ckpt.states) {
    std::printf("  layer %d: %d-bit, f=%d (step %.10g)\n", st.layer_id, st.spec.bits,
                st.spec.exponent, step_size(st.spec));
  }

  const double pre = evaluate(ckpt.net, test);
  hard_quantize(ckpt.net, ckpt.states);
  narrow_biases(ckpt.net);
  const double post = evaluate(ckpt.net, test);
  std::printf("test error before quantization: %.2f%%\n", 100.0 * pre);
  std::printf("test error after  quantization: %.2f%%\n", 100.0 * post);
  std::printf("quantization gap: %+.3f pp\n", 100.0 * (post - pre));

  ckpt.phase = TrainPhase::kQuantized;
  ckpt.test_error = post;
  const fs::path out = opt.out.empty()
                           ? fs::path(opt.checkpoint).replace_extension(".quantized.sgmc")
                           : fs::path(opt.out);
  save_checkpoint_atomic(ckpt, out);
  std::printf("quantized checkpoint: %s\n", out.string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
  std::string checkpoint;
  std::string model;
  std::string split = "test";
  std::string data_dir;
  std::size_t limit = 0;
};

int cmd_eval(const EvalOptions& opt) {
  if (opt.checkpoint.empty() == opt.model.empty()) {
    throw std::invalid_argument("pass exactly one of --checkpoint or --model");
  }
  const std::string data_dir = resolve_data_dir(opt.data_dir);
  const Dataset ds = load_split(data_dir, opt.split, opt.limit);

  double error = 0.0;
  if (!opt.checkpoint.empty()) {
    const Checkpoint ckpt = load_checkpoint(opt.checkpoint);
    error = evaluate(ckpt.net, ds);
  } else {
    const QuantizedModel model = import_model(opt.model);
    error = evaluate_quantized(model, ds);
  }
  std::printf("%s error: %.4f%% (%zu samples)\n", opt.split.c_str(), 100.0 * error, ds.size());
  return 0;
}

// ---------------------------------------------------------------------------
// export

struct ExportOptions {
  std::string checkpoint;
  std::string out;
  std::string data_dir;
  std::size_t verify_samples = 1000;
};

int cmd_export(const ExportOptions& opt) {
  const Checkpoint ckpt = load_checkpoint(opt.checkpoint);
  if (ckpt.phase != TrainPhase::kQuantized) {
    throw std::invalid_argument("export wants a quantized checkpoint (run `sgm quantize` first); "
                                "got phase '" +
                                std::string(train_phase_name(ckpt.phase)) + "'");
  }
  const fs::path out = opt.out.empty()
                           ? fs::path(opt.checkpoint).replace_extension(".sgmq")
                           : fs::path(opt.out);
  export_model(ckpt.net, ckpt.states, out.string());
  std::printf("model: %s (%ju bytes)\n", out.string().c_str(),
              static_cast<std::uintmax_t>(fs::file_size(out)));

  const QuantizedModel model = import_model(out.string());
  const std::string data_dir = resolve_data_dir(opt.data_dir);
  const Dataset sample = load_split(data_dir, "test", opt.verify_samples);
  const EquivalenceReport rep = verify_equivalence(model, ckpt.net, sample);
  std::printf("verification on %zu samples: max logit deviation %.17g, agreement %.4f%%\n",
              rep.samples, rep.max_abs_logit_deviation, 100.0 * rep.agreement);
  if (!rep.exact()) {
    throw VerificationError("integer forward deviates from the checkpoint network");
  }
  std::printf("integer forward is exact\n");
  return 0;
}

// ---------------------------------------------------------------------------
// inspect

int cmd_inspect(const std::string& path) {
  const QuantizedModel model = import_model(path);
  std::printf("%s: %zu layers\n", path.c_str(), model.layers.size());
  for (const QuantizedLayer& l : model.layers) {
    std::printf("  %-8s %-10s", layer_kind_name(l.kind), l.name.c_str());
    if (l.kind == LayerKind::kMaxPool) {
      std::printf(" window %d stride %d", l.window, l.stride);
    }
    if (!l.mantissas.empty()) {
      std::printf(" %d-bit f=%d step %.10g  shape [", l.bits, l.exponent,
                  step_size({l.bits, l.exponent}));
      for (std::size_t i = 0; i < l.weight_shape.size(); ++i) {
        std::printf("%s%zu", i ? "," : "", l.weight_shape[i]);
      }
      std::printf("]");
    }
    std::printf("\n");
    if (!l.mantissas.empty()) {
      std::map<int, std::size_t> modes;
      for (std::int8_t m : l.mantissas) modes[m]++;
      std::printf("    modes:");
      for (const auto& [level, count] : modes) std::printf(" %+d:%zu", level, count);
      std::printf("\n");
    }
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fixed-point weight learning on MNIST: training, quantization, and inference"};
  app.require_subcommand(1);

  TrainOptions topt;
  CLI::App* train = app.add_subcommand("train", "Float-pretrain and fine-tune a network");
  train->add_option("--arch", topt.arch, "Architecture (lenet5)");
  train->add_option("--bits", topt.bits, "Quantizer bit width N");
  auto* o_epochs = train->add_option("--epochs", topt.epochs, "Fine-tune epochs");
  auto* o_bepochs =
      train->add_option("--baseline-epochs", topt.baseline_epochs, "Float pretraining epochs");
  auto* o_batch = train->add_option("--batch", topt.batch, "Batch size");
  auto* o_lr = train->add_option("--lr", topt.lr, "Fine-tune learning rate start:end");
  auto* o_blr =
      train->add_option("--baseline-lr", topt.baseline_lr, "Pretraining learning rate start:end");
  auto* o_lambda = train->add_option("--lambda", topt.lambda, "Regularization ramp start:end");
  auto* o_frange = train->add_option("--f-range", topt.f_range, "Step exponent search range");
  auto* o_seed = train->add_option("--seed", topt.seed, "RNG seed");
  train->add_option("--limit", topt.limit, "Cap samples per split (0 = all)");
  auto* o_init =
      train->add_option("--init", topt.init, "'fresh' or a checkpoint to fine-tune from");
  train->add_option("--resume", topt.resume, "Continue an interrupted run from its checkpoint");
  train->add_option("--stop-after", topt.stop_after,
                    "Stop after this many total epochs, leaving a resumable checkpoint");
  train->add_option("--data-dir", topt.data_dir, "MNIST directory (default: SGM_DATA_DIR)");
  train->add_option("--run-dir", topt.run_dir, "Output directory (default: runs/<stamp>-<seed>)");
  train->add_flag("--deterministic", topt.deterministic,
                  "Accepted for compatibility; runs are always deterministic");

  QuantizeOptions qopt;
  CLI::App* quantize = app.add_subcommand("quantize", "Hard-quantize a trained checkpoint");
  quantize->add_option("--checkpoint", qopt.checkpoint, "Input checkpoint")->required();
  quantize->add_option("--out", qopt.out, "Output path (default: <input>.quantized.sgmc)");
  quantize->add_option("--data-dir", qopt.data_dir, "MNIST directory (default: SGM_DATA_DIR)");
  quantize->add_option("--limit", qopt.limit, "Cap evaluation samples (0 = all)");
  quantize->add_option("--bits", qopt.bits, "Bit width when the checkpoint has no quantizer");
  quantize->add_option("--f-range", qopt.f_range, "Step exponent search range");

  EvalOptions eopt;
  CLI::App* eval = app.add_subcommand("eval", "Report error rate of a checkpoint or model");
  eval->add_option("--checkpoint", eopt.checkpoint, "Checkpoint to evaluate");
  eval->add_option("--model", eopt.model, "SGMQ model to evaluate");
  eval->add_option("--split", eopt.split, "Dataset split (train or test)");
  eval->add_option("--data-dir", eopt.data_dir, "MNIST directory (default: SGM_DATA_DIR)");
  eval->add_option("--limit", eopt.limit, "Cap samples (0 = all)");

  ExportOptions xopt;
  CLI::App* exp = app.add_subcommand("export", "Write an SGMQ model and verify integer inference");
  exp->add_option("--checkpoint", xopt.checkpoint, "Quantized checkpoint")->required();
  exp->add_option("--out", xopt.out, "Output path (default: <input>.sgmq)");
  exp->add_option("--data-dir", xopt.data_dir, "MNIST directory (default: SGM_DATA_DIR)");
  exp->add_option("--verify-samples", xopt.verify_samples, "Test samples for verification");

  std::string inspect_path;
  CLI::App* inspect = app.add_subcommand("inspect", "Print the layers of an SGMQ model");
  inspect->add_option("model", inspect_path, "SGMQ model file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train->parsed()) {
      if (!topt.resume.empty()) {
        // A resumed run's configuration comes from its checkpoint; fresh
        // training flags would silently disagree with it.
        for (const CLI::Option* o : {o_epochs, o_bepochs, o_batch, o_lr, o_blr, o_lambda,
                                     o_frange, o_seed, o_init}) {
          if (o->count() > 0) {
            throw std::invalid_argument("--resume takes its configuration from the checkpoint; "
                                        "drop " + o->get_name());
          }
        }
      }
      return cmd_train(topt);
    }
    if (quantize->parsed()) return cmd_quantize(qopt);
    if (eval->parsed()) return cmd_eval(eopt);
    if (exp->parsed()) return cmd_export(xopt);
    if (inspect->parsed()) return cmd_inspect(inspect_path);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "divergence: %s\n", e.what());
    return 4;
  } catch (const VerificationError& e) {
    std::fprintf(stderr, "verification failure: %s\n", e.what());
    return 5;
  } catch (const DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  }
  return 2;
}
