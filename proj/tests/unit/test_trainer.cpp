#include "sgm/trainer.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "sgm/checkpoint.hpp"
#include "sgm/errors.hpp"
#include "sgm/fixed_point.hpp"

using namespace sgm;

namespace {

// Small MNIST slices shared across cases; loaded once.
const Dataset& train_slice() {
  static const Dataset ds = [] {
    const char* dir = std::getenv("SGM_DATA_DIR");
    REQUIRE(dir != nullptr);
    return take(load_mnist_split(dir, "train"), 0, 768);
  }();
  return ds;
}

const Dataset& test_slice() {
  static const Dataset ds = [] {
    const char* dir = std::getenv("SGM_DATA_DIR");
    REQUIRE(dir != nullptr);
    return take(load_mnist_split(dir, "test"), 0, 512);
  }();
  return ds;
}

TrainConfig small_config(int epochs) {
  TrainConfig cfg;
  cfg.bits = 2;
  cfg.epochs = epochs;
  cfg.batch_size = 64;
  cfg.lr_start = 0.01;
  cfg.lr_end = 0.001;
  cfg.seed = 321;
  return cfg;
}

bool same_weights(const Network& a, const Network& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].weight.v != b.layers[i].weight.v) return false;
    if (a.layers[i].bias.v != b.layers[i].bias.v) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("learning rate ramp hits both endpoints exactly") {
  TrainConfig cfg = small_config(80);
  CHECK(lr_at(cfg, 0) == 0.01);
  CHECK(lr_at(cfg, 79) == 0.001);
  for (int e = 1; e < 80; ++e) {
    CHECK(lr_at(cfg, e) < lr_at(cfg, e - 1));
    CHECK(lr_at(cfg, e) >= cfg.lr_end);
  }
  TrainConfig one = small_config(1);
  CHECK(lr_at(one, 0) == 0.01);
  CHECK_THROWS_AS(lr_at(cfg, -1), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(cfg, 80), std::invalid_argument);
}

TEST_CASE("config validation") {
  TrainConfig cfg = small_config(10);
  CHECK_NOTHROW(cfg.validate());

  TrainConfig bad = cfg;
  bad.bits = 1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_NOTHROW(bad.validate(/*allow_zero_epochs=*/true));
  bad = cfg;
  bad.lr_end = 0.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.lr_end = 0.02;  // above lr_start
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.lambda_start = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.f_min = 9;
  bad.f_max = 8;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("evaluate on fixture networks") {
  // Two-class 1x1-pixel data; pixel value alone decides the class.
  Dataset ds;
  ds.split_tag = "test";
  ds.images = Tensor({4, 1, 1, 1}, {0.0, 1.0, 1.0, 0.0});
  ds.labels = {0, 1, 1, 0};

  Network perfect;
  Layer flat;
  flat.kind = LayerKind::kFlatten;
  flat.name = "flatten";
  perfect.layers.push_back(flat);
  Layer fc;
  fc.kind = LayerKind::kLinear;
  fc.name = "fc";
  fc.layer_id = 1;
  fc.weight = Tensor({2, 1}, {-10.0, 10.0});
  fc.bias = Tensor({2}, {5.0, 0.0});
  perfect.layers.push_back(std::move(fc));
  CHECK(evaluate(perfect, ds) == 0.0);

  // Constant class 1 on balanced two-class data: error one half.
  Network constant = perfect;
  constant.layers[1].weight.fill(0.0);
  constant.layers[1].bias = Tensor({2}, {0.0, 1.0});
  CHECK(evaluate(constant, ds) == 0.5);

  Dataset empty;
  CHECK_THROWS_AS(evaluate(perfect, empty), std::invalid_argument);
}

TEST_CASE("search_layer_specs covers trainable layers in order") {
  const Network net = make_lenet5(3, -0.1);
  const auto states = search_layer_specs(net, 2, -8, 8);
  REQUIRE(states.size() == 4);
  CHECK(states[0].layer_id == 1);
  CHECK(states[3].layer_id == 4);
  CHECK(states[0].weight_count == 500);
  CHECK(states[3].weight_count == 5000);
  for (const auto& st : states) CHECK(st.spec.bits == 2);

  Network zeros = net;
  for (Layer* l : zeros.trainable_layers()) l->weight.fill(0.0);
  CHECK_THROWS_AS(search_layer_specs(zeros, 2, -8, 8), std::invalid_argument);
}

TEST_CASE("baseline training runs and is deterministic") {
  TrainConfig cfg = small_config(2);
  const Network init = make_lenet5(cfg.seed, -0.13);
  const TrainResult a = train_float_baseline(cfg, train_slice(), test_slice(), init);
  const TrainResult b = train_float_baseline(cfg, train_slice(), test_slice(), init);

  REQUIRE(a.metrics.size() == 2);
  CHECK(a.epochs_completed == 2);
  CHECK(a.metrics[0].epoch == 0);
  CHECK(a.metrics[0].eta == 0.01);
  CHECK(a.metrics[1].eta == 0.001);
  CHECK(a.metrics[0].lambda == 0.0);
  CHECK(a.metrics[0].layer_residuals.empty());
  for (const auto& m : a.metrics) {
    CHECK(std::isfinite(m.train_loss));
    CHECK(m.test_error >= 0.0);
    CHECK(m.test_error <= 1.0);
  }
  CHECK(a.states.empty());
  CHECK(a.snapshots.empty());

  CHECK(same_weights(a.net, b.net));
  CHECK(a.train_loss == b.train_loss);
  CHECK(a.test_error == b.test_error);

  // Training moved the weights and helped on this slice.
  CHECK_FALSE(same_weights(a.net, init));
  CHECK(a.metrics[1].train_loss < a.metrics[0].train_loss);
}

TEST_CASE("baseline with zero epochs returns the initialization") {
  TrainConfig cfg = small_config(0);
  const Network init = make_lenet5(9, -0.13);
  const TrainResult r = train_float_baseline(cfg, train_slice(), test_slice(), init);
  CHECK(same_weights(r.net, init));
  CHECK(r.metrics.empty());
  CHECK(r.epochs_completed == 0);
  CHECK(r.test_error == evaluate(init, test_slice()));
}

TEST_CASE("baseline rejects a nonzero lambda schedule") {
  TrainConfig cfg = small_config(2);
  cfg.lambda_end = 10.0;
  CHECK_THROWS_AS(train_float_baseline(cfg, train_slice(), test_slice(), make_lenet5(1, 0.0)),
                  std::invalid_argument);
}

TEST_CASE("sgm with a zero lambda schedule is bit-identical to plain sgd") {
  TrainConfig cfg = small_config(2);
  const Network init = make_lenet5(cfg.seed, -0.13);
  const TrainResult plain = train_float_baseline(cfg, train_slice(), test_slice(), init);
  const TrainResult sgm = train_sgm(cfg, train_slice(), test_slice(), init);
  CHECK(same_weights(plain.net, sgm.net));
  CHECK(plain.train_loss == sgm.train_loss);
  CHECK(plain.test_error == sgm.test_error);
  // The SGM run still reports quantizer-aware telemetry.
  CHECK(sgm.states.size() == 4);
  CHECK(sgm.snapshots.size() == 2);
  CHECK(sgm.metrics[0].layer_residuals.size() == 4);
}

TEST_CASE("sgm ramp hits lambda endpoints and pulls weights toward the grid") {
  TrainConfig cfg = small_config(3);
  // Large enough that the per-step pull eta*lambda/M on conv1 (M = 500) is
  // decisive within this tiny run; the full-scale behavior is acceptance
  // territory.
  cfg.lambda_end = 50000.0;
  const Network init = make_lenet5(cfg.seed, -0.13);
  const TrainResult r = train_sgm(cfg, train_slice(), test_slice(), init);

  REQUIRE(r.metrics.size() == 3);
  CHECK(r.metrics[0].lambda == 0.0);
  CHECK(r.metrics[2].lambda == 50000.0);
  CHECK(r.metrics[1].lambda == doctest::Approx(25000.0).epsilon(1e-12));
  CHECK(r.lambda_now == 50000.0);

  // conv1's residual collapses once the pull is on (last epoch vs first).
  REQUIRE(r.metrics[0].layer_residuals.size() == 4);
  CHECK(r.metrics[2].layer_residuals[0] < 0.1 * r.metrics[0].layer_residuals[0]);

  // One histogram per layer per epoch, 80 bins each.
  CHECK(r.histograms.size() == 12);
  CHECK(r.histograms[0].counts.size() == kHistogramBins);
  CHECK(r.snapshots.size() == 3);
  CHECK(r.snapshots[2].epoch == 2);
}

TEST_CASE("interrupted and resumed sgm run reproduces the uninterrupted one") {
  TrainConfig cfg = small_config(4);
  cfg.lambda_end = 100.0;
  const Network init = make_lenet5(cfg.seed, -0.13);
  const TrainResult full = train_sgm(cfg, train_slice(), test_slice(), init);

  const TrainResult part = train_sgm(cfg, train_slice(), test_slice(), init, nullptr, 2);
  CHECK(part.epochs_completed == 2);
  CHECK(part.metrics.size() == 2);

  SgmResume resume;
  resume.start_epoch = part.epochs_completed;
  resume.states = part.states;
  resume.initial_loss = part.initial_loss;
  resume.high_streak = part.high_streak;
  const TrainResult rest = train_sgm(cfg, train_slice(), test_slice(), part.net, &resume);

  CHECK(same_weights(full.net, rest.net));
  CHECK(full.train_loss == rest.train_loss);
  CHECK(full.test_error == rest.test_error);
  REQUIRE(rest.metrics.size() == 2);
  CHECK(rest.metrics[0].epoch == 2);
  CHECK(rest.metrics[0].train_loss == full.metrics[2].train_loss);
  CHECK(rest.metrics[1].test_error == full.metrics[3].test_error);

  // The final checkpoints agree byte for byte.
  const auto full_ckpt = checkpoint_bytes(make_checkpoint(TrainPhase::kSgm, cfg, full));
  const auto rest_ckpt = checkpoint_bytes(make_checkpoint(TrainPhase::kSgm, cfg, rest));
  CHECK(full_ckpt == rest_ckpt);

  // Degenerate resume: everything already done.
  SgmResume done;
  done.start_epoch = cfg.epochs;
  done.states = full.states;
  done.initial_loss = full.initial_loss;
  const TrainResult noop = train_sgm(cfg, train_slice(), test_slice(), full.net, &done);
  CHECK(same_weights(noop.net, full.net));
  CHECK(noop.test_error == full.test_error);
}

TEST_CASE("stop epoch validation") {
  TrainConfig cfg = small_config(4);
  const Network init = make_lenet5(1, 0.0);
  CHECK_THROWS_AS(train_sgm(cfg, train_slice(), test_slice(), init, nullptr, 5),
                  std::invalid_argument);
  SgmResume resume;
  resume.start_epoch = 3;
  resume.states = search_layer_specs(init, cfg.bits, cfg.f_min, cfg.f_max);
  resume.initial_loss = 1.0;
  CHECK_THROWS_AS(train_sgm(cfg, train_slice(), test_slice(), init, &resume, 2),
                  std::invalid_argument);
}

TEST_CASE("hard_quantize snaps weights onto the grid") {
  Network net;
  Layer fc;
  fc.kind = LayerKind::kLinear;
  fc.name = "fc";
  fc.layer_id = 1;
  fc.weight = Tensor({1, 2}, {0.30, -0.05});
  fc.bias = Tensor({1}, {0.123456});
  net.layers.push_back(std::move(fc));
  std::vector<LayerQuantState> states{{1, {2, 2}, 2}};

  hard_quantize(net, states);
  CHECK(net.layers[0].weight.v == std::vector<double>{0.25, 0.0});
  CHECK(net.layers[0].bias.v[0] == 0.123456);  // biases untouched

  const auto snapshot = net.layers[0].weight.v;
  hard_quantize(net, states);
  CHECK(net.layers[0].weight.v == snapshot);  // idempotent

  std::vector<LayerQuantState> wrong{{9, {2, 2}, 2}};
  CHECK_THROWS_AS(hard_quantize(net, wrong), std::invalid_argument);
}

TEST_CASE("hard_quantize leaves every weight encodable") {
  TrainConfig cfg = small_config(1);
  cfg.lambda_end = 50.0;
  Network net = make_lenet5(17, -0.1);
  TrainResult r = train_sgm(cfg, train_slice(), test_slice(), std::move(net));
  hard_quantize(r.net, r.states);
  for (const LayerQuantState& st : r.states) {
    for (const Layer* l : r.net.trainable_layers()) {
      if (l->layer_id != st.layer_id) continue;
      for (double w : l->weight.v) CHECK_NOTHROW(encode(w, st.spec));
    }
  }
}

TEST_CASE("non-finite loss raises DivergenceError") {
  TrainConfig cfg = small_config(2);
  Network init = make_lenet5(cfg.seed, -0.13);
  // Poison the output layer so the first batch's logits are non-finite.
  // (Earlier layers would not do: relu maps NaN to 0.)
  init.trainable_layers()[3]->weight.fill(std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(train_float_baseline(cfg, train_slice(), test_slice(), std::move(init)),
                  DivergenceError);
}

TEST_CASE("metrics csv schema") {
  std::vector<EpochMetrics> metrics(2);
  metrics[0] = {0, 0.01, 0.0, 1.5, 0.25, {1.0, 2.0}};
  metrics[1] = {1, 0.001, 1000.0, 0.5, 0.125, {0.5, 0.25}};
  std::vector<std::string> names{"conv1", "fc1"};

  const auto dir = std::filesystem::temp_directory_path() / "sgm_trainer_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "metrics.csv").string();
  write_metrics_csv(path, metrics, names);

  std::ifstream in(path);
  std::stringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() ==
        "epoch,eta,lambda,train_loss,test_error,resid_conv1,resid_fc1\n"
        "0,0.01,0,1.5,0.25,1,2\n"
        "1,0.001,1000,0.5,0.125,0.5,0.25\n");

  // Baseline schema has no residual columns.
  std::vector<EpochMetrics> base(1);
  base[0] = {0, 0.01, 0.0, 1.5, 0.25, {}};
  write_metrics_csv(path, base, {});
  std::ifstream in2(path);
  std::stringstream ss2;
  ss2 << in2.rdbuf();
  CHECK(ss2.str() ==
        "epoch,eta,lambda,train_loss,test_error\n"
        "0,0.01,0,1.5,0.25\n");

  std::vector<std::string> too_many{"a", "b", "c"};
  CHECK_THROWS_AS(write_metrics_csv(path, metrics, too_many), std::invalid_argument);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
