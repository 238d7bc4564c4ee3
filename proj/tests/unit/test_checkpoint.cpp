#include "sgm/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "sgm/errors.hpp"

using namespace sgm;

namespace {

Network small_net(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  Network net;
  Layer center;
  center.kind = LayerKind::kCenter;
  center.name = "center";
  center.bias = Tensor({1}, {-0.25});
  net.layers.push_back(std::move(center));
  Layer conv;
  conv.kind = LayerKind::kConv2d;
  conv.name = "conv1";
  conv.layer_id = 1;
  conv.stride = 1;
  conv.pad = 0;
  conv.weight = Tensor({2, 1, 3, 3});
  conv.bias = Tensor({2});
  for (auto& v : conv.weight.v) v = dist(rng);
  net.layers.push_back(std::move(conv));
  Layer flat;
  flat.kind = LayerKind::kFlatten;
  flat.name = "flatten";
  net.layers.push_back(flat);
  Layer fc;
  fc.kind = LayerKind::kLinear;
  fc.name = "fc1";
  fc.layer_id = 2;
  fc.weight = Tensor({3, 8});
  fc.bias = Tensor({3});
  for (auto& v : fc.weight.v) v = dist(rng);
  for (auto& v : fc.bias.v) v = dist(rng);
  net.layers.push_back(std::move(fc));
  return net;
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.phase = TrainPhase::kSgm;
  c.config.bits = 2;
  c.config.epochs = 40;
  c.config.batch_size = 64;
  c.config.lr_start = 0.01;
  c.config.lr_end = 0.001;
  c.config.lambda_start = 0.0;
  c.config.lambda_end = 1000.0;
  c.config.seed = 77;
  c.epochs_completed = 13;
  c.lambda_now = 1000.0 * 13 / 39;
  c.eta_now = 0.007;
  c.train_loss = 0.042;
  c.initial_loss = 2.3;
  c.high_streak = 1;
  c.test_error = 0.018;
  c.net = small_net(5);
  c.states = {{1, {2, 4}, 18}, {2, {2, 5}, 24}};
  return c;
}

}  // namespace

TEST_SUITE("checkpoint") {

TEST_CASE("round trip preserves every field") {
  const Checkpoint c = sample_checkpoint();
  const auto bytes = checkpoint_bytes(c);
  const Checkpoint r = parse_checkpoint(bytes);

  CHECK(r.phase == c.phase);
  CHECK(r.config.bits == c.config.bits);
  CHECK(r.config.epochs == c.config.epochs);
  CHECK(r.config.batch_size == c.config.batch_size);
  CHECK(r.config.lr_start == c.config.lr_start);
  CHECK(r.config.lr_end == c.config.lr_end);
  CHECK(r.config.lambda_start == c.config.lambda_start);
  CHECK(r.config.lambda_end == c.config.lambda_end);
  CHECK(r.config.seed == c.config.seed);
  CHECK(r.config.f_min == c.config.f_min);
  CHECK(r.config.f_max == c.config.f_max);
  CHECK(r.epochs_completed == c.epochs_completed);
  CHECK(r.lambda_now == c.lambda_now);
  CHECK(r.eta_now == c.eta_now);
  CHECK(r.train_loss == c.train_loss);
  CHECK(r.initial_loss == c.initial_loss);
  CHECK(r.high_streak == c.high_streak);
  CHECK(r.test_error == c.test_error);

  REQUIRE(r.net.layers.size() == c.net.layers.size());
  for (std::size_t i = 0; i < c.net.layers.size(); ++i) {
    CHECK(r.net.layers[i].kind == c.net.layers[i].kind);
    CHECK(r.net.layers[i].name == c.net.layers[i].name);
    CHECK(r.net.layers[i].layer_id == c.net.layers[i].layer_id);
    CHECK(r.net.layers[i].stride == c.net.layers[i].stride);
    CHECK(r.net.layers[i].pad == c.net.layers[i].pad);
    CHECK(r.net.layers[i].window == c.net.layers[i].window);
    CHECK(r.net.layers[i].weight.shape == c.net.layers[i].weight.shape);
    CHECK(r.net.layers[i].weight.v == c.net.layers[i].weight.v);  // bit exact
    CHECK(r.net.layers[i].bias.v == c.net.layers[i].bias.v);
  }
  REQUIRE(r.states.size() == 2);
  CHECK(r.states[0].layer_id == 1);
  CHECK(r.states[0].spec == QuantizerSpec{2, 4});
  CHECK(r.states[0].weight_count == 18);
  CHECK(r.states[1].spec == QuantizerSpec{2, 5});
}

TEST_CASE("serialization is deterministic") {
  const Checkpoint c = sample_checkpoint();
  CHECK(checkpoint_bytes(c) == checkpoint_bytes(c));
}

TEST_CASE("file round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "sgm_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "run.sgmc").string();
  const Checkpoint c = sample_checkpoint();
  save_checkpoint(c, path);
  const Checkpoint r = load_checkpoint(path);
  CHECK(checkpoint_bytes(r) == checkpoint_bytes(c));
  std::filesystem::remove_all(dir);
}

TEST_CASE("corruption is rejected") {
  const Checkpoint c = sample_checkpoint();
  auto bytes = checkpoint_bytes(c);

  SUBCASE("flipped payload byte fails the checksum") {
    bytes[bytes.size() / 2] ^= 0x01;
    CHECK_THROWS_AS(parse_checkpoint(bytes), DataError);
  }
  SUBCASE("flipped trailer byte fails the checksum") {
    bytes[bytes.size() - 1] ^= 0x80;
    CHECK_THROWS_AS(parse_checkpoint(bytes), DataError);
  }
  SUBCASE("truncation") {
    bytes.resize(bytes.size() - 9);
    CHECK_THROWS_AS(parse_checkpoint(bytes), DataError);
  }
  SUBCASE("trailing garbage") {
    bytes.push_back(0x00);
    CHECK_THROWS_AS(parse_checkpoint(bytes), DataError);
  }
  SUBCASE("wrong magic") {
    std::vector<std::uint8_t> junk{'N', 'O', 'P', 'E', 0, 0, 0, 0};
    CHECK_THROWS_AS(parse_checkpoint(junk), DataError);
  }
  SUBCASE("empty") {
    CHECK_THROWS_AS(parse_checkpoint(std::vector<std::uint8_t>{}), DataError);
  }
}

TEST_CASE("semantic validation on load") {
  SUBCASE("stale weight count in a spec") {
    Checkpoint c = sample_checkpoint();
    c.states[0].weight_count = 17;  // layer really has 18
    CHECK_THROWS_AS(parse_checkpoint(checkpoint_bytes(c)), DataError);
  }
  SUBCASE("spec for a missing layer") {
    Checkpoint c = sample_checkpoint();
    c.states[0].layer_id = 99;
    CHECK_THROWS_AS(parse_checkpoint(checkpoint_bytes(c)), DataError);
  }
  SUBCASE("sgm phase requires specs") {
    Checkpoint c = sample_checkpoint();
    c.states.clear();
    CHECK_THROWS_AS(parse_checkpoint(checkpoint_bytes(c)), DataError);
  }
  SUBCASE("float phase forbids specs") {
    Checkpoint c = sample_checkpoint();
    c.phase = TrainPhase::kFloat;
    c.config.lambda_end = 0.0;
    CHECK_THROWS_AS(parse_checkpoint(checkpoint_bytes(c)), DataError);
  }
  SUBCASE("non-finite weight") {
    Checkpoint c = sample_checkpoint();
    c.net.layers[1].weight.v[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(parse_checkpoint(checkpoint_bytes(c)), DataError);
  }
}

TEST_CASE("missing file") {
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/run.sgmc"), DataError);
}

TEST_CASE("phase names") {
  CHECK(std::string(train_phase_name(TrainPhase::kFloat)) == "float");
  CHECK(std::string(train_phase_name(TrainPhase::kSgm)) == "sgm");
  CHECK(std::string(train_phase_name(TrainPhase::kQuantized)) == "quantized");
}

}  // TEST_SUITE
