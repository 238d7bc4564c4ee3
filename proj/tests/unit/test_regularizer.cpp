#include "sgm/regularizer.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "sgm/fixed_point.hpp"

using namespace sgm;

namespace {

// Exhaustive-scan oracle for the step search, independent of the library's
// loop structure: evaluates the residual at every exponent via quantize_value
// and keeps the largest exponent among the minimizers.
StepSearchResult oracle_search(const Tensor& w, int bits, int f_min, int f_max) {
  StepSearchResult best;
  bool have = false;
  for (int f = f_min; f <= f_max; ++f) {
    const QuantizerSpec spec{bits, f};
    double residual = 0.0;
    for (double x : w.v) {
      const double r = x - quantize_value(x, spec);
      residual += r * r;
    }
    if (!have || residual <= best.residual) {
      best = {spec, residual, false};
      have = true;
    }
  }
  return best;
}

Tensor random_weights(std::mt19937_64& rng, std::size_t n, double scale) {
  std::uniform_real_distribution<double> dist(-scale, scale);
  Tensor t({n});
  for (auto& v : t.v) v = dist(rng);
  return t;
}

// Moves weights that sit within margin of a half-step boundary, where the
// regularizer is non-differentiable, so finite differences are valid.
void clear_boundaries(Tensor& w, const QuantizerSpec& spec, double margin) {
  const double step = step_size(spec);
  for (auto& v : w.v) {
    const double pos = v / step - std::floor(v / step);
    if (std::fabs(pos - 0.5) < margin) v += 4.0 * margin * step;
  }
}

}  // namespace

TEST_SUITE("regularizer") {

TEST_CASE("lambda schedule endpoints and interpolation") {
  const LambdaSchedule s{0.0, 1000.0, 80};
  CHECK(lambda_at(s, 0) == 0.0);
  CHECK(lambda_at(s, 79) == 1000.0);
  CHECK(lambda_at(s, 40) == doctest::Approx(1000.0 * 40.0 / 79.0).epsilon(1e-12));
  CHECK(lambda_at(s, 1) > 0.0);
  CHECK(lambda_at(s, 78) < 1000.0);
  for (int e = 1; e < 80; ++e) {
    CHECK(lambda_at(s, e) >= lambda_at(s, e - 1));  // monotone ramp
  }
}

TEST_CASE("lambda schedule validation") {
  CHECK_THROWS_AS(lambda_at({0.0, 1000.0, 80}, -1), std::invalid_argument);
  CHECK_THROWS_AS(lambda_at({0.0, 1000.0, 80}, 80), std::invalid_argument);
  CHECK_THROWS_AS(lambda_at({-1.0, 0.0, 10}, 0), std::invalid_argument);
  CHECK_THROWS_AS(lambda_at({0.0, 1.0, 0}, 0), std::invalid_argument);
  CHECK(lambda_at({5.0, 9.0, 1}, 0) == 5.0);  // single-epoch schedule: start value
}

TEST_CASE("reg_loss hand-computed example") {
  const Tensor w({2}, {0.30, -0.05});
  const std::vector<LayerQuantState> states{{1, {2, 2}, 2}};
  const std::vector<Tensor> layers{w};
  CHECK(reg_loss(layers, states, 4.0) == doctest::Approx(0.005).epsilon(1e-12));
  CHECK(reg_loss(layers, states, 0.0) == 0.0);
}

TEST_CASE("reg_loss zero iff on-grid") {
  const std::vector<LayerQuantState> states{{1, {2, 2}, 3}};
  const Tensor on({3}, {0.25, 0.0, -0.25});
  CHECK(reg_loss(std::vector<Tensor>{on}, states, 123.0) == 0.0);
  const Tensor off({3}, {0.25, 1e-9, -0.25});
  CHECK(reg_loss(std::vector<Tensor>{off}, states, 123.0) > 0.0);
}

TEST_CASE("reg_grad hand-computed example") {
  const Tensor w({2}, {0.30, -0.05});
  const std::vector<LayerQuantState> states{{1, {2, 2}, 2}};
  const auto grads = reg_grad(std::vector<Tensor>{w}, states, 4.0);
  REQUIRE(grads.size() == 1);
  CHECK(grads[0].v[0] == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(grads[0].v[1] == doctest::Approx(-0.1).epsilon(1e-12));

  const auto zero_grads = reg_grad(std::vector<Tensor>{w}, states, 0.0);
  CHECK(zero_grads[0].v == std::vector<double>{0.0, -0.0});
  // On-grid weight: gradient exactly zero.
  const Tensor on({1}, {0.25});
  const std::vector<LayerQuantState> s1{{1, {2, 2}, 1}};
  CHECK(reg_grad(std::vector<Tensor>{on}, s1, 4.0)[0].v[0] == 0.0);
}

TEST_CASE("layer/state mismatch and stale counts rejected") {
  const Tensor w({2}, {0.1, 0.2});
  const std::vector<LayerQuantState> states{{1, {2, 2}, 2}, {2, {2, 2}, 2}};
  CHECK_THROWS_AS(reg_loss(std::vector<Tensor>{w}, states, 1.0), std::invalid_argument);
  const std::vector<LayerQuantState> stale{{1, {2, 2}, 3}};
  CHECK_THROWS_AS(reg_loss(std::vector<Tensor>{w}, stale, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(reg_loss(std::vector<Tensor>{w}, std::vector<LayerQuantState>{{1, {2, 2}, 2}},
                           -1.0),
                  std::invalid_argument);
}

TEST_CASE("homogeneity in lambda") {
  std::mt19937_64 rng(5);
  const Tensor w = random_weights(rng, 40, 0.8);
  const std::vector<LayerQuantState> states{{1, {2, 2}, 40}};
  const std::vector<Tensor> layers{w};
  const double base = reg_loss(layers, states, 3.0);
  CHECK(reg_loss(layers, states, 6.0) == 2.0 * base);  // power-of-two factor: exact
  CHECK(reg_loss(layers, states, 9.0) == doctest::Approx(3.0 * base).epsilon(1e-12));
  const auto g1 = reg_grad(layers, states, 3.0);
  const auto g2 = reg_grad(layers, states, 6.0);
  for (std::size_t i = 0; i < g1[0].size(); ++i) {
    CHECK(g2[0].v[i] == 2.0 * g1[0].v[i]);
  }
}

TEST_CASE("layer-equal rating under duplication") {
  std::mt19937_64 rng(6);
  const Tensor w = random_weights(rng, 25, 0.6);
  Tensor dup({50});
  for (std::size_t i = 0; i < 25; ++i) {
    dup.v[i] = w.v[i];
    dup.v[25 + i] = w.v[i];
  }
  const std::vector<LayerQuantState> s1{{1, {2, 2}, 25}};
  const std::vector<LayerQuantState> s2{{1, {2, 2}, 50}};
  const double loss1 = reg_loss(std::vector<Tensor>{w}, s1, 7.0);
  const double loss2 = reg_loss(std::vector<Tensor>{dup}, s2, 7.0);
  CHECK(loss2 == doctest::Approx(loss1).epsilon(1e-12));  // layer rated equally

  // Doubling M halves the per-weight gradient scale, exactly.
  const auto g1 = reg_grad(std::vector<Tensor>{w}, s1, 7.0);
  const auto g2 = reg_grad(std::vector<Tensor>{dup}, s2, 7.0);
  for (std::size_t i = 0; i < 25; ++i) {
    CHECK(g2[0].v[i] == 0.5 * g1[0].v[i]);
  }
}

TEST_CASE("gradient matches central finite differences") {
  std::mt19937_64 rng(99);
  for (int instance = 0; instance < 100; ++instance) {
    const QuantizerSpec spec{2 + static_cast<int>(rng() % 3), static_cast<int>(rng() % 5) - 1};
    const std::size_t n = 5 + rng() % 20;
    Tensor w = random_weights(rng, n, 1.5 * step_size(spec));
    clear_boundaries(w, spec, 1e-3);
    const std::vector<LayerQuantState> states{{1, spec, n}};
    const double lambda = 0.5 + static_cast<double>(rng() % 100) / 10.0;
    const auto grads = reg_grad(std::vector<Tensor>{w}, states, lambda);
    const double h = 1e-6;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor wp = w, wm = w;
      wp.v[i] += h;
      wm.v[i] -= h;
      const double fd = (reg_loss(std::vector<Tensor>{wp}, states, lambda) -
                         reg_loss(std::vector<Tensor>{wm}, states, lambda)) /
                        (2.0 * h);
      if (std::fabs(fd) > 1e-12) {
        CHECK(grads[0].v[i] == doctest::Approx(fd).epsilon(1e-6));
      } else {
        CHECK(std::fabs(grads[0].v[i]) < 1e-9);
      }
    }
  }
}

TEST_CASE("step search examples") {
  const Tensor multiples({4}, {0.25, -0.25, 0.0, 0.25});
  const StepSearchResult r1 = search_step_exponent(multiples, 2, -8, 8);
  CHECK(r1.spec.exponent == 2);
  CHECK(r1.residual == 0.0);
  CHECK_FALSE(r1.degenerate);

  const Tensor clipped({3}, {0.5, -0.5, 1.0});
  const StepSearchResult r2 = search_step_exponent(clipped, 2, -8, 8);
  CHECK(r2.spec.exponent == 1);
  CHECK(r2.residual == doctest::Approx(0.25).epsilon(1e-15));

  const Tensor zero({2});
  const StepSearchResult r3 = search_step_exponent(zero, 2, -8, 8);
  CHECK(r3.degenerate);
  CHECK(r3.spec.exponent == 8);
  CHECK(r3.residual == 0.0);
}

TEST_CASE("step search breaks ties toward larger exponent") {
  // w = 0.75 with N = 2: f = 0 gives q = 1 and f = 1 gives q = 0.5, both with
  // residual 0.0625; the finer grid (f = 1) must win.
  const Tensor w({1}, {0.75});
  const StepSearchResult r = search_step_exponent(w, 2, -8, 8);
  CHECK(r.spec.exponent == 1);
  CHECK(r.residual == doctest::Approx(0.0625).epsilon(1e-15));
}

TEST_CASE("step search matches exhaustive oracle on random layers") {
  std::mt19937_64 rng(1234);
  for (int instance = 0; instance < 60; ++instance) {
    const int bits = 2 + static_cast<int>(rng() % 3);
    const std::size_t n = 10 + rng() % 500;
    const double scale = std::ldexp(1.0, static_cast<int>(rng() % 7) - 3);
    const Tensor w = random_weights(rng, n, scale);
    const StepSearchResult got = search_step_exponent(w, bits, -8, 8);
    const StepSearchResult want = oracle_search(w, bits, -8, 8);
    CHECK(got.spec.exponent == want.spec.exponent);
    CHECK(got.residual == want.residual);
  }
}

}  // TEST_SUITE
