#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "dppkit/dpp_mask.hpp"
#include "dppkit/ops.hpp"
#include "support/oracles.hpp"

using dppkit::Granularity;
using dppkit::LayerDims;
using dppkit::LayerKind;
using dppkit::MaskGeometry;
using dppkit::Rng;
using T64 = dppkit::BasicTensor<double>;
using Tape64 = dppkit::BasicTape<double>;

namespace {

// Per-granularity C, D and S, written out independently of MaskGeometry.
std::size_t table_active(Granularity g, const LayerDims& d, std::size_t k) {
  const std::size_t a = d.kernel_h * d.kernel_w;
  switch (g) {
    case Granularity::Fine: return d.n_in * k * d.n_out;
    case Granularity::Medium: return k * a * d.n_out;
    case Granularity::Coarse: return d.n_in * a * k;
  }
  return 0;
}

std::size_t table_stored(Granularity g, const LayerDims& d, std::size_t k) {
  const std::size_t s = table_active(g, d, k);
  if (g == Granularity::Fine) return 2 * s;
  if (g == Granularity::Medium) return s + k * d.n_out;
  return s;
}

std::size_t table_classes(Granularity g, const LayerDims& d) {
  if (g == Granularity::Fine) return d.kernel_h * d.kernel_w;
  if (g == Granularity::Medium) return d.n_in;
  return d.n_out;
}

// Flat index of weight (i, r, o) with r the position inside the kernel.
std::size_t weight_at(const LayerDims& d, std::size_t i, std::size_t r, std::size_t o) {
  return (i * d.kernel_area() + r) * d.n_out + o;
}

LayerDims random_conv_dims(Rng& rng) {
  const std::size_t kh = 1 + rng.below(4);
  return {1 + rng.below(6), kh, kh, 1 + rng.below(6)};
}

dppkit::BasicPruningLogits<double> random_logits(LayerKind kind, LayerDims dims, Granularity g,
                                                 std::size_t k, Rng& rng) {
  auto logits = dppkit::build_logits<double>(kind, dims, {g, k});
  for (auto& v : logits.values.values()) v = rng.uniform(-2, 2);
  return logits;
}

}  // namespace

TEST_CASE("build_logits effective shapes") {
  auto medium = dppkit::build_logits<float>(LayerKind::Convolutional, {20, 5, 5, 50}, {Granularity::Medium, 3});
  CHECK(medium.values.shape() == dppkit::Shape{20, 1, 50});
  auto coarse = dppkit::build_logits<float>(LayerKind::Convolutional, {32, 3, 3, 64}, {Granularity::Coarse, 10});
  CHECK(coarse.values.shape() == dppkit::Shape{1, 1, 64});
  auto fc = dppkit::build_logits<float>(LayerKind::FullyConnected, {784, 1, 1, 300}, {Granularity::Fine, 15}, 0.25f);
  CHECK(fc.values.shape() == dppkit::Shape{784, 300});
  CHECK(fc.geometry.classes() == 784);
  CHECK(fc.geometry.distributions() == 300);
  for (float v : fc.values.values()) REQUIRE(v == 0.25f);
  CHECK(fc.values.requires_grad());

  auto fine = dppkit::build_logits<float>(LayerKind::Convolutional, {20, 5, 5, 50}, {Granularity::Fine, 4});
  CHECK(fine.values.shape() == dppkit::Shape{20, 25, 50});

  CHECK_THROWS_AS(dppkit::build_logits<float>(LayerKind::Convolutional, {20, 5, 5, 50}, {Granularity::Fine, 26}),
                  std::invalid_argument);
  CHECK_THROWS_AS(dppkit::build_logits<float>(LayerKind::FullyConnected, {10, 1, 1, 5}, {Granularity::Fine, 0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(dppkit::build_logits<float>(LayerKind::FullyConnected, {10, 3, 3, 5}, {Granularity::Fine, 1}),
                  std::invalid_argument);
}

TEST_CASE("granularity names") {
  CHECK(dppkit::parse_granularity("fine") == Granularity::Fine);
  CHECK(dppkit::parse_granularity("dpp-m") == Granularity::Medium);
  CHECK(dppkit::parse_granularity("C") == Granularity::Coarse);
  CHECK_THROWS(dppkit::parse_granularity("huge"));
  CHECK(dppkit::to_string(Granularity::Medium) == "medium");
}

TEST_CASE("S, C, D and stored values follow the table formulas on random dims") {
  Rng rng(5);
  for (int trial = 0; trial < 300; ++trial) {
    const auto dims = random_conv_dims(rng);
    for (auto g : {Granularity::Fine, Granularity::Medium, Granularity::Coarse}) {
      const std::size_t classes = table_classes(g, dims);
      const std::size_t k = 1 + rng.below(classes);
      MaskGeometry geo(LayerKind::Convolutional, dims, {g, k});
      CHECK(geo.classes() == classes);
      CHECK(geo.active_weights() == table_active(g, dims, k));
      CHECK(geo.stored_values() == table_stored(g, dims, k));
      CHECK(geo.distributions() * geo.classes() == geo.effective_size());
    }
  }
  // Fully-connected: kernel of size 1, K of N_in inputs per output neuron.
  MaskGeometry fc(LayerKind::FullyConnected, {784, 1, 1, 300}, {Granularity::Fine, 15});
  CHECK(fc.active_weights() == 15u * 300u);
  CHECK(fc.stored_values() == 2u * 15u * 300u);
}

TEST_CASE("hard masks have the table structure and tied blocks move together") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const auto dims = random_conv_dims(rng);
    const std::size_t a = dims.kernel_area();
    for (auto g : {Granularity::Fine, Granularity::Medium, Granularity::Coarse}) {
      const std::size_t k = 1 + rng.below(table_classes(g, dims));
      auto logits = random_logits(LayerKind::Convolutional, dims, g, k, rng);
      const double beta = rng.uniform(0.0, 1.0);
      auto effective = dppkit::draw_hard_mask(logits, rng, beta);
      auto full = dppkit::expand_hard_mask(effective, logits.geometry);
      REQUIRE(full.size() == dims.weight_count());
      CHECK(static_cast<std::size_t>(std::accumulate(full.begin(), full.end(), 0)) ==
            table_active(g, dims, k));

      for (std::size_t o = 0; o < dims.n_out; ++o) {
        std::size_t kernels_on = 0;
        for (std::size_t i = 0; i < dims.n_in; ++i) {
          std::size_t on = 0;
          for (std::size_t r = 0; r < a; ++r) on += full[weight_at(dims, i, r, o)];
          if (g == Granularity::Fine) CHECK(on == k);
          if (g != Granularity::Fine) CHECK((on == 0 || on == a));
          kernels_on += on == a;
        }
        if (g == Granularity::Medium) CHECK(kernels_on == k);
      }
      if (g == Granularity::Coarse) {
        std::size_t filters_on = 0;
        for (std::size_t o = 0; o < dims.n_out; ++o) {
          std::size_t on = 0;
          for (std::size_t i = 0; i < dims.n_in; ++i)
            for (std::size_t r = 0; r < a; ++r) on += full[weight_at(dims, i, r, o)];
          CHECK((on == 0 || on == dims.n_in * a));
          filters_on += on != 0;
        }
        CHECK(filters_on == k);
      }
    }
  }
}

TEST_CASE("realize_mask examples") {
  Tape64 tape;
  SUBCASE("Coarse with K = N_out keeps every filter") {
    auto logits = dppkit::build_logits<double>(LayerKind::Convolutional, {3, 2, 2, 4}, {Granularity::Coarse, 4});
    Rng rng(1);
    auto noise = dppkit::sample_gumbel<double>(4, rng, 1.0);
    auto m = dppkit::realize_mask(tape, logits, noise, 1.0);
    for (double v : m.mask.values()) CHECK(v == 1.0);
  }
  SUBCASE("Medium, K = 1, beta = 0 activates the dominant kernel of each map") {
    LayerDims dims{3, 2, 2, 2};
    auto logits = dppkit::build_logits<double>(LayerKind::Convolutional, dims, {Granularity::Medium, 1});
    // effective [n_in, 1, n_out]: map 0 prefers input 2, map 1 prefers input 0
    auto phi = logits.values.values();
    phi[2 * 2 + 0] = 5.0;
    phi[0 * 2 + 1] = 5.0;
    dppkit::GumbelNoiseField<double> noise{std::vector<double>(6, 0.0), 0.0};
    auto m = dppkit::realize_mask(tape, logits, noise, 1.0);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t r = 0; r < 4; ++r) {
        CHECK(m.mask[weight_at(dims, i, r, 0)] == (i == 2 ? 1.0 : 0.0));
        CHECK(m.mask[weight_at(dims, i, r, 1)] == (i == 0 ? 1.0 : 0.0));
      }
  }
  SUBCASE("noise must match the effective shape") {
    auto logits = dppkit::build_logits<double>(LayerKind::FullyConnected, {4, 1, 1, 3}, {Granularity::Fine, 2});
    dppkit::GumbelNoiseField<double> noise{std::vector<double>(5, 0.0), 1.0};
    CHECK_THROWS_AS(dppkit::realize_mask(tape, logits, noise, 1.0), std::invalid_argument);
  }
}

TEST_CASE("apply_mask") {
  Tape64 tape;
  Rng rng(3);
  T64 w({2, 3}, oracle::random_values(6, rng));
  w.set_requires_grad(true);
  auto same = dppkit::apply_mask(tape, w, T64::ones({2, 3}));
  for (std::size_t i = 0; i < 6; ++i) CHECK(same[i] == w[i]);

  Tape64 tape2;
  T64 mask({2, 3}, std::vector<double>{1, 0, 1, 0, 0, 1});
  auto masked = dppkit::apply_mask(tape2, w, mask);
  auto loss = dppkit::sum(tape2, masked);
  tape2.backward(loss);
  for (std::size_t i = 0; i < 6; ++i) {
    if (mask[i] == 0) {
      CHECK(masked[i] == 0.0);
      CHECK(w.grad()[i] == 0.0);
    } else {
      CHECK(w.grad()[i] == 1.0);
    }
  }
  Tape64 tape3;
  CHECK_THROWS(dppkit::apply_mask(tape3, w, T64::ones({3, 2})));
}

TEST_CASE("tied logit gradients match central differences of the relaxed surrogate") {
  // 2x2 toy conv layer (2 inputs, 2x2 kernels, 2 outputs), every granularity.
  Rng rng(41);
  LayerDims dims{2, 2, 2, 2};
  const double tau = 1.5;
  for (auto g : {Granularity::Fine, Granularity::Medium, Granularity::Coarse}) {
    const std::size_t k = g == Granularity::Fine ? 2 : 1;
    auto logits = random_logits(LayerKind::Convolutional, dims, g, k, rng);
    const auto& geo = logits.geometry;
    T64 w(geo.weight_shape(), oracle::random_values(dims.weight_count(), rng));
    auto noise = dppkit::sample_gumbel<double>(geo.effective_size(), rng, 1.0);
    auto readout = oracle::random_values(dims.weight_count(), rng);

    Tape64 tape;
    auto m = dppkit::realize_mask(tape, logits, noise, tau);
    auto masked = dppkit::apply_mask(tape, w, m.mask);
    auto loss = dppkit::sum(tape, dppkit::elementwise_mul(tape, masked, T64(geo.weight_shape(), readout)));
    tape.backward(loss);
    std::vector<double> analytic(logits.values.grad().begin(), logits.values.grad().end());

    // Surrogate: sum_w readout * W * soft[tie(w)], tying written out by hand.
    auto tie = [&](std::size_t i, std::size_t r, std::size_t o) -> std::size_t {
      if (g == Granularity::Fine) return weight_at(dims, i, r, o);
      if (g == Granularity::Medium) return i * dims.n_out + o;
      return o;
    };
    auto surrogate = [&](const std::vector<double>& phi) {
      auto r = dppkit::relaxed_topk<double>(phi, noise, k, geo.layout(), tau);
      double total = 0;
      for (std::size_t i = 0; i < dims.n_in; ++i)
        for (std::size_t q = 0; q < dims.kernel_area(); ++q)
          for (std::size_t o = 0; o < dims.n_out; ++o) {
            const std::size_t at = weight_at(dims, i, q, o);
            total += readout[at] * w[at] * r.soft[tie(i, q, o)];
          }
      return total;
    };
    std::vector<double> phi(logits.values.values().begin(), logits.values.values().end());
    auto numeric = oracle::central_difference(phi, surrogate, 1e-4);
    CAPTURE(dppkit::to_string(g));
    CHECK(oracle::relative_error(analytic, numeric) < 1e-3);
  }
}

TEST_CASE("entropy penalty") {
  Tape64 tape;
  auto uniform = dppkit::build_logits<double>(LayerKind::Convolutional, {3, 2, 3, 4}, {Granularity::Fine, 2});
  CHECK(dppkit::entropy_penalty(tape, uniform).item() == doctest::Approx(std::log(6.0)).epsilon(1e-12));

  auto peaked = dppkit::build_logits<double>(LayerKind::FullyConnected, {5, 1, 1, 1}, {Granularity::Fine, 1});
  peaked.values[3] = 40.0;
  CHECK(dppkit::entropy_penalty(tape, peaked).item() < 1e-12);

  SUBCASE("gradient matches central differences") {
    Rng rng(13);
    auto logits = random_logits(LayerKind::Convolutional, {2, 2, 2, 3}, Granularity::Medium, 1, rng);
    Tape64 t;
    auto h = dppkit::entropy_penalty(t, logits);
    t.backward(h);
    std::vector<double> analytic(logits.values.grad().begin(), logits.values.grad().end());
    auto layout = logits.geometry.layout();
    auto f = [&](const std::vector<double>& phi) {
      double total = 0;
      for (std::size_t d = 0; d < layout.distributions(); ++d) {
        std::vector<double> p(layout.classes);
        double z = 0;
        for (std::size_t c = 0; c < layout.classes; ++c) z += p[c] = std::exp(phi[layout.index(d, c)]);
        for (auto& x : p) x /= z;
        total += oracle::entropy_nats(p);
      }
      return total / static_cast<double>(layout.distributions());
    };
    std::vector<double> phi(logits.values.values().begin(), logits.values.values().end());
    CHECK(oracle::relative_error(analytic, oracle::central_difference(phi, f)) < 1e-3);
  }

  SUBCASE("raising the leading logit lowers the entropy") {
    auto logits = dppkit::build_logits<double>(LayerKind::FullyConnected, {6, 1, 1, 1}, {Granularity::Fine, 2});
    Rng rng(2);
    for (auto& v : logits.values.values()) v = rng.uniform(-1, 1);
    logits.values[4] = 1.5;
    Tape64 t;
    t.set_recording(false);
    double previous = dppkit::entropy_penalty(t, logits).item();
    for (int step = 0; step < 40; ++step) {
      logits.values[4] += 0.25;
      const double now = dppkit::entropy_penalty(t, logits).item();
      CHECK(now < previous);
      previous = now;
    }
  }
}
