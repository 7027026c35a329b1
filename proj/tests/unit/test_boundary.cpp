#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "spikeseg/boundary.hpp"
#include "spikeseg/errors.hpp"

using namespace spikeseg;
using namespace spikeseg::boundary;
using dynamics::DynamicsSpec;
using dynamics::Kind;

namespace {

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Matrix m(r, c);
  for (auto& x : m.data) x = d(rng);
  return m;
}

std::vector<double> random_currents(std::size_t n, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> c(n);
  for (auto& x : c) x = d(rng);
  return c;
}

const Kind kAllKinds[] = {Kind::Vanilla, Kind::AdaptiveThreshold, Kind::SecondOrder, Kind::DoubleNeuron};

}  // namespace

TEST_CASE("compute_currents range and shape") {
  std::mt19937_64 rng(1);
  ParameterStore params;
  const auto head = CurrentHead::create(params, "cif", 6, 16, 3, rng);
  for (std::size_t T : {1u, 2u, 9u}) {
    const auto h = ad::Tensor::from_matrix(random_matrix(T, 6, rng));
    const auto c = compute_currents(h, head);
    REQUIRE(c.size() == T);
    for (double x : c.values()) {
      CHECK(x > 0.0);
      CHECK(x < 1.0);
    }
  }
  // zero weights and biases
  for (auto& e : params.entries()) std::fill(e.tensor.mutable_values().begin(), e.tensor.mutable_values().end(), 0.0);
  const auto c = compute_currents(ad::Tensor::from_matrix(random_matrix(5, 6, rng)), head);
  for (double x : c.values()) CHECK(x == 0.5);
  CHECK_THROWS_AS(compute_currents(ad::Tensor::from_matrix(random_matrix(5, 4, rng)), head), DimensionError);
}

TEST_CASE("compute_currents gradient") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    ParameterStore params;
    const auto head = CurrentHead::create(params, "cif", 4, 8, 3, rng);
    auto h = ad::Tensor::parameter({6, 4}, random_matrix(6, 4, rng).data);
    std::vector<ad::Tensor> inputs{h, head.conv_w, head.conv_b, head.proj_w, head.proj_b};
    const auto r = ad::grad_check(
        [&](const std::vector<ad::Tensor>& x) {
          CurrentHead hd = head;
          hd.conv_w = x[1];
          hd.conv_b = x[2];
          hd.proj_w = x[3];
          hd.proj_b = x[4];
          const auto c = compute_currents(x[0], hd);
          return ad::sum(c * c);
        },
        inputs);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("scale_currents") {
  CHECK(scale_currents(std::vector<double>{0.5, 0.5, 0.5, 0.5}, 1, 1.0) == std::vector<double>{0.25, 0.25, 0.25, 0.25});
  const auto s = scale_currents(std::vector<double>{0.1, 0.3}, 2, 1.0);
  CHECK(s[0] == doctest::Approx(0.5));
  CHECK(s[1] == doctest::Approx(1.5));
  const std::vector<double> exact{0.25, 0.75, 1.0};
  const auto same = scale_currents(exact, 2, 1.0);
  for (std::size_t i = 0; i < exact.size(); ++i) CHECK(same[i] == doctest::Approx(exact[i]).epsilon(1e-15));
  CHECK_THROWS_AS(scale_currents(std::vector<double>{0.0, 0.0}, 1, 1.0), DegenerateInputError);
}

TEST_CASE("integrate_and_fire worked example") {
  Matrix h(2, 2);
  h(0, 0) = 1.0;
  h(0, 1) = 2.0;
  h(1, 0) = -3.0;
  h(1, 1) = 0.5;
  const auto tr = integrate_and_fire(h, std::vector<double>{0.6, 0.6}, DynamicsSpec::make(Kind::Vanilla));
  REQUIRE(tr.spike_count() == 1);
  CHECK(tr.boundary_frames[0] == 1);
  // the firing frame is weighted by the clamped potential, 1.0
  CHECK(tr.fired_states[0][0] == doctest::Approx(0.6 * 1.0 + 1.0 * -3.0));
  CHECK(tr.fired_states[0][1] == doctest::Approx(0.6 * 2.0 + 1.0 * 0.5));
  CHECK(tr.potentials[1] == doctest::Approx(0.2));
}

TEST_CASE("zero currents never fire") {
  std::mt19937_64 rng(2);
  for (Kind k : {Kind::Vanilla, Kind::AdaptiveThreshold, Kind::DoubleNeuron}) {
    const auto tr = integrate_and_fire(random_matrix(7, 3, rng), std::vector<double>(7, 0.0), DynamicsSpec::make(k));
    CHECK(tr.spike_count() == 0);
    CHECK(tr.fired_states.empty());
    CHECK(quantity_proxy(tr) == 0.0);
  }
}

TEST_CASE("integration agrees with the plain simulator") {
  std::mt19937_64 rng(3);
  for (Kind k : kAllKinds) {
    for (int trial = 0; trial < 20; ++trial) {
      const auto c = random_currents(30, rng);
      const auto sim = dynamics::simulate(DynamicsSpec::make(k), c);
      IntegrateOptions opt;
      opt.tail_fraction = 10.0;  // no tail emission
      const auto tr = integrate_and_fire(random_matrix(30, 2, rng), c, DynamicsSpec::make(k), opt);
      CHECK(tr.spikes == sim.spikes);
      CHECK(tr.potentials == sim.potentials);
    }
  }
}

TEST_CASE("trace invariants") {
  std::mt19937_64 rng(4);
  for (Kind k : kAllKinds) {
    for (int trial = 0; trial < 30; ++trial) {
      const std::size_t T = 5 + trial;
      const auto c = random_currents(T, rng);
      const auto tr = integrate_and_fire(random_matrix(T, 3, rng), c, DynamicsSpec::make(k));
      const auto flagged = static_cast<std::size_t>(std::count(tr.spikes.begin(), tr.spikes.end(), true));
      CHECK(tr.fired_states.size() == tr.boundary_frames.size());
      CHECK(tr.spike_count() == flagged + tr.tail_emissions);
      for (std::size_t i = 1; i < tr.boundary_frames.size(); ++i) {
        CHECK(tr.boundary_frames[i - 1] < tr.boundary_frames[i]);
      }
      for (double x : tr.currents) {
        CHECK(x >= 0.0);
        CHECK(x <= 1.0);
      }
    }
  }
}

TEST_CASE("vanilla drive stays within one spike of the count") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const auto c = random_currents(40, rng);
    const auto tr = integrate_and_fire(random_matrix(40, 2, rng), c, DynamicsSpec::make(Kind::Vanilla));
    std::size_t count = 0;
    for (std::size_t t = 0; t < c.size(); ++t) {
      count += tr.spikes[t] ? 1 : 0;
      CHECK(std::abs(tr.drive_prefix[t] - static_cast<double>(count)) < 1.0);
    }
  }
}

TEST_CASE("scaled vanilla fires exactly the target count") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<std::size_t> len(4, 40);
    const std::size_t T = len(rng);
    std::uniform_int_distribution<std::size_t> tgt(1, T);
    const std::size_t N = tgt(rng);
    const auto c = scale_currents(random_currents(T, rng, 0.01, 1.0), N, 1.0);
    IntegrateOptions opt;
    opt.scaled_target = N;
    const auto tr = integrate_and_fire(random_matrix(T, 2, rng), c, DynamicsSpec::make(Kind::Vanilla), opt);
    CHECK(tr.spike_count() == N);
    CHECK(tr.fired_states.size() == N);
  }
}

TEST_CASE("quantity proxy") {
  std::mt19937_64 rng(7);
  const auto tr = integrate_and_fire(random_matrix(6, 2, rng), std::vector<double>{0.5, 0.5, 0.5, 0.5, 0.5, 0.5},
                                     DynamicsSpec::make(Kind::Vanilla));
  CHECK(quantity_proxy(tr) == doctest::Approx(3.0));

  // second order at a constant 0.15: sum of positive drives along the run
  const auto so = DynamicsSpec::make(Kind::SecondOrder);
  const std::vector<double> c(100, 0.15);
  const auto sim = dynamics::simulate(so, c);
  double expected = 0.0;
  double v = 0.0;
  for (std::size_t t = 0; t < c.size(); ++t) {
    const double f = so.a * v * v + so.b * v + so.c * c[t];
    expected += std::max(0.0, f) / so.v_th0;
    v = sim.potentials[t];
  }
  const auto tr2 = integrate_and_fire(random_matrix(100, 2, rng), c, so);
  CHECK(quantity_proxy(tr2) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("tail rule") {
  Matrix h(3, 1, 1.0);
  const auto spec = DynamicsSpec::make(Kind::Vanilla);
  const auto high = integrate_and_fire(h, std::vector<double>{0.3, 0.3, 0.1}, spec);
  REQUIRE(high.spike_count() == 1);
  CHECK(high.boundary_frames[0] == 3);
  CHECK(high.fired_states[0][0] == doctest::Approx(0.3 + 0.6 + 0.7));
  const auto low = integrate_and_fire(h, std::vector<double>{0.1, 0.1, 0.2}, spec);
  CHECK(low.spike_count() == 0);
}

TEST_CASE("fired state gradients") {
  for (Kind k : kAllKinds) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed + 20);
      const std::size_t T = 12;
      auto h = ad::Tensor::parameter({T, 3}, random_matrix(T, 3, rng).data);
      const auto c = ad::Tensor::constant({T}, random_currents(T, rng, 0.1, 0.9));
      const auto spec = DynamicsSpec::make(k);
      std::vector<double> w(3 * T);
      for (auto& x : w) x = std::uniform_real_distribution<double>(-1, 1)(rng);
      const auto r = ad::grad_check(
          [&](const std::vector<ad::Tensor>& x) {
            const auto integ = integrate_and_fire(x[0], c, spec);
            const std::size_t n = integ.fired.rows();
            if (n == 0) return ad::sum(x[0]) * 0.0;
            return ad::sum(integ.fired * ad::Tensor::constant({n, 3}, std::vector<double>(w.begin(), w.begin() + 3 * n)));
          },
          {h});
      CHECK(r.max_rel_error <= 1e-4);
    }
  }
}

TEST_CASE("fit_to_length") {
  const auto f = ad::Tensor::constant({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(fit_to_length(f, 2, 3).rows() == 2);
  const auto cut = fit_to_length(f, 1, 3);
  CHECK(cut.rows() == 1);
  CHECK(cut[2] == 3);
  const auto pad = fit_to_length(f, 4, 3);
  CHECK(pad.rows() == 4);
  CHECK(pad[6] == 0.0);
  CHECK(fit_to_length(ad::Tensor::zeros({0, 3}), 2, 3).rows() == 2);
}

TEST_CASE("encoder frame to input frame") {
  CHECK(to_input_frame(0, 10, 40) == 2);
  CHECK(to_input_frame(3, 10, 40) == 14);
  CHECK(to_input_frame(9, 10, 37) == 37);
  CHECK(to_input_frame(10, 10, 40) == 40);
  CHECK(to_input_frame(12, 10, 40) == 40);
}
