#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "spikeseg/dynamics.hpp"
#include "spikeseg/errors.hpp"

using namespace spikeseg;
using namespace spikeseg::dynamics;

namespace {

NeuronState at(double v, double v_th = 1.0, double u = 0.0) {
  NeuronState s;
  s.v = v;
  s.v_th = v_th;
  s.u = u;
  return s;
}

// Plain loop, kept apart from the library so the two can disagree.
std::vector<bool> reference_vanilla(const std::vector<double>& currents, double v_th, double* residual) {
  double v = 0.0;
  std::vector<bool> out;
  for (double i : currents) {
    v += i;
    if (v > 5.0) v = 5.0;
    if (v < -5.0) v = -5.0;
    const bool s = v > v_th;
    if (s) v -= v_th;
    out.push_back(s);
  }
  if (residual) *residual = v;
  return out;
}

}  // namespace

TEST_CASE("drive per kind") {
  CHECK(drive(DynamicsSpec::make(Kind::Vanilla), at(0.3), 0.4) == 0.4);
  CHECK(drive(DynamicsSpec::make(Kind::AdaptiveThreshold), at(0.3), 0.4) == 0.4);
  const auto so = DynamicsSpec::make(Kind::SecondOrder);
  CHECK(drive(so, at(0.0), 0.0) == 0.0);
  CHECK(drive(so, at(0.5), 0.1) == doctest::Approx(0.1014 * 0.25 - 0.0832 * 0.5 + 0.9506 * 0.1).epsilon(1e-15));
  CHECK(drive(so, at(0.5), 0.1) == doctest::Approx(0.0794).epsilon(1e-3));
  const auto dn = DynamicsSpec::make(Kind::DoubleNeuron);
  CHECK(drive(dn, at(0.5, 1.0, 0.2), 0.3) == doctest::Approx(0.001 * 0.25 - 0.05 * 0.2 + 0.3));
}

TEST_CASE("drive rejects non-finite input") {
  const auto so = DynamicsSpec::make(Kind::SecondOrder);
  CHECK_THROWS_AS(drive(so, at(0.0), std::nan("")), NumericDomainError);
  CHECK_THROWS_AS(drive(so, at(INFINITY), 0.1), NumericDomainError);
  CHECK_THROWS_AS(step(so, at(0.0), INFINITY), NumericDomainError);
}

TEST_CASE("converged parameter defaults") {
  const auto so = DynamicsSpec::make(Kind::SecondOrder);
  CHECK(so.a == 0.1014);
  CHECK(so.b == -0.0832);
  CHECK(so.c == 0.9506);
  const auto ad = DynamicsSpec::make(Kind::AdaptiveThreshold);
  CHECK(ad.alpha == 0.95);
  CHECK(ad.delta_h == 0.1);
  const auto dn = DynamicsSpec::make(Kind::DoubleNeuron);
  CHECK(dn.g == 0.001);
  CHECK(dn.m == -0.05);
  CHECK(dn.n == -0.05);
}

TEST_CASE("step: soft reset and adaptive threshold") {
  const auto van = DynamicsSpec::make(Kind::Vanilla);
  const auto s = step(van, at(0.8), 0.4);
  CHECK(s.spike);
  CHECK(s.v == doctest::Approx(0.2));

  // exactly at threshold does not fire
  const auto eq = step(van, at(0.5), 0.5);
  CHECK_FALSE(eq.spike);
  CHECK(eq.v == 1.0);

  const auto ad = DynamicsSpec::make(Kind::AdaptiveThreshold);
  const auto quiet = step(ad, at(0.0), 0.2);
  CHECK_FALSE(quiet.spike);
  CHECK(quiet.v_th == doctest::Approx(0.95));
  const auto fire = step(ad, at(0.9), 0.2);
  CHECK(fire.spike);
  CHECK(fire.v_th == doctest::Approx(1.05));
  CHECK(fire.v == doctest::Approx(0.1));
}

TEST_CASE("step: double neuron inhibition") {
  const auto dn = DynamicsSpec::make(Kind::DoubleNeuron);
  const auto a = step(dn, at(0.0, 1.0, 1.0), 0.1);
  CHECK_FALSE(a.spike);
  CHECK(a.u == doctest::Approx(0.95));
  const auto b = step(dn, at(0.95, 1.0, 0.0), 0.2);
  CHECK(b.spike);
  CHECK(b.u == doctest::Approx(1.0));
}

TEST_CASE("potential stays within the clip") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> cur(-3.0, 3.0);
  for (Kind k : {Kind::Vanilla, Kind::AdaptiveThreshold, Kind::SecondOrder, Kind::DoubleNeuron}) {
    const auto spec = DynamicsSpec::make(k);
    NeuronState s = NeuronState::initial(spec);
    for (int t = 0; t < 2000; ++t) {
      s = step(spec, s, cur(rng));
      REQUIRE(std::abs(s.v) <= spec.v_clip);
      REQUIRE(s.v_th > 0.0);
      if (k != Kind::AdaptiveThreshold) REQUIRE(s.v_th == spec.v_th0);
    }
  }
}

TEST_CASE("simulate examples") {
  const auto van = DynamicsSpec::make(Kind::Vanilla);
  const std::vector<double> quarter(8, 0.25);
  // 1.0 is not above the threshold: the first spike waits for step 5
  const auto tr = simulate(van, quarter);
  CHECK(tr.spike_count == 1);
  CHECK(tr.spikes[4]);
  CHECK(tr.potentials[7] == 1.0);
  CHECK(simulate(van, std::vector<double>(9, 0.25)).spike_count == 2);
  CHECK(tr.size() == 8);
  CHECK(tr.thresholds.size() == 8);

  const auto zeros = simulate(van, std::vector<double>(20, 0.0));
  CHECK(zeros.spike_count == 0);
  for (double v : zeros.potentials) CHECK(v == 0.0);

  CHECK(simulate(van, std::vector<double>{}).size() == 0);

  const auto so = DynamicsSpec::make(Kind::SecondOrder);
  CHECK(simulate(so, std::vector<double>(500, 0.015)).spike_count == 0);
  CHECK(simulate(so, std::vector<double>(500, 0.15)).spike_count >= 1);
}

TEST_CASE("vanilla simulation agrees with a plain loop") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> cur(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> c(100);
    for (auto& x : c) x = cur(rng);
    double residual = 0.0;
    const auto ref = reference_vanilla(c, 1.0, &residual);
    const auto tr = simulate(DynamicsSpec::make(Kind::Vanilla), c);
    CHECK(tr.spikes == ref);
    CHECK(tr.potentials.back() == residual);
  }
}

TEST_CASE("reductions to vanilla are bit identical") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> cur(0.0, 0.7);
  std::vector<double> c(400);
  for (auto& x : c) x = cur(rng);
  const auto base = simulate(DynamicsSpec::make(Kind::Vanilla), c);

  auto ad = DynamicsSpec::make(Kind::AdaptiveThreshold);
  ad.alpha = 1.0;
  ad.delta_h = 0.0;
  auto so = DynamicsSpec::make(Kind::SecondOrder);
  so.a = 0.0;
  so.b = 0.0;
  so.c = 1.0;
  auto dn = DynamicsSpec::make(Kind::DoubleNeuron);
  dn.g = 0.0;
  dn.m = 0.0;
  for (const auto& spec : {ad, so, dn}) {
    const auto tr = simulate(spec, c);
    CHECK(tr.spikes == base.spikes);
    CHECK(tr.potentials == base.potentials);
  }
}

TEST_CASE("vanilla spike count is monotone in the current") {
  const auto van = DynamicsSpec::make(Kind::Vanilla);
  std::size_t prev = 0;
  for (int k = 0; k <= 100; ++k) {
    const double i = k * 0.02;
    const auto n = simulate(van, std::vector<double>(300, i)).spike_count;
    CHECK(n >= prev);
    prev = n;
  }
}

TEST_CASE("triangle wave") {
  CHECK(triangle_wave(0.0, 1.0, 4, 4) == std::vector<double>{0.0, 0.5, 1.0, 0.5});
  CHECK(triangle_wave(0.015, 0.15, 100, 10).front() == 0.015);
  CHECK(triangle_wave(0.2, 0.7, 2, 5) == std::vector<double>{0.2, 0.7, 0.2, 0.7, 0.2});
  CHECK_THROWS_AS(triangle_wave(1.0, 1.0, 4, 4), ContractError);
  CHECK_THROWS_AS(triangle_wave(0.0, 1.0, 1, 4), ContractError);
}

TEST_CASE("fixed points of the second-order neuron") {
  const auto so = DynamicsSpec::make(Kind::SecondOrder);
  const auto r = fixed_points(so, 0.0);
  REQUIRE(r.roots.size() == 2);
  CHECK(r.roots[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.roots[1] == doctest::Approx(0.0832 / 0.1014).epsilon(1e-12));
  CHECK(std::abs(r.roots[1] - 0.820513) < 1e-6);
  CHECK(r.stability[0] == Stability::Attractor);
  CHECK(r.stability[1] == Stability::Repulsor);
  REQUIRE(r.critical_current);
  CHECK(std::abs(*r.critical_current - 0.0832 * 0.0832 / (4 * 0.1014 * 0.9506)) < 1e-15);
  CHECK(std::abs(*r.critical_current - 0.0179536) < 1e-6);

  CHECK(fixed_points(so, 0.15).roots.empty());

  auto flat = so;
  flat.a = 0.0;
  CHECK_THROWS_AS(fixed_points(flat, 0.0), DegenerateDynamicsError);
  CHECK_THROWS_AS(fixed_points(DynamicsSpec::make(Kind::Vanilla), 0.0), ContractError);
}

TEST_CASE("roots are sorted and classified by the derivative sign") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> coef(-1.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    auto spec = DynamicsSpec::make(Kind::SecondOrder);
    spec.a = coef(rng);
    spec.b = coef(rng);
    spec.c = coef(rng);
    if (std::abs(spec.a) < 1e-3) continue;
    const auto r = fixed_points(spec, coef(rng));
    for (std::size_t k = 0; k < r.roots.size(); ++k) {
      if (k > 0) CHECK(r.roots[k - 1] <= r.roots[k]);
      const bool attract = 2 * spec.a * r.roots[k] + spec.b < 0;
      CHECK((r.stability[k] == Stability::Attractor) == attract);
    }
  }
}

TEST_CASE("simulation respects the attractor and the repulsor") {
  const auto so = DynamicsSpec::make(Kind::SecondOrder);
  for (double i : {0.0, 0.005, 0.01}) {
    const auto r = fixed_points(so, i);
    REQUIRE(r.roots.size() == 2);
    for (double frac : {0.1, 0.5, 0.9}) {
      NeuronState s = NeuronState::initial(so);
      s.v = r.roots[0] + frac * (r.roots[1] - r.roots[0]);
      for (int t = 0; t < 1000; ++t) {
        s = step(so, s, i);
        REQUIRE(s.v < r.roots[1]);
      }
      CHECK(std::abs(s.v - r.roots[0]) < 1e-3);
    }
  }
}

TEST_CASE("above the critical current the neuron fires") {
  const auto so = DynamicsSpec::make(Kind::SecondOrder);
  const double ic = *fixed_points(so, 0.0).critical_current;
  for (double i : {ic * 1.01, ic * 1.5, 0.05, 0.15}) {
    CHECK(simulate(so, std::vector<double>(20000, i)).spike_count >= 1);
  }
}

TEST_CASE("rate consistency") {
  // Strict threshold: the potential reaches exactly 1.0 at step 10 and
  // does not fire, so two spikes and a full residual remain.
  const auto a = rate_consistency(0.3, 10);
  CHECK(a.spikes == 2);
  CHECK(a.residual_potential == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(a.rate == doctest::Approx(0.2));
  CHECK(std::abs(a.identity_residual()) <= 1e-12);
  CHECK(rate_consistency(0.3, 11).spikes == 3);
  const auto b = rate_consistency(0.25, 10);
  CHECK(b.spikes == 2);
  CHECK(b.residual_potential == doctest::Approx(0.5));
  CHECK(b.rate == doctest::Approx(0.2));
  const auto z = rate_consistency(0.0, 10);
  CHECK(z.rate == 0.0);
  CHECK(z.residual_potential == 0.0);
  CHECK_THROWS_AS(rate_consistency(-0.1, 10), ContractError);
  CHECK_THROWS_AS(rate_consistency(0.1, 0), ContractError);
}

TEST_CASE("rate identity holds for long runs") {
  for (int k = 0; k <= 20; ++k) {
    const double i = 0.05 * k;
    for (std::size_t t : {1u, 7u, 100u, 1000u, 10000u}) {
      CHECK(std::abs(rate_consistency(i, t).identity_residual()) <= 1e-12);
    }
  }
}

TEST_CASE("parameter validation and serialization") {
  auto s = DynamicsSpec::make(Kind::Vanilla);
  s.tau = 2.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = DynamicsSpec::make(Kind::Vanilla);
  s.v_clip = 0.5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = DynamicsSpec::make(Kind::AdaptiveThreshold);
  s.alpha = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = DynamicsSpec::make(Kind::DoubleNeuron);
  s.u_jump = -1.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(parse_kind("quadratic"), UsageError);
  for (Kind k : {Kind::Vanilla, Kind::AdaptiveThreshold, Kind::SecondOrder, Kind::DoubleNeuron}) {
    CHECK(parse_kind(to_string(k)) == k);
    const auto spec = DynamicsSpec::make(k);
    const auto back = DynamicsSpec::from_json(spec.to_json());
    CHECK(back.to_json() == spec.to_json());
  }
}

TEST_CASE("trace csv layout") {
  const auto tr = simulate(DynamicsSpec::make(Kind::Vanilla), std::vector<double>{0.6, 0.6});
  std::ostringstream os;
  write_trace_csv(os, tr);
  std::istringstream in(os.str());
  std::string header, first, second;
  std::getline(in, header);
  std::getline(in, first);
  std::getline(in, second);
  CHECK(header == "step,i,v,v_th,u,spike");
  CHECK(first.back() == '0');
  CHECK(second.back() == '1');
  const auto j = trace_summary_json(DynamicsSpec::make(Kind::Vanilla), tr);
  CHECK(j.at("spike_count") == 1);
}
