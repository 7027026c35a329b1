// spikeseg/dynamics.hpp
//
// Discrete-time spiking neurons used for boundary detection. All four
// dynamics share one update scheme: a kind-specific drive F is added to the
// membrane potential (forward Euler, dt = tau = C_m = 1), the potential is
// clamped to +-v_clip, and a spike is emitted when it strictly exceeds the
// current threshold, after which the threshold is subtracted (soft reset).
#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace spikeseg::dynamics {

enum class Kind { Vanilla, AdaptiveThreshold, SecondOrder, DoubleNeuron };

std::string_view to_string(Kind kind);
// Accepts the CLI spellings: vanilla, adaptive-threshold, second-order,
// double-neuron. Throws UsageError on anything else.
Kind parse_kind(std::string_view name);

struct DynamicsSpec {
  Kind kind = Kind::Vanilla;
  double v_th0 = 1.0;
  double tau = 1.0;
  double c_m = 1.0;
  double v_clip = 5.0;
  // AdaptiveThreshold
  double alpha = 0.95;
  double delta_h = 0.1;
  // SecondOrder: F = a v^2 + b v + c i
  double a = 0.1014;
  double b = -0.0832;
  double c = 0.9506;
  // DoubleNeuron: F = g v^2 + m u + i,  du = n u (+ u_jump on spike)
  double g = 0.001;
  double m = -0.05;
  double n = -0.05;
  double u_jump = 1.0;

  // Defaults are the converged pre-learning values for each kind.
  static DynamicsSpec make(Kind kind);

  // Throws ConfigError when an invariant is broken (v_th0 > 0, tau == 1,
  // C_m == 1, v_clip > v_th0, alpha in (0, 1], u_jump >= 0).
  void validate() const;

  nlohmann::json to_json() const;
  static DynamicsSpec from_json(const nlohmann::json& j);
};

struct NeuronState {
  double v = 0.0;
  double v_th = 1.0;
  double u = 0.0;
  bool spike = false;

  static NeuronState initial(const DynamicsSpec& spec);
};

// Kind-specific potential increment. Written once over the scalar type so the
// differentiable integrator evaluates exactly the same floating-point
// expression as the plain simulator.
template <class Scalar>
Scalar drive_expr(const DynamicsSpec& spec, const Scalar& v, double u, const Scalar& i) {
  switch (spec.kind) {
    case Kind::SecondOrder:
      return spec.a * (v * v) + spec.b * v + spec.c * i;
    case Kind::DoubleNeuron:
      return spec.g * (v * v) + spec.m * u + i;
    case Kind::Vanilla:
    case Kind::AdaptiveThreshold:
      break;
  }
  return i;
}

double drive(const DynamicsSpec& spec, const NeuronState& state, double i);

// Threshold and inhibitory potential for the next step, given the spike
// decision of this step.
double next_threshold(const DynamicsSpec& spec, double v_th, bool spike);
double next_inhibition(const DynamicsSpec& spec, double u, bool spike);

NeuronState step(const DynamicsSpec& spec, const NeuronState& state, double i);

struct SimulationTrace {
  std::vector<double> currents;
  std::vector<double> potentials;
  std::vector<double> thresholds;
  std::vector<double> inhibitions;
  std::vector<bool> spikes;
  std::size_t spike_count = 0;

  std::size_t size() const { return potentials.size(); }
};

SimulationTrace simulate(const DynamicsSpec& spec, std::span<const double> currents);

// Piecewise-linear wave starting at `min`, peaking at `max` half a period
// later.
std::vector<double> triangle_wave(double min, double max, std::size_t period, std::size_t length);

enum class Stability { Attractor, Repulsor };
std::string_view to_string(Stability s);

struct FixedPointReport {
  std::vector<double> roots;  // ascending
  std::vector<Stability> stability;
  // Smallest constant input with no real root; empty when a*c <= 0.
  std::optional<double> critical_current;
};

FixedPointReport fixed_points(const DynamicsSpec& spec, double i);

struct RateConsistencyReport {
  double input_current = 0.0;
  std::size_t steps = 0;
  std::size_t spikes = 0;
  double rate = 0.0;
  double residual_potential = 0.0;
  double ann_rate_term = 0.0;
  double v_th = 1.0;

  // rate - (ann_rate_term - residual / (steps * v_th))
  double identity_residual() const;
};

RateConsistencyReport rate_consistency(double i, std::size_t steps, double v_th = 1.0);

// CSV: step,i,v,v_th,u,spike
void write_trace_csv(std::ostream& out, const SimulationTrace& trace);
nlohmann::json trace_summary_json(const DynamicsSpec& spec, const SimulationTrace& trace);
nlohmann::json to_json(const FixedPointReport& report);
nlohmann::json to_json(const RateConsistencyReport& report);

}  // namespace spikeseg::dynamics
