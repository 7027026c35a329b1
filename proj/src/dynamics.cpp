// spikeseg/dynamics.cpp

#include "spikeseg/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "spikeseg/errors.hpp"
#include "spikeseg/io.hpp"

namespace spikeseg::dynamics {

namespace {

void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) {
    throw NumericDomainError(std::string("non-finite ") + what + " in neuron update");
  }
}

}  // namespace

std::string_view to_string(Kind kind) {
  switch (kind) {
    case Kind::Vanilla:
      return "vanilla";
    case Kind::AdaptiveThreshold:
      return "adaptive-threshold";
    case Kind::SecondOrder:
      return "second-order";
    case Kind::DoubleNeuron:
      return "double-neuron";
  }
  return "unknown";
}

Kind parse_kind(std::string_view name) {
  for (Kind k : {Kind::Vanilla, Kind::AdaptiveThreshold, Kind::SecondOrder, Kind::DoubleNeuron}) {
    if (name == to_string(k)) return k;
  }
  throw UsageError("unknown dynamics '" + std::string(name) +
                   "' (expected vanilla, adaptive-threshold, second-order or double-neuron)");
}

DynamicsSpec DynamicsSpec::make(Kind kind) {
  DynamicsSpec spec;
  spec.kind = kind;
  return spec;
}

void DynamicsSpec::validate() const {
  const double fields[] = {v_th0, tau, c_m, v_clip, alpha, delta_h, a, b, c, g, m, n, u_jump};
  for (double f : fields) {
    if (!std::isfinite(f)) throw ConfigError("dynamics parameters must be finite");
  }
  if (!(v_th0 > 0.0)) throw ConfigError("v_th0 must be positive");
  if (tau != 1.0) throw ConfigError("tau is fixed to 1");
  if (c_m != 1.0) throw ConfigError("membrane capacitance is fixed to 1");
  if (!(v_clip > v_th0)) throw ConfigError("v_clip must exceed v_th0");
  if (kind == Kind::AdaptiveThreshold && !(alpha > 0.0 && alpha <= 1.0)) {
    throw ConfigError("alpha must lie in (0, 1]");
  }
  if (u_jump < 0.0) throw ConfigError("u_jump must be non-negative");
}

nlohmann::json DynamicsSpec::to_json() const {
  return {{"kind", std::string(to_string(kind))},
          {"v_th0", v_th0},
          {"tau", tau},
          {"c_m", c_m},
          {"v_clip", v_clip},
          {"alpha", alpha},
          {"delta_h", delta_h},
          {"a", a},
          {"b", b},
          {"c", c},
          {"g", g},
          {"m", m},
          {"n", n},
          {"u_jump", u_jump}};
}

DynamicsSpec DynamicsSpec::from_json(const nlohmann::json& j) {
  DynamicsSpec s = make(parse_kind(j.at("kind").get<std::string>()));
  auto read = [&](const char* key, double& field) {
    if (j.contains(key)) field = j.at(key).get<double>();
  };
  read("v_th0", s.v_th0);
  read("tau", s.tau);
  read("c_m", s.c_m);
  read("v_clip", s.v_clip);
  read("alpha", s.alpha);
  read("delta_h", s.delta_h);
  read("a", s.a);
  read("b", s.b);
  read("c", s.c);
  read("g", s.g);
  read("m", s.m);
  read("n", s.n);
  read("u_jump", s.u_jump);
  s.validate();
  return s;
}

NeuronState NeuronState::initial(const DynamicsSpec& spec) {
  return NeuronState{0.0, spec.v_th0, 0.0, false};
}

double drive(const DynamicsSpec& spec, const NeuronState& state, double i) {
  require_finite(i, "input current");
  require_finite(state.v, "membrane potential");
  require_finite(state.u, "inhibitory potential");
  require_finite(state.v_th, "threshold");
  return drive_expr<double>(spec, state.v, state.u, i);
}

double next_threshold(const DynamicsSpec& spec, double v_th, bool spike) {
  if (spec.kind != Kind::AdaptiveThreshold) return v_th;
  return spec.alpha * v_th + (spike ? spec.delta_h : 0.0);
}

double next_inhibition(const DynamicsSpec& spec, double u, bool spike) {
  if (spec.kind != Kind::DoubleNeuron) return 0.0;
  return u + spec.n * u + (spike ? spec.u_jump : 0.0);
}

NeuronState step(const DynamicsSpec& spec, const NeuronState& state, double i) {
  const double f = drive(spec, state, i);
  NeuronState next;
  next.v = std::clamp(state.v + f, -spec.v_clip, spec.v_clip);
  next.spike = next.v > state.v_th;
  if (next.spike) next.v -= state.v_th;
  next.v_th = next_threshold(spec, state.v_th, next.spike);
  next.u = next_inhibition(spec, state.u, next.spike);
  return next;
}

SimulationTrace simulate(const DynamicsSpec& spec, std::span<const double> currents) {
  SimulationTrace trace;
  const std::size_t n = currents.size();
  trace.currents.assign(currents.begin(), currents.end());
  trace.potentials.reserve(n);
  trace.thresholds.reserve(n);
  trace.inhibitions.reserve(n);
  trace.spikes.reserve(n);

  NeuronState state = NeuronState::initial(spec);
  for (double i : currents) {
    // The threshold column holds the value the spike was tested against.
    const double tested = state.v_th;
    state = step(spec, state, i);
    trace.potentials.push_back(state.v);
    trace.thresholds.push_back(tested);
    trace.inhibitions.push_back(state.u);
    trace.spikes.push_back(state.spike);
    if (state.spike) ++trace.spike_count;
  }
  return trace;
}

std::vector<double> triangle_wave(double min, double max, std::size_t period, std::size_t length) {
  if (!(min < max)) throw ContractError("triangle_wave requires min < max");
  if (period < 2) throw ContractError("triangle_wave requires period >= 2");
  std::vector<double> wave(length);
  const double half = static_cast<double>(period) / 2.0;
  for (std::size_t t = 0; t < length; ++t) {
    const double phase = static_cast<double>(t % period);
    const double frac = phase <= half ? phase / half : (static_cast<double>(period) - phase) / half;
    wave[t] = min + (max - min) * frac;
  }
  return wave;
}

std::string_view to_string(Stability s) {
  return s == Stability::Attractor ? "attractor" : "repulsor";
}

FixedPointReport fixed_points(const DynamicsSpec& spec, double i) {
  if (spec.kind != Kind::SecondOrder) {
    throw ContractError("fixed_points requires second-order dynamics");
  }
  require_finite(i, "input current");
  if (spec.a == 0.0) throw DegenerateDynamicsError("fixed_points: quadratic coefficient a is zero");

  FixedPointReport report;
  const double a = spec.a;
  const double b = spec.b;
  const double k = spec.c * i;
  if (a * spec.c > 0.0) report.critical_current = b * b / (4.0 * a * spec.c);

  const double disc = b * b - 4.0 * a * k;
  if (disc < 0.0) return report;

  if (disc == 0.0) {
    report.roots.push_back(-b / (2.0 * a));
  } else {
    // Cancellation-free form of the quadratic formula.
    const double q = -0.5 * (b + std::copysign(std::sqrt(disc), b));
    const double r1 = q / a;
    const double r2 = q != 0.0 ? k / q : 0.0;
    report.roots = {std::min(r1, r2), std::max(r1, r2)};
  }
  for (double r : report.roots) {
    report.stability.push_back(2.0 * a * r + b < 0.0 ? Stability::Attractor : Stability::Repulsor);
  }
  return report;
}

double RateConsistencyReport::identity_residual() const {
  return rate - (ann_rate_term - residual_potential / (static_cast<double>(steps) * v_th));
}

RateConsistencyReport rate_consistency(double i, std::size_t steps, double v_th) {
  if (!(i >= 0.0) || !std::isfinite(i)) throw ContractError("rate_consistency requires finite i >= 0");
  if (steps < 1) throw ContractError("rate_consistency requires at least one step");
  DynamicsSpec spec = DynamicsSpec::make(Kind::Vanilla);
  spec.v_th0 = v_th;
  // The accounting identity is exact only while the clamp never binds.
  spec.v_clip = std::max(spec.v_clip, static_cast<double>(steps) * i + 2.0 * v_th + 1.0);
  spec.validate();

  NeuronState state = NeuronState::initial(spec);
  std::size_t spikes = 0;
  for (std::size_t t = 0; t < steps; ++t) {
    state = step(spec, state, i);
    if (state.spike) ++spikes;
  }
  RateConsistencyReport r;
  r.input_current = i;
  r.steps = steps;
  r.spikes = spikes;
  r.rate = static_cast<double>(spikes) / static_cast<double>(steps);
  r.residual_potential = state.v;
  r.ann_rate_term = i / v_th;
  r.v_th = v_th;
  return r;
}

void write_trace_csv(std::ostream& out, const SimulationTrace& trace) {
  out << "step,i,v,v_th,u,spike\n";
  for (std::size_t t = 0; t < trace.size(); ++t) {
    out << t << ',' << format_double(trace.currents[t]) << ',' << format_double(trace.potentials[t])
        << ',' << format_double(trace.thresholds[t]) << ',' << format_double(trace.inhibitions[t])
        << ',' << (trace.spikes[t] ? 1 : 0) << '\n';
  }
}

nlohmann::json trace_summary_json(const DynamicsSpec& spec, const SimulationTrace& trace) {
  std::vector<std::size_t> spike_steps;
  for (std::size_t t = 0; t < trace.size(); ++t) {
    if (trace.spikes[t]) spike_steps.push_back(t);
  }
  return {{"dynamics", spec.to_json()},
          {"steps", trace.size()},
          {"spike_count", trace.spike_count},
          {"spike_steps", spike_steps}};
}

nlohmann::json to_json(const FixedPointReport& report) {
  nlohmann::json roots = nlohmann::json::array();
  for (std::size_t k = 0; k < report.roots.size(); ++k) {
    roots.push_back({{"v", report.roots[k]}, {"stability", std::string(to_string(report.stability[k]))}});
  }
  nlohmann::json j = {{"roots", roots}};
  j["critical_current"] = report.critical_current ? nlohmann::json(*report.critical_current) : nlohmann::json();
  return j;
}

nlohmann::json to_json(const RateConsistencyReport& r) {
  return {{"input_current", r.input_current},
          {"steps", r.steps},
          {"spikes", r.spikes},
          {"rate", r.rate},
          {"residual_potential", r.residual_potential},
          {"ann_rate_term", r.ann_rate_term},
          {"v_th", r.v_th},
          {"identity_residual", r.identity_residual()}};
}

}  // namespace spikeseg::dynamics
