// spikeseg/boundary.cpp

#include "spikeseg/boundary.hpp"

#include <algorithm>
#include <cmath>

#include "spikeseg/errors.hpp"

namespace spikeseg::boundary {

using ad::Tensor;

CurrentHead CurrentHead::create(ParameterStore& params, const std::string& prefix, std::size_t d_model,
                                std::size_t channels, std::size_t kernel, std::mt19937_64& rng) {
  CurrentHead head;
  head.kernel = kernel;
  head.conv_w = params.add(prefix + ".conv.w", {kernel * d_model, channels},
                           ad::xavier_uniform(kernel * d_model, channels, kernel * d_model * channels, rng));
  head.conv_b = params.add(prefix + ".conv.b", {channels}, std::vector<double>(channels, 0.0));
  head.proj_w = params.add(prefix + ".proj.w", {channels, 1}, ad::xavier_uniform(channels, 1, channels, rng));
  head.proj_b = params.add(prefix + ".proj.b", {1}, {0.0});
  return head;
}

Tensor compute_currents(const Tensor& h, const CurrentHead& head) {
  if (h.dim() != 2 || h.rows() < 1) {
    throw DimensionError("compute_currents expects [T x d_model] with T >= 1, got " + ad::shape_str(h.shape()));
  }
  if (head.conv_w.rows() != head.kernel * h.cols()) {
    throw DimensionError("compute_currents: hidden width " + std::to_string(h.cols()) +
                         " does not match head weights " + ad::shape_str(head.conv_w.shape()));
  }
  const std::size_t pad = head.kernel / 2;
  Tensor ctx = ad::relu(ad::conv1d(h, head.conv_w, head.conv_b, head.kernel, 1, pad));
  Tensor logits = ad::add_row(ad::matmul(ctx, head.proj_w), head.proj_b);
  return ad::reshape(ad::sigmoid(logits), {h.rows()});
}

Tensor scale_currents(const Tensor& currents, std::size_t target_len, double v_th) {
  if (target_len < 1) throw ContractError("scale_currents requires a target length >= 1");
  Tensor total = ad::sum(currents);
  if (!(total.item() > 0.0)) throw DegenerateInputError("scale_currents: currents sum to zero");
  Tensor factor = ad::mul(ad::reciprocal(total), static_cast<double>(target_len) * v_th);
  return ad::scale(factor, currents);
}

std::vector<double> scale_currents(std::span<const double> currents, std::size_t target_len, double v_th) {
  ad::NoGradGuard guard;
  Tensor c = Tensor::constant({currents.size()}, {currents.begin(), currents.end()});
  Tensor s = scale_currents(c, target_len, v_th);
  return {s.values().begin(), s.values().end()};
}

Integration integrate_and_fire(const Tensor& h, const Tensor& currents, const dynamics::DynamicsSpec& spec,
                               const IntegrateOptions& options) {
  if (h.dim() != 2) throw DimensionError("integrate_and_fire: h must be 2-D, got " + ad::shape_str(h.shape()));
  const std::size_t frames = h.rows();
  const std::size_t d = h.cols();
  if (currents.size() != frames) {
    throw DimensionError("integrate_and_fire: " + std::to_string(currents.size()) + " currents for " +
                         std::to_string(frames) + " frames");
  }
  spec.validate();

  Integration out;
  IntegrationTrace& tr = out.trace;
  tr.currents.assign(currents.values().begin(), currents.values().end());

  dynamics::NeuronState state = dynamics::NeuronState::initial(spec);
  Tensor v = Tensor::scalar(0.0);
  Tensor segment = Tensor::zeros({d});
  bool segment_open = false;
  Tensor drive = Tensor::scalar(0.0);
  std::vector<Tensor> fired;

  auto emit = [&](std::size_t frame) {
    fired.push_back(segment);
    tr.fired_states.emplace_back(segment.values().begin(), segment.values().end());
    tr.boundary_frames.push_back(frame);
    segment = Tensor::zeros({d});
    segment_open = false;
  };

  for (std::size_t t = 0; t < frames; ++t) {
    if (!std::isfinite(currents[t])) throw NumericDomainError("integrate_and_fire: non-finite current");
    const double v_th = state.v_th;
    Tensor i_t = ad::element(currents, t);
    Tensor f = dynamics::drive_expr<Tensor>(spec, v, state.u, i_t);
    Tensor v_new = ad::clamp(v + f, -spec.v_clip, spec.v_clip);
    drive = drive + ad::relu(f) * (1.0 / v_th);

    const bool spike = v_new.item() > v_th;
    Tensor weight = ad::clamp(v_new, 0.0, v_th);
    segment = segment + ad::scale(weight, ad::row(h, t));
    segment_open = true;
    if (spike) {
      emit(t);
      v_new = v_new - v_th;
    }

    state.v = v_new.item();
    state.spike = spike;
    state.v_th = dynamics::next_threshold(spec, v_th, spike);
    state.u = dynamics::next_inhibition(spec, state.u, spike);

    tr.potentials.push_back(state.v);
    tr.thresholds.push_back(v_th);
    tr.spikes.push_back(spike);
    tr.drive_prefix.push_back(drive.item());
    v = v_new;
  }

  if (options.scaled_target) {
    // Exact arithmetic leaves a whole number of thresholds here; rounding
    // absorbs float error in the sum.
    const long pending = std::lround(state.v / state.v_th);
    for (long k = 0; k < pending; ++k) {
      emit(frames + static_cast<std::size_t>(k));
      ++tr.tail_emissions;
    }
  } else if (segment_open && state.v > options.tail_fraction * state.v_th) {
    emit(frames);
    ++tr.tail_emissions;
  }

  tr.accumulated_drive = drive.item();
  out.drive = drive;
  out.fired = fired.empty() ? Tensor::zeros({0, d}) : ad::concat_rows(fired);
  return out;
}

IntegrationTrace integrate_and_fire(const Matrix& h, std::span<const double> currents,
                                    const dynamics::DynamicsSpec& spec, const IntegrateOptions& options) {
  ad::NoGradGuard guard;
  Tensor ht = Tensor::from_matrix(h);
  Tensor ct = Tensor::constant({currents.size()}, {currents.begin(), currents.end()});
  return integrate_and_fire(ht, ct, spec, options).trace;
}

double quantity_proxy(const IntegrationTrace& trace) { return trace.accumulated_drive; }

Tensor quantity_proxy(const Integration& integration) { return integration.drive; }

Tensor fit_to_length(const Tensor& fired, std::size_t n, std::size_t d_model) {
  const std::size_t have = fired.dim() == 2 ? fired.rows() : 0;
  if (have == n) return fired;
  if (have > n) return ad::slice_rows(fired, 0, n);
  Tensor pad = Tensor::zeros({n - have, d_model});
  if (have == 0) return pad;
  return ad::concat_rows({fired, pad});
}

std::size_t to_input_frame(std::size_t encoder_frame, std::size_t encoder_len, std::size_t input_len,
                           std::size_t stride) {
  if (encoder_frame >= encoder_len) return input_len;
  return std::min(encoder_frame * stride + stride / 2, input_len);
}

}  // namespace spikeseg::boundary
