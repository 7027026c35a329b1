// spikeseg/boundary.hpp
//
// Boundary detection by integrate-and-fire over encoder frames. A small
// convolutional head turns hidden states into per-frame currents in (0, 1);
// a dynamics neuron integrates them and every spike closes a segment whose
// potential-weighted sum of hidden states is emitted for the decoder.
#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spikeseg/checkpoint.hpp"
#include "spikeseg/dynamics.hpp"
#include "spikeseg/io.hpp"
#include "spikeseg/tensor.hpp"

namespace spikeseg::boundary {

struct CurrentHead {
  std::size_t kernel = 3;
  ad::Tensor conv_w;  // [(kernel * d_model) x channels]
  ad::Tensor conv_b;  // [channels]
  ad::Tensor proj_w;  // [channels x 1]
  ad::Tensor proj_b;  // [1]

  static CurrentHead create(ParameterStore& params, const std::string& prefix, std::size_t d_model,
                            std::size_t channels, std::size_t kernel, std::mt19937_64& rng);
};

// h [T x d_model] -> currents [T]: same-length conv, ReLU, projection to one
// value per frame, sigmoid.
ad::Tensor compute_currents(const ad::Tensor& h, const CurrentHead& head);

// Rescales so the currents sum to target_len * v_th. Throws
// DegenerateInputError when they sum to zero or less.
ad::Tensor scale_currents(const ad::Tensor& currents, std::size_t target_len, double v_th);
std::vector<double> scale_currents(std::span<const double> currents, std::size_t target_len, double v_th);

struct IntegrationTrace {
  std::vector<double> currents;
  std::vector<double> potentials;  // after any reset
  std::vector<double> thresholds;  // threshold each frame was tested against
  std::vector<bool> spikes;
  // Running sum of max(0, F_t) / v_th_t, one entry per frame.
  std::vector<double> drive_prefix;
  std::vector<std::vector<double>> fired_states;
  // Frame index of every emission. Emissions after the last frame (tail
  // handling) are numbered T, T + 1, ...
  std::vector<std::size_t> boundary_frames;
  double accumulated_drive = 0.0;
  std::size_t tail_emissions = 0;

  std::size_t spike_count() const { return boundary_frames.size(); }
};

struct IntegrateOptions {
  // Set when currents were rescaled to sum to this many thresholds. Whole
  // thresholds still pending after the last frame are then flushed, so the
  // emission count equals the target.
  std::optional<std::size_t> scaled_target;
  // Without a scaled target, a final partial segment is emitted iff the
  // residual potential exceeds tail_fraction * v_th.
  double tail_fraction = 0.5;
};

struct Integration {
  IntegrationTrace trace;
  ad::Tensor fired;  // [n x d_model], n may be zero
  ad::Tensor drive;  // scalar, differentiable accumulated drive
};

// Runs the dynamics neuron over the frames. Each frame adds
// clamp(v_t, 0, v_th) * h_t to the open segment, v_t being the post-update
// potential before reset; a spike emits the segment and starts a new one.
Integration integrate_and_fire(const ad::Tensor& h, const ad::Tensor& currents, const dynamics::DynamicsSpec& spec,
                               const IntegrateOptions& options = {});
IntegrationTrace integrate_and_fire(const Matrix& h, std::span<const double> currents,
                                    const dynamics::DynamicsSpec& spec, const IntegrateOptions& options = {});

// Continuous stand-in for the spike count.
double quantity_proxy(const IntegrationTrace& trace);
ad::Tensor quantity_proxy(const Integration& integration);

// Truncates or zero-pads fired states to exactly n rows.
ad::Tensor fit_to_length(const ad::Tensor& fired, std::size_t n, std::size_t d_model);

// Input-frame boundary closed by a spike at an encoder frame: the end of that
// frame's stride cell, frame * stride + stride / 2 (the cell is centred on
// frame * stride). Emissions past the last encoder frame sit at the end of
// the utterance.
std::size_t to_input_frame(std::size_t encoder_frame, std::size_t encoder_len, std::size_t input_len,
                           std::size_t stride = 4);

}  // namespace spikeseg::boundary
