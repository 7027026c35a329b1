// spikeseg/losses.cpp

#include "spikeseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "spikeseg/errors.hpp"

namespace spikeseg::losses {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_add(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::fabs(a - b)));
}

}  // namespace

void LossWeights::validate() const {
  if (!(ce >= 0.0 && ctc >= 0.0 && quantity >= 0.0)) throw ConfigError("loss weights must be non-negative");
}

ad::Tensor ce_loss(const ad::Tensor& log_probs, std::span<const int> targets, int pad_id) {
  if (log_probs.rows() != targets.size()) {
    throw ContractError("ce_loss: " + std::to_string(log_probs.rows()) + " positions but " +
                        std::to_string(targets.size()) + " targets");
  }
  return ad::nll_loss(log_probs, targets, pad_id);
}

std::size_t ctc_min_frames(std::span<const int> targets) {
  std::size_t n = targets.size();
  for (std::size_t i = 1; i < targets.size(); ++i) {
    if (targets[i] == targets[i - 1]) ++n;
  }
  return n;
}

ad::Tensor ctc_loss(const ad::Tensor& log_posteriors, std::span<const int> targets, int blank) {
  if (log_posteriors.dim() != 2) {
    throw DimensionError("ctc_loss expects [T x V] log-posteriors, got " + ad::shape_str(log_posteriors.shape()));
  }
  const std::size_t frames = log_posteriors.rows();
  const std::size_t vocab = log_posteriors.cols();
  if (blank < 0 || static_cast<std::size_t>(blank) >= vocab) throw DimensionError("ctc_loss: blank id outside vocabulary");
  for (int y : targets) {
    if (y < 0 || static_cast<std::size_t>(y) >= vocab || y == blank) {
      throw DimensionError("ctc_loss: target label " + std::to_string(y) + " is invalid");
    }
  }
  if (frames < ctc_min_frames(targets) || frames == 0) {
    throw InfeasibleAlignmentError("ctc_loss: " + std::to_string(frames) + " frames cannot align " +
                                   std::to_string(targets.size()) + " labels");
  }

  // Blank-augmented label sequence: blank y1 blank y2 ... yN blank.
  const std::size_t states = 2 * targets.size() + 1;
  std::vector<int> ext(states, blank);
  for (std::size_t i = 0; i < targets.size(); ++i) ext[2 * i + 1] = targets[i];
  auto can_skip = [&](std::size_t s) { return s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]; };

  const auto lp = log_posteriors.values();
  auto emit = [&](std::size_t t, std::size_t s) { return lp[t * vocab + static_cast<std::size_t>(ext[s])]; };

  std::vector<double> alpha(frames * states, kNegInf);
  alpha[0] = emit(0, 0);
  if (states > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < frames; ++t) {
    const double* prev = alpha.data() + (t - 1) * states;
    double* cur = alpha.data() + t * states;
    for (std::size_t s = 0; s < states; ++s) {
      double acc = prev[s];
      if (s >= 1) acc = log_add(acc, prev[s - 1]);
      if (can_skip(s)) acc = log_add(acc, prev[s - 2]);
      cur[s] = acc == kNegInf ? kNegInf : acc + emit(t, s);
    }
  }
  const double* last = alpha.data() + (frames - 1) * states;
  double log_p = last[states - 1];
  if (states > 1) log_p = log_add(log_p, last[states - 2]);
  if (log_p == kNegInf) throw InfeasibleAlignmentError("ctc_loss: no alignment has non-zero probability");

  // beta excludes the emission at its own frame, so alpha + beta is the log
  // mass of all paths through (t, s).
  std::vector<double> beta(frames * states, kNegInf);
  beta[(frames - 1) * states + states - 1] = 0.0;
  if (states > 1) beta[(frames - 1) * states + states - 2] = 0.0;
  for (std::size_t t = frames - 1; t-- > 0;) {
    const double* next = beta.data() + (t + 1) * states;
    double* cur = beta.data() + t * states;
    for (std::size_t s = 0; s < states; ++s) {
      double acc = next[s] + emit(t + 1, s);
      if (s + 1 < states) acc = log_add(acc, next[s + 1] + emit(t + 1, s + 1));
      if (s + 2 < states && can_skip(s + 2)) acc = log_add(acc, next[s + 2] + emit(t + 1, s + 2));
      cur[s] = acc;
    }
  }

  std::vector<double> occupancy(frames * vocab, 0.0);
  for (std::size_t t = 0; t < frames; ++t) {
    for (std::size_t s = 0; s < states; ++s) {
      const double a = alpha[t * states + s];
      const double b = beta[t * states + s];
      if (a == kNegInf || b == kNegInf) continue;
      occupancy[t * vocab + static_cast<std::size_t>(ext[s])] += std::exp(a + b - log_p);
    }
  }

  return ad::make_op("ctc", {}, {-log_p}, {log_posteriors}, [occupancy = std::move(occupancy)](ad::Node& self) {
    ad::Node& parent = *self.parents[0];
    if (!parent.requires_grad) return;
    auto& g = parent.grad_buffer();
    for (std::size_t i = 0; i < occupancy.size(); ++i) g[i] -= self.grad[0] * occupancy[i];
  });
}

ad::Tensor quantity_loss(const ad::Tensor& proxy, std::size_t target_len) {
  if (target_len < 1) throw ContractError("quantity_loss requires a target length >= 1");
  return ad::abs(proxy - static_cast<double>(target_len));
}

ad::Tensor combined_loss(const ad::Tensor& ce, const ad::Tensor& ctc, const ad::Tensor& qua, const LossWeights& w) {
  return ce * w.ce + ctc * w.ctc + qua * w.quantity;
}

double combined_loss(double ce, double ctc, double qua, const LossWeights& w) {
  return w.ce * ce + w.ctc * ctc + w.quantity * qua;
}

std::size_t edit_distance(std::span<const int> ref, std::span<const int> hyp) {
  std::vector<std::size_t> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

double per(std::span<const int> ref, std::span<const int> hyp) {
  if (ref.empty()) throw ContractError("per: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

double boundary_accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> reference,
                         std::size_t tolerance) {
  if (reference.empty()) throw ContractError("boundary_accuracy: empty reference");
  std::vector<std::size_t> pred(predicted.begin(), predicted.end());
  std::vector<std::size_t> ref(reference.begin(), reference.end());
  std::sort(pred.begin(), pred.end());
  std::sort(ref.begin(), ref.end());
  std::vector<bool> used(pred.size(), false);
  std::size_t hits = 0;
  for (std::size_t r : ref) {
    const std::size_t lo = r >= tolerance ? r - tolerance : 0;
    const std::size_t hi = r + tolerance;
    for (std::size_t k = 0; k < pred.size(); ++k) {
      if (used[k] || pred[k] < lo) continue;
      if (pred[k] > hi) break;
      used[k] = true;
      ++hits;
      break;
    }
  }
  return static_cast<double>(hits) / static_cast<double>(ref.size());
}

}  // namespace spikeseg::losses
